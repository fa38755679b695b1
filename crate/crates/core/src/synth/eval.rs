//! Presence-question and caption scoring.

use alloc::vec::Vec;

use super::{Example, Gold, Strategy, Vocab};
use crate::engine::{baseline_generate, generate, BoundaryConfig, ContrastConfig, NoClock};
use crate::error::SynthError;
use crate::masking::TokenId;
use crate::model::ToyModel;

/// Caption decoding budget.
pub const CAPTION_MAX_TOKENS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoder {
    Baseline,
    Sira { alpha: f32, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HallucinationMetrics {
    pub questions: usize,
    /// Correct yes/no answers over all presence questions.
    pub accuracy: f64,
    pub yes_rate: f64,
    /// Negatives answered yes.
    pub halluc_rate: f64,
    pub halluc_rate_bias: f64,
    pub halluc_rate_random: f64,
    /// Positives answered yes.
    pub grounded_recall: f64,
    pub captions: usize,
    /// Mentioned objects absent from the scene, over all mentions.
    pub caption_halluc_rate: f64,
    /// Present objects mentioned, over all present objects.
    pub caption_recall: f64,
}

/// Perfect answer read off the image tokens.
pub fn oracle_answer(e: &Example, vocab: &Vocab) -> Vec<TokenId> {
    let flags = vocab.read_image(&e.image_tokens).unwrap_or_default();
    let present = |o: usize| flags.get(o).copied().unwrap_or(false);
    match &e.gold {
        Gold::Presence { object, .. } => {
            let yes = present(*object);
            [if yes { Vocab::YES } else { Vocab::NO }, Vocab::EOS].to_vec()
        }
        Gold::Caption { .. } => {
            let mut out: Vec<TokenId> = (0..vocab.num_objects)
                .filter(|&o| present(o))
                .map(|o| vocab.object(o))
                .collect();
            out.push(Vocab::EOS);
            out
        }
    }
}

/// Runs `decoder` on every example: one token for presence questions,
/// up to [`CAPTION_MAX_TOKENS`] for captions.
pub fn decode_answers(
    model: &ToyModel,
    decoder: Decoder,
    examples: &[Example],
    vocab: &Vocab,
) -> Result<Vec<Vec<TokenId>>, SynthError> {
    examples
        .iter()
        .map(|e| {
            let layout = e.layout(vocab)?;
            let t = if e.is_question() { 1 } else { CAPTION_MAX_TOKENS };
            Ok(match decoder {
                Decoder::Baseline => baseline_generate(model, &layout, t)?,
                Decoder::Sira { alpha, k } => {
                    let cfg = ContrastConfig {
                        alpha,
                        max_tokens: t,
                    };
                    generate(model, &layout, BoundaryConfig::new(k), cfg, &NoClock)?.0
                }
            })
        })
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from decoded outputs; a pure function of `(answers, gold)`.
pub fn score(examples: &[Example], answers: &[Vec<TokenId>], vocab: &Vocab) -> HallucinationMetrics {
    let (mut q, mut correct, mut yes) = (0, 0, 0);
    let (mut pos, mut pos_yes) = (0, 0);
    let (mut neg, mut neg_yes) = (0, 0);
    let (mut bias, mut bias_yes, mut rand, mut rand_yes) = (0, 0, 0, 0);
    let (mut caps, mut mentions, mut absent_mentions, mut present_total, mut present_hit) = (0, 0, 0, 0, 0);
    for (e, ans) in examples.iter().zip(answers) {
        match &e.gold {
            Gold::Presence { present, .. } => {
                q += 1;
                let first = ans.first().copied();
                let said_yes = first == Some(Vocab::YES);
                yes += said_yes as usize;
                let said_no = first == Some(Vocab::NO);
                correct += ((*present && said_yes) || (!*present && said_no)) as usize;
                if *present {
                    pos += 1;
                    pos_yes += said_yes as usize;
                } else {
                    neg += 1;
                    neg_yes += said_yes as usize;
                    match e.strategy {
                        Strategy::BiasPaired => {
                            bias += 1;
                            bias_yes += said_yes as usize;
                        }
                        _ => {
                            rand += 1;
                            rand_yes += said_yes as usize;
                        }
                    }
                }
            }
            Gold::Caption { objects } => {
                caps += 1;
                let mut seen: Vec<usize> = Vec::new();
                for &t in ans.iter().take_while(|&&t| t != Vocab::EOS) {
                    if let Some(o) = vocab.object_of(t) {
                        if seen.contains(&o) {
                            continue;
                        }
                        seen.push(o);
                        mentions += 1;
                        absent_mentions += (!objects.contains(&o)) as usize;
                    }
                }
                present_total += objects.len();
                present_hit += objects.iter().filter(|o| seen.contains(o)).count();
            }
        }
    }
    HallucinationMetrics {
        questions: q,
        accuracy: ratio(correct, q),
        yes_rate: ratio(yes, q),
        halluc_rate: ratio(neg_yes, neg),
        halluc_rate_bias: ratio(bias_yes, bias),
        halluc_rate_random: ratio(rand_yes, rand),
        grounded_recall: ratio(pos_yes, pos),
        captions: caps,
        caption_halluc_rate: ratio(absent_mentions, mentions),
        caption_recall: ratio(present_hit, present_total),
    }
}

pub fn eval_hallucination(
    model: &ToyModel,
    decoder: Decoder,
    examples: &[Example],
    vocab: &Vocab,
) -> Result<HallucinationMetrics, SynthError> {
    let answers = decode_answers(model, decoder, examples, vocab)?;
    Ok(score(examples, &answers, vocab))
}
