//! Decoding runs over datasets: paired traces, metrics and sweeps.

use sira_core::engine::{baseline_generate_traced, generate_capturing, BoundaryConfig, Clock, ContrastConfig};
use sira_core::synth::{eval_hallucination, score, Decoder, Example, HallucinationMetrics, Vocab};
use sira_core::{ToyModel, TokenId};

use crate::error::CliError;
use crate::report::{checksum_hex, SweepRow};
use crate::trace::{TraceHeader, TraceRun};

pub struct DecodeSettings {
    pub boundary: BoundaryConfig,
    pub contrast: ContrastConfig,
    pub seed: u64,
    pub timing: bool,
    pub states: bool,
}

/// SIRA and baseline traces for every example, in dataset order.
pub fn paired_traces(
    model: &ToyModel,
    examples: &[Example],
    vocab: &Vocab,
    settings: &DecodeSettings,
    clock: &dyn Clock,
) -> Result<(Vec<TraceRun>, Vec<TraceRun>), CliError> {
    let cfg = model.config();
    let checksum = checksum_hex(model.checksum());
    let mut sira = Vec::with_capacity(examples.len());
    let mut base = Vec::with_capacity(examples.len());
    for e in examples {
        let layout = e.layout(vocab)?;
        let header = |decoder: &str, k: usize, alpha: f32| TraceHeader {
            model_checksum: checksum.clone(),
            S: layout.len(),
            P_img: layout.image_positions().to_vec(),
            L: cfg.num_layers,
            K: k,
            alpha,
            T: settings.contrast.max_tokens,
            seed: settings.seed,
            decoder: decoder.into(),
            prompt: layout.tokens().to_vec(),
        };
        let (trace, states) = generate_capturing(model, &layout, settings.boundary, settings.contrast, clock)?;
        let states = settings.states.then_some(states.as_slice());
        sira.push(TraceRun::from_trace(
            header("sira", settings.boundary.k, settings.contrast.alpha),
            &trace,
            settings.timing,
            states,
        ));
        let (_, trace) = baseline_generate_traced(model, &layout, settings.contrast.max_tokens, clock)?;
        base.push(TraceRun::from_trace(header("baseline", 0, 0.0), &trace, settings.timing, None));
    }
    Ok((sira, base))
}

/// Metrics recomputed from the decoded tokens of saved runs.
pub fn metrics_from_runs(examples: &[Example], runs: &[TraceRun], vocab: &Vocab) -> HallucinationMetrics {
    let answers: Vec<Vec<TokenId>> = runs.iter().map(TraceRun::tokens).collect();
    score(examples, &answers, vocab)
}

pub fn default_k_list(num_layers: usize) -> Vec<usize> {
    let mut ks = vec![0, num_layers / 4, num_layers / 2, 3 * num_layers / 4, num_layers];
    ks.dedup();
    ks
}

/// Baseline row followed by one row per `(K, α)` cell, K-major.
pub fn sweep(
    model: &ToyModel,
    examples: &[Example],
    vocab: &Vocab,
    k_list: &[usize],
    alpha_list: &[f32],
) -> Result<Vec<SweepRow>, CliError> {
    if k_list.is_empty() || alpha_list.is_empty() {
        return Err(CliError::Config("sweep needs nonempty K and alpha lists".into()));
    }
    let l = model.config().num_layers;
    for &k in k_list {
        BoundaryConfig::new(k)
            .validate(l)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    for &alpha in alpha_list {
        ContrastConfig { alpha, max_tokens: 1 }
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut rows = vec![SweepRow::new(
        Decoder::Baseline,
        l,
        &eval_hallucination(model, Decoder::Baseline, examples, vocab)?,
    )];
    for &k in k_list {
        for &alpha in alpha_list {
            let d = Decoder::Sira { alpha, k };
            rows.push(SweepRow::new(d, l, &eval_hallucination(model, d, examples, vocab)?));
        }
    }
    Ok(rows)
}
