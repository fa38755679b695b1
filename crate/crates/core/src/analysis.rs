//! Reference-quality and cost diagnostics.
//!
//! Distances are L2 at the last sequence position. KL is always
//! `KL(softmax(z_full) ‖ softmax(z_ref))`, computed in `f64`.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{BoundaryConfig, DecodeTrace, Session};
use crate::error::{AnalysisError, EngineError};
use crate::masking::{build_causal_mask, rows_to_additive, to_additive, MaskVariant, PromptLayout, TokenId};
use crate::model::{LayerCache, ToyModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftProfile {
    pub boundary: usize,
    pub distances: Vec<f64>,
}

impl DriftProfile {
    /// Mean drift over three contiguous stages of the layer stack
    /// (`[0, L/3)`, `[L/3, 2L/3)`, `[2L/3, L)`, integer division).
    pub fn stage_drift(&self) -> [f64; 3] {
        let l = self.distances.len();
        let cut = [0, l / 3, 2 * l / 3, l];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let span = &self.distances[cut[i]..cut[i + 1]];
            if !span.is_empty() {
                *o = span.iter().sum::<f64>() / span.len() as f64;
            }
        }
        out
    }
}

/// Per-layer L2 distance between two stacks of last-position states.
pub fn layerwise_drift(
    full_states: &[&[f32]],
    ref_states: &[&[f32]],
    boundary: usize,
) -> Result<DriftProfile, AnalysisError> {
    if full_states.len() != ref_states.len() {
        return Err(AnalysisError::Shape {
            what: "layer count",
            expected: full_states.len(),
            actual: ref_states.len(),
        });
    }
    let mut distances = Vec::with_capacity(full_states.len());
    for (a, b) in full_states.iter().zip(ref_states) {
        if a.len() != b.len() {
            return Err(AnalysisError::Shape {
                what: "state width",
                expected: a.len(),
                actual: b.len(),
            });
        }
        let ss: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        distances.push(libm::sqrt(ss));
    }
    Ok(DriftProfile {
        boundary,
        distances,
    })
}

/// Drift between the full and counterfactual branches at the last prompt
/// position.
pub fn sira_drift(
    model: &ToyModel,
    layout: &PromptLayout,
    boundary: BoundaryConfig,
) -> Result<DriftProfile, AnalysisError> {
    let (session, _) = Session::prefill_capturing(model, layout, boundary)?;
    let st = session.states().expect("capturing session records states");
    layerwise_drift(&st.full_stack(), &st.cf_stack(), st.boundary())
}

fn log_softmax(z: &[f32]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = z.iter().map(|&v| libm::exp(v as f64 - max)).sum();
    let lse = max + libm::log(sum);
    z.iter().map(|&v| v as f64 - lse).collect()
}

/// `KL(softmax(z_full) ‖ softmax(z_ref))`, clamped at zero against rounding.
pub fn next_token_kl(z_full: &[f32], z_ref: &[f32]) -> Result<f64, AnalysisError> {
    if z_full.len() != z_ref.len() {
        return Err(AnalysisError::Shape {
            what: "logit length",
            expected: z_full.len(),
            actual: z_ref.len(),
        });
    }
    if z_full.is_empty() {
        return Err(AnalysisError::Empty("logits"));
    }
    let lp = log_softmax(z_full);
    let lq = log_softmax(z_ref);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| libm::exp(a) * (a - b))
        .sum();
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Counterfactual,
    Shuffle,
    Noise,
}

impl ReferenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Counterfactual => "sira-cf",
            Self::Shuffle => "shuffle",
            Self::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub reference: ReferenceKind,
    /// Always `"full||reference"`.
    pub direction: &'static str,
    pub per_step: Vec<f64>,
    pub mean: f64,
}

/// Per-step KL between paired logit sequences.
pub fn kl_report(
    reference: ReferenceKind,
    full: &[Vec<f32>],
    refs: &[Vec<f32>],
) -> Result<KlReport, AnalysisError> {
    if full.len() != refs.len() {
        return Err(AnalysisError::Shape {
            what: "step count",
            expected: full.len(),
            actual: refs.len(),
        });
    }
    if full.is_empty() {
        return Err(AnalysisError::Empty("steps"));
    }
    let per_step = full
        .iter()
        .zip(refs)
        .map(|(a, b)| next_token_kl(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(KlReport {
        reference,
        direction: "full||reference",
        per_step,
        mean,
    })
}

/// KL between the two branches recorded in a SIRA trace.
pub fn branch_kl(trace: &DecodeTrace) -> Result<KlReport, AnalysisError> {
    let full: Vec<Vec<f32>> = trace.steps.iter().map(|s| s.z_full.clone()).collect();
    let cf: Vec<Vec<f32>> = trace.steps.iter().map(|s| s.z_cf.clone()).collect();
    kl_report(ReferenceKind::Counterfactual, &full, &cf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Permute the tokens at image positions.
    Shuffle,
    /// Add `N(0, std²)` noise to image-position embeddings.
    Noise { std: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedLogits {
    /// One logit vector per step, aligned with the decode trace.
    pub logits: Vec<Vec<f32>>,
    /// Set when the prompt has no image positions; the logits are then the
    /// unperturbed full-model logits.
    pub degenerate: bool,
}

/// Input-space reference: a second full causal pass over a perturbed
/// prompt, teacher-forced along `continuation`.
///
/// Step `t` (0-based) gives the logits after the prompt and
/// `continuation[..t]`, so `continuation` is normally the generated
/// sequence whose steps are being compared.
pub fn perturbation_reference(
    model: &ToyModel,
    layout: &PromptLayout,
    continuation: &[TokenId],
    kind: Perturbation,
    seed: u64,
) -> Result<PerturbedLogits, AnalysisError> {
    if continuation.is_empty() {
        return Err(AnalysisError::Empty("continuation"));
    }
    let images = layout.image_positions();
    let degenerate = images.is_empty();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = match kind {
        Perturbation::Shuffle => {
            let mut tokens = layout.tokens().to_vec();
            let mut picked: Vec<TokenId> = images.iter().map(|&p| tokens[p]).collect();
            picked.shuffle(&mut rng);
            for (&p, t) in images.iter().zip(picked) {
                tokens[p] = t;
            }
            model.embed(&tokens).map_err(EngineError::from)?
        }
        Perturbation::Noise { std } => {
            let mut h = model.embed(layout.tokens()).map_err(EngineError::from)?;
            if std > 0.0 {
                let normal = Normal::new(0.0f32, std).map_err(|_| AnalysisError::Empty("noise std"))?;
                for &p in images {
                    for x in h.row_mut(p) {
                        *x += normal.sample(&mut rng);
                    }
                }
            }
            h
        }
    };
    let logits = causal_teacher_forced(model, hidden, &continuation[..continuation.len() - 1])
        .map_err(AnalysisError::from)?;
    Ok(PerturbedLogits { logits, degenerate })
}

fn causal_teacher_forced(
    model: &ToyModel,
    prompt_hidden: Matrix,
    forced: &[TokenId],
) -> Result<Vec<Vec<f32>>, EngineError> {
    let cfg = model.config();
    let l = cfg.num_layers;
    let s = prompt_hidden.rows();
    if s + forced.len() > cfg.max_seq_len {
        return Err(EngineError::SequenceFull(cfg.max_seq_len));
    }
    let mut cache = LayerCache::new(0..l, cfg.hidden_dim);
    let mut mask = build_causal_mask(s);
    let positions: Vec<usize> = (0..s).collect();
    let h = model.forward_layers(0..l, prompt_hidden, &mut cache, &to_additive(&mask), &positions)?;
    let mut out = Vec::with_capacity(forced.len() + 1);
    out.push(model.project_logits(h.row(s - 1))?);
    for (i, &t) in forced.iter().enumerate() {
        let pos = s + i;
        mask.extend_in_place(pos, &[], MaskVariant::Causal)?;
        let h = model.forward_layers(0..l, model.embed(&[t])?, &mut cache, &rows_to_additive(&mask, pos..pos + 1), &[pos])?;
        out.push(model.project_logits(h.row(0))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub num_layers: usize,
    pub k: usize,
    pub sira_layer_evals: usize,
    pub sira_steps: usize,
    pub baseline_layer_evals: usize,
    pub baseline_steps: usize,
    /// Per-token layer evaluations, SIRA over baseline.
    pub layer_eval_ratio: f64,
    /// Median SIRA step time over median baseline step time; `None` when
    /// the traces carry no timing.
    pub wallclock_ratio: Option<f64>,
}

/// Compares matched SIRA and baseline runs.
pub fn cost_report(
    sira: &[DecodeTrace],
    baseline: &[DecodeTrace],
    num_layers: usize,
    k: usize,
) -> Result<CostReport, AnalysisError> {
    let count = |ts: &[DecodeTrace]| -> (usize, usize) {
        ts.iter()
            .fold((0, 0), |(e, s), t| (e + t.total_layer_evals(), s + t.steps.len()))
    };
    let (se, ss) = count(sira);
    let (be, bs) = count(baseline);
    if ss == 0 || bs == 0 {
        return Err(AnalysisError::Empty("traces"));
    }
    // one rounding: (se / ss) / (be / bs) as a single integer quotient
    let num = se as u128 * bs as u128;
    let den = be as u128 * ss as u128;
    let layer_eval_ratio = num as f64 / den as f64;

    let times = |ts: &[DecodeTrace]| -> Vec<f64> {
        ts.iter()
            .flat_map(|t| t.steps.iter().map(|s| s.step_nanos as f64))
            .collect()
    };
    let ms = median(&times(sira));
    let mb = median(&times(baseline));
    let wallclock_ratio = match (ms, mb) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    Ok(CostReport {
        num_layers,
        k,
        sira_layer_evals: se,
        sira_steps: ss,
        baseline_layer_evals: be,
        baseline_steps: bs,
        layer_eval_ratio,
        wallclock_ratio,
    })
}

/// `(L + K) / L`.
pub fn predicted_ratio(num_layers: usize, k: usize) -> f64 {
    (num_layers + k) as f64 / num_layers as f64
}

/// Median, averaging the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StepRecord;
    use alloc::vec;

    #[test]
    fn kl_hand_value() {
        assert_eq!(next_token_kl(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let ln3 = libm::logf(3.0);
        let kl = next_token_kl(&[0.0, 0.0], &[ln3, 0.0]).unwrap();
        let expected = 0.5 * libm::log(2.0 / 3.0) + 0.5 * libm::log(2.0);
        assert!((kl - expected).abs() < 1e-6);
        assert!((kl - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn drift_by_construction() {
        let a = [vec![1.0f32, 2.0], vec![0.5, -1.0], vec![3.0, 3.0]];
        let mut b = a.clone();
        b[2][1] += 1.0;
        let ar: Vec<&[f32]> = a.iter().map(|v| v.as_slice()).collect();
        let br: Vec<&[f32]> = b.iter().map(|v| v.as_slice()).collect();
        assert_eq!(layerwise_drift(&ar, &ar, 1).unwrap().distances, [0.0; 3]);
        assert_eq!(layerwise_drift(&ar, &br, 1).unwrap().distances, [0.0, 0.0, 1.0]);
        assert!(layerwise_drift(&ar, &br[..2], 1).is_err());
    }

    #[test]
    fn stage_drift_thirds() {
        let p = DriftProfile {
            boundary: 3,
            distances: vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(p.stage_drift(), [0.0, 0.5, 2.5]);
    }

    fn trace(steps: usize, evals: usize) -> DecodeTrace {
        DecodeTrace {
            steps: (0..steps)
                .map(|i| StepRecord {
                    step: i + 1,
                    token: 0,
                    z_full: vec![],
                    z_cf: vec![],
                    delta: vec![],
                    z_cd: vec![],
                    layer_evals: evals,
                    step_nanos: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn cost_ratios() {
        for (l, k, want) in [(28, 14, 1.5), (28, 0, 1.0), (28, 28, 2.0)] {
            let r = cost_report(&[trace(5, l + k)], &[trace(3, l)], l, k).unwrap();
            assert_eq!(r.layer_eval_ratio, want);
            assert_eq!(r.wallclock_ratio, None);
        }
        assert!(cost_report(&[], &[trace(1, 1)], 2, 1).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
