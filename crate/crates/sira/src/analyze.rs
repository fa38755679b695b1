//! Offline diagnostics over saved traces.
//!
//! A trace file alone yields the KL between its own two branches and,
//! when states were captured, the full-vs-cf drift at the first step.
//! With a second file, runs are paired by index: the KL and drift of the
//! first file's full branch against the second's, and a cost report
//! treating the first file as SIRA and the second as baseline.

use serde::{Deserialize, Serialize};
use sira_core::analysis::{cost_report, kl_report, layerwise_drift, median, next_token_kl, ReferenceKind};
use sira_core::engine::{DecodeTrace, StepRecord};

use crate::error::CliError;
use crate::report::{CostDoc, DriftDoc, KlDoc};
use crate::trace::TraceRun;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub index: usize,
    /// `KL(z_full ‖ z_cf)` within the run.
    pub branch_kl: KlDoc,
    /// First-step per-layer distance between the run's branches.
    pub branch_drift: Option<DriftDoc>,
    /// `KL(z_full ‖ other z_full)` over the common steps.
    pub against_kl: Option<Vec<f64>>,
    pub against_drift: Option<DriftDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDoc {
    pub runs: Vec<RunAnalysis>,
    pub median_branch_kl: f64,
    pub median_against_kl: Option<f64>,
    /// Per-layer mean of whichever drift profiles are available, the
    /// paired ones taking precedence.
    pub mean_drift: Option<Vec<f64>>,
    pub cost: Option<CostDoc>,
}

fn to_decode_trace(run: &TraceRun) -> DecodeTrace {
    DecodeTrace {
        steps: run
            .steps
            .iter()
            .map(|s| StepRecord {
                step: s.step,
                token: s.chosen_token,
                z_full: s.z_full.clone(),
                z_cf: s.z_cf.clone(),
                delta: Vec::new(),
                z_cd: Vec::new(),
                layer_evals: s.layer_evals,
                step_nanos: s.step_ms.map_or(0, |ms| (ms * 1e6).round() as u64),
            })
            .collect(),
    }
}

/// Per-layer (full, cf) states of a run's first step.
type StateStacks<'a> = (Vec<&'a [f32]>, Vec<&'a [f32]>);

fn first_states(run: &TraceRun) -> Option<StateStacks<'_>> {
    let s = run.steps.first()?;
    let full = s.states_full.as_ref()?.iter().map(Vec::as_slice).collect();
    let cf = s.states_cf.as_ref()?.iter().map(Vec::as_slice).collect();
    Some((full, cf))
}

fn mean_columns(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    Some(acc.into_iter().map(|v| v / rows.len() as f64).collect())
}

pub fn analyze(runs: &[TraceRun], against: Option<&[TraceRun]>) -> Result<AnalysisDoc, CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("trace file contains no runs".into()));
    }
    if let Some(other) = against {
        if other.len() != runs.len() {
            return Err(CliError::Config(format!(
                "run count mismatch: {} vs {}",
                runs.len(),
                other.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let boundary = run.header.L.saturating_sub(run.header.K);
        let full: Vec<Vec<f32>> = run.steps.iter().map(|s| s.z_full.clone()).collect();
        let cf: Vec<Vec<f32>> = run.steps.iter().map(|s| s.z_cf.clone()).collect();
        let branch_kl = KlDoc::from(&kl_report(ReferenceKind::Counterfactual, &full, &cf)?);
        let states = first_states(run);
        let branch_drift = match &states {
            Some((f, c)) => Some(DriftDoc::from(&layerwise_drift(f, c, boundary)?)),
            None => None,
        };
        let (mut against_kl, mut against_drift) = (None, None);
        if let Some(other) = against.map(|o| &o[i]) {
            let kls = run
                .steps
                .iter()
                .zip(&other.steps)
                .map(|(a, b)| next_token_kl(&a.z_full, &b.z_full))
                .collect::<Result<Vec<_>, _>>()?;
            against_kl = Some(kls);
            if let (Some((f, _)), Some((g, _))) = (&states, first_states(other)) {
                against_drift = Some(DriftDoc::from(&layerwise_drift(f, &g, boundary)?));
            }
        }
        out.push(RunAnalysis {
            index: i,
            branch_kl,
            branch_drift,
            against_kl,
            against_drift,
        });
    }
    let branch_means: Vec<f64> = out.iter().map(|r| r.branch_kl.mean).collect();
    let against_all: Vec<f64> = out.iter().flat_map(|r| r.against_kl.iter().flatten().copied()).collect();
    let paired: Vec<&[f64]> = out
        .iter()
        .filter_map(|r| r.against_drift.as_ref().map(|d| d.distances.as_slice()))
        .collect();
    let own: Vec<&[f64]> = out
        .iter()
        .filter_map(|r| r.branch_drift.as_ref().map(|d| d.distances.as_slice()))
        .collect();
    let cost = match against {
        Some(other) => {
            let sira: Vec<DecodeTrace> = runs.iter().map(to_decode_trace).collect();
            let base: Vec<DecodeTrace> = other.iter().map(to_decode_trace).collect();
            let h = &runs[0].header;
            Some(CostDoc::from(&cost_report(&sira, &base, h.L, h.K)?))
        }
        None => None,
    };
    Ok(AnalysisDoc {
        median_branch_kl: median(&branch_means).unwrap_or(0.0),
        median_against_kl: against.map(|_| median(&against_all).unwrap_or(0.0)),
        mean_drift: if paired.is_empty() { mean_columns(&own) } else { mean_columns(&paired) },
        runs: out,
        cost,
    })
}
