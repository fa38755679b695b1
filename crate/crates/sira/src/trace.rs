//! JSONL decode traces.
//!
//! A trace file is a sequence of runs; each run is a header line followed
//! by one line per decoding step.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sira_core::engine::{BranchStates, DecodeTrace, StepRecord};
use sira_core::TokenId;

use crate::error::CliError;

/// Entries kept in each `*_top8` list.
pub const TOP_N: usize = 8;

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    /// FNV-1a weight checksum, hex.
    pub model_checksum: String,
    pub S: usize,
    pub P_img: Vec<usize>,
    pub L: usize,
    pub K: usize,
    pub alpha: f32,
    pub T: usize,
    pub seed: u64,
    /// `"sira"` or `"baseline"`.
    pub decoder: String,
    pub prompt: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLine {
    pub step: usize,
    pub chosen_token: TokenId,
    pub z_full_top8: Vec<(TokenId, f32)>,
    pub z_cf_top8: Vec<(TokenId, f32)>,
    pub z_cd_top8: Vec<(TokenId, f32)>,
    pub delta_top8: Vec<(TokenId, f32)>,
    pub layer_evals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ms: Option<f64>,
    /// Complete logit vectors, kept so KL can be recomputed offline.
    pub z_full: Vec<f32>,
    pub z_cf: Vec<f32>,
    /// Per-layer last-position hidden states, when captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states_full: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states_cf: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRun {
    pub header: TraceHeader,
    pub steps: Vec<StepLine>,
}

impl TraceRun {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.chosen_token).collect()
    }

    pub fn has_states(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.states_full.is_some() && s.states_cf.is_some())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Header(TraceHeader),
    Step(Box<StepLine>),
}

/// Token ids of the `n` largest fused logits, ties toward the lower id.
pub fn top_ids(z_cd: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z_cd.len()).collect();
    idx.sort_by(|&a, &b| z_cd[b].total_cmp(&z_cd[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

impl StepLine {
    pub fn from_record(r: &StepRecord, timing: bool, states: Option<&BranchStates>) -> Self {
        let ids = top_ids(&r.z_cd, TOP_N);
        let pick = |z: &[f32]| ids.iter().map(|&i| (i as TokenId, z[i])).collect::<Vec<_>>();
        let owned = |v: Vec<&[f32]>| v.into_iter().map(<[f32]>::to_vec).collect::<Vec<_>>();
        Self {
            step: r.step,
            chosen_token: r.token,
            z_full_top8: pick(&r.z_full),
            z_cf_top8: pick(&r.z_cf),
            z_cd_top8: pick(&r.z_cd),
            delta_top8: pick(&r.delta),
            layer_evals: r.layer_evals,
            step_ms: timing.then(|| r.step_nanos as f64 / 1e6),
            z_full: r.z_full.clone(),
            z_cf: r.z_cf.clone(),
            states_full: states.map(|s| owned(s.full_stack())),
            states_cf: states.map(|s| owned(s.cf_stack())),
        }
    }
}

impl TraceRun {
    /// Builds a run from an engine trace; `states`, if given, must hold
    /// one entry per step.
    pub fn from_trace(header: TraceHeader, trace: &DecodeTrace, timing: bool, states: Option<&[BranchStates]>) -> Self {
        let steps = trace
            .steps
            .iter()
            .enumerate()
            .map(|(i, r)| StepLine::from_record(r, timing, states.map(|s| &s[i])))
            .collect();
        Self { header, steps }
    }
}

pub fn write_runs<W: Write>(mut w: W, runs: &[TraceRun]) -> Result<(), CliError> {
    for run in runs {
        serde_json::to_writer(&mut w, &run.header)?;
        w.write_all(b"\n")?;
        for s in &run.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a trace file; errors carry the 1-based line number.
pub fn read_runs<R: BufRead>(r: R) -> Result<Vec<TraceRun>, CliError> {
    let mut runs: Vec<TraceRun> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| CliError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match parsed {
            Line::Header(header) => runs.push(TraceRun { header, steps: Vec::new() }),
            Line::Step(step) => match runs.last_mut() {
                Some(run) => run.steps.push(*step),
                None => {
                    return Err(CliError::Parse {
                        line: lineno,
                        message: "step line before any header".into(),
                    })
                }
            },
        }
    }
    Ok(runs)
}
