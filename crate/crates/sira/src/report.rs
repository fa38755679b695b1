//! Serializable report documents and CSV writers.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sira_core::analysis::{CostReport, DriftProfile, KlReport};
use sira_core::synth::{Decoder, HallucinationMetrics};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub questions: usize,
    pub accuracy: f64,
    pub yes_rate: f64,
    pub halluc_rate: f64,
    pub halluc_rate_bias: f64,
    pub halluc_rate_random: f64,
    pub grounded_recall: f64,
    pub captions: usize,
    pub caption_halluc_rate: f64,
    pub caption_recall: f64,
}

impl From<&HallucinationMetrics> for Metrics {
    fn from(m: &HallucinationMetrics) -> Self {
        Self {
            questions: m.questions,
            accuracy: m.accuracy,
            yes_rate: m.yes_rate,
            halluc_rate: m.halluc_rate,
            halluc_rate_bias: m.halluc_rate_bias,
            halluc_rate_random: m.halluc_rate_random,
            grounded_recall: m.grounded_recall,
            captions: m.captions,
            caption_halluc_rate: m.caption_halluc_rate,
            caption_recall: m.caption_recall,
        }
    }
}

/// One metrics document per (model, decoder, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub model_checksum: String,
    pub decoder: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub alpha: Option<f32>,
    pub split: String,
    pub metrics: Metrics,
}

impl MetricsDoc {
    pub fn new(checksum: u64, decoder: Decoder, m: &HallucinationMetrics) -> Self {
        let (name, k, alpha) = match decoder {
            Decoder::Baseline => ("baseline", None, None),
            Decoder::Sira { alpha, k } => ("sira", Some(k), Some(alpha)),
        };
        Self {
            model_checksum: checksum_hex(checksum),
            decoder: name.into(),
            k,
            alpha,
            split: "test".into(),
            metrics: m.into(),
        }
    }
}

pub fn checksum_hex(c: u64) -> String {
    format!("{c:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub decoder: String,
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f32,
    pub accuracy: f64,
    pub yes_rate: f64,
    pub halluc_rate: f64,
    pub halluc_rate_bias: f64,
    pub halluc_rate_random: f64,
    pub grounded_recall: f64,
    pub caption_halluc_rate: f64,
    pub caption_recall: f64,
}

impl SweepRow {
    pub fn new(decoder: Decoder, num_layers: usize, m: &HallucinationMetrics) -> Self {
        let (name, k, alpha) = match decoder {
            Decoder::Baseline => ("baseline", 0, 0.0),
            Decoder::Sira { alpha, k } => ("sira", k, alpha),
        };
        Self {
            decoder: name.into(),
            b: num_layers - k,
            k,
            alpha,
            accuracy: m.accuracy,
            yes_rate: m.yes_rate,
            halluc_rate: m.halluc_rate,
            halluc_rate_bias: m.halluc_rate_bias,
            halluc_rate_random: m.halluc_rate_random,
            grounded_recall: m.grounded_recall,
            caption_halluc_rate: m.caption_halluc_rate,
            caption_recall: m.caption_recall,
        }
    }

    /// Metric columns only, for comparing cells.
    pub fn metrics(&self) -> [f64; 8] {
        [
            self.accuracy,
            self.yes_rate,
            self.halluc_rate,
            self.halluc_rate_bias,
            self.halluc_rate_random,
            self.grounded_recall,
            self.caption_halluc_rate,
            self.caption_recall,
        ]
    }
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>, CliError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDoc {
    pub boundary: usize,
    pub distances: Vec<f64>,
    pub stage_drift: [f64; 3],
}

impl From<&DriftProfile> for DriftDoc {
    fn from(d: &DriftProfile) -> Self {
        Self {
            boundary: d.boundary,
            distances: d.distances.clone(),
            stage_drift: d.stage_drift(),
        }
    }
}

/// `layer,distance` rows.
pub fn write_drift_csv<W: Write>(w: W, distances: &[f64]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "distance"])?;
    for (l, d) in distances.iter().enumerate() {
        out.write_record([l.to_string(), d.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlDoc {
    pub reference: String,
    pub direction: String,
    pub per_step: Vec<f64>,
    pub mean: f64,
}

impl From<&KlReport> for KlDoc {
    fn from(k: &KlReport) -> Self {
        Self {
            reference: k.reference.name().into(),
            direction: k.direction.into(),
            per_step: k.per_step.clone(),
            mean: k.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDoc {
    pub num_layers: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sira_layer_evals: usize,
    pub sira_steps: usize,
    pub baseline_layer_evals: usize,
    pub baseline_steps: usize,
    pub layer_eval_ratio: f64,
    pub predicted_ratio: f64,
    pub wallclock_ratio: Option<f64>,
}

impl From<&CostReport> for CostDoc {
    fn from(c: &CostReport) -> Self {
        Self {
            num_layers: c.num_layers,
            k: c.k,
            sira_layer_evals: c.sira_layer_evals,
            sira_steps: c.sira_steps,
            baseline_layer_evals: c.baseline_layer_evals,
            baseline_steps: c.baseline_steps,
            layer_eval_ratio: c.layer_eval_ratio,
            predicted_ratio: sira_core::analysis::predicted_ratio(c.num_layers, c.k),
            wallclock_ratio: c.wallclock_ratio,
        }
    }
}
