//! Flat key-value run configuration.
//!
//! Precedence, highest first: command-line flags, `SIRA_SEED` (seed only),
//! the config file, built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sira_core::engine::{BoundaryConfig, ContrastConfig};
use sira_core::ModelConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "SIRA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Weight file; when absent, `init_*` describe a fresh model.
    pub model: Option<PathBuf>,
    pub init_layers: usize,
    pub init_hidden: usize,
    pub init_heads: usize,
    pub init_mlp: usize,
    pub init_max_seq: usize,
    /// Post-boundary depth; `None` means `L/2`.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(serialize_with = "short_f32")]
    pub alpha: f32,
    #[serde(rename = "T")]
    pub max_tokens: usize,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train_steps: usize,
    #[serde(serialize_with = "short_f32")]
    pub lr: f32,
    pub batch_size: usize,
    pub k_list: Vec<usize>,
    #[serde(serialize_with = "short_f32s")]
    pub alpha_list: Vec<f32>,
    /// Decode at most this many test examples (0 = all).
    pub limit: usize,
}

/// Writes an f32 as the f64 with the same shortest decimal form, so `3e-3`
/// does not come back out as `0.003000000026077032`.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn short_f32<S: serde::Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(widen(*v))
}

fn short_f32s<S: serde::Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&x| widen(x)))
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = crate::demo::DemoRecipe::default();
        Self {
            model: None,
            init_layers: d.model.num_layers,
            init_hidden: d.model.hidden_dim,
            init_heads: d.model.num_heads,
            init_mlp: d.model.mlp_dim,
            init_max_seq: d.model.max_seq_len,
            k: None,
            alpha: 0.5,
            max_tokens: 32,
            dataset: None,
            out_dir: PathBuf::from("sira-out"),
            seed: crate::demo::DEMO_SEED,
            train_steps: d.train.steps,
            lr: d.train.lr,
            batch_size: d.train.batch_size,
            k_list: Vec::new(),
            alpha_list: vec![0.0, 0.5, 1.0],
            limit: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [cfg.model.as_mut(), cfg.dataset.as_mut(), Some(&mut cfg.out_dir)].into_iter().flatten() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the seed with `SIRA_SEED` when set.
    pub fn apply_env(&mut self, value: Option<&str>) -> Result<(), CliError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn init_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        ModelConfig::new(
            self.init_layers,
            self.init_hidden,
            self.init_heads,
            self.init_mlp,
            vocab_size,
            self.init_max_seq,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn boundary(&self, num_layers: usize) -> Result<BoundaryConfig, CliError> {
        let b = self.k.map_or(BoundaryConfig::mid(num_layers), BoundaryConfig::new);
        b.validate(num_layers)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(b)
    }

    pub fn contrast(&self) -> Result<ContrastConfig, CliError> {
        let c = ContrastConfig {
            alpha: self.alpha,
            max_tokens: self.max_tokens,
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn require_dataset(&self) -> Result<&Path, CliError> {
        let p = self
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset configured".into()))?;
        existing(p)
    }

    pub fn require_model(&self) -> Result<&Path, CliError> {
        let p = self
            .model
            .as_deref()
            .ok_or_else(|| CliError::Config("no model configured".into()))?;
        existing(p)
    }
}

fn existing(p: &Path) -> Result<&Path, CliError> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Config(format!("{} does not exist", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let c = RunConfig {
            k: Some(3),
            seed: 9,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn floats_keep_short_form() {
        let text = RunConfig { lr: 3e-3, alpha_list: vec![0.3], ..RunConfig::default() }.to_toml();
        assert!(text.contains("lr = 0.003\n"), "{text}");
        assert!(text.contains("alpha_list = [0.3]"), "{text}");
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = std::env::temp_dir().join(format!("sira-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "model = \"m.bin\"\ndataset = \"/abs/d.jsonl\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.model.unwrap(), dir.join("m.bin"));
        assert_eq!(c.dataset.unwrap(), PathBuf::from("/abs/d.jsonl"));
        assert_eq!(c.out_dir, dir.join("sira-out"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(CliError::Config(_))));
    }

    #[test]
    fn env_seed_override() {
        let mut c = RunConfig::from_toml("seed = 4").unwrap();
        c.apply_env(Some("17")).unwrap();
        assert_eq!(c.seed, 17);
        assert!(c.apply_env(Some("x")).is_err());
    }

    #[test]
    fn boundary_validation() {
        let c = RunConfig { k: Some(9), ..RunConfig::default() };
        assert!(c.boundary(8).is_err());
        let c = RunConfig { alpha: -1.0, ..RunConfig::default() };
        assert!(c.contrast().is_err());
    }
}
