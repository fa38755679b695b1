//! The seeded demo model: planted-prior dataset, model shape and training
//! schedule, plus an on-disk cache keyed by the recipe.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sira_core::synth::{gen_dataset, train_toy_with, Dataset, SceneSpec, TrainConfig};
use sira_core::{init_model, ModelConfig, ToyModel};

use crate::error::CliError;
use crate::format::{load_model, save_model};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecipe {
    pub spec: SceneSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    /// Presence questions in the test split.
    pub test_questions: usize,
}

/// Seed of the shipped demo.
pub const DEMO_SEED: u64 = 0;

impl Default for DemoRecipe {
    fn default() -> Self {
        Self::seeded(DEMO_SEED)
    }
}

impl DemoRecipe {
    /// The demo recipe with dataset, initialisation and batch order all
    /// drawn from `seed`.
    ///
    /// Two layers: the scene-type prior is one attention hop from the
    /// question and lands in the shared layer, while reading a glyph's
    /// state takes two hops and so happens after the mid split.
    pub fn seeded(seed: u64) -> Self {
        let spec = SceneSpec {
            annotation_follow: 0.85,
            text_only_fraction: 0.15,
            seed,
            ..SceneSpec::default()
        };
        let model = ModelConfig::new(2, 32, 4, 64, spec.vocab().size(), 64).expect("valid demo shape");
        Self {
            spec,
            model,
            model_seed: seed,
            train: TrainConfig {
                steps: 6000,
                seed,
                ..TrainConfig::default()
            },
            test_questions: 400,
        }
    }

    /// Stable fingerprint of every recipe field.
    pub fn fingerprint(&self) -> String {
        let text = format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(gen_dataset(&self.spec, self.test_questions)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub losses: Vec<f32>,
}

pub struct Demo {
    pub recipe: DemoRecipe,
    pub model: ToyModel,
    pub dataset: Dataset,
    pub summary: TrainSummary,
}

/// Trains the recipe from scratch; `progress` sees `(step, batch_loss)`.
pub fn build(recipe: &DemoRecipe, progress: &mut dyn FnMut(usize, f32)) -> Result<Demo, CliError> {
    let dataset = recipe.dataset()?;
    let mut model = init_model(recipe.model, recipe.model_seed)?;
    let report = train_toy_with(&mut model, &dataset.train, &recipe.train, progress)?;
    Ok(Demo {
        recipe: recipe.clone(),
        model,
        dataset,
        summary: TrainSummary {
            steps: recipe.train.steps,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            losses: report.losses,
        },
    })
}

pub fn cache_path(cache_dir: &Path, recipe: &DemoRecipe) -> PathBuf {
    cache_dir.join(format!("demo-{}", recipe.fingerprint()))
}

/// Loads the trained demo from `cache_dir`, training and storing it first
/// if no entry for this exact recipe exists.
pub fn load_or_build(
    recipe: &DemoRecipe,
    cache_dir: &Path,
    progress: &mut dyn FnMut(usize, f32),
) -> Result<Demo, CliError> {
    let dir = cache_path(cache_dir, recipe);
    let model_path = dir.join("model.bin");
    let summary_path = dir.join("train.json");
    if model_path.exists() && summary_path.exists() {
        let model = load_model(&model_path)?;
        let summary = serde_json::from_slice(&fs::read(&summary_path)?)?;
        return Ok(Demo {
            recipe: recipe.clone(),
            model,
            dataset: recipe.dataset()?,
            summary,
        });
    }
    let demo = build(recipe, progress)?;
    fs::create_dir_all(&dir)?;
    // write under temporary names so an interrupted run leaves no entry
    let tmp_model = dir.join("model.bin.tmp");
    let tmp_summary = dir.join("train.json.tmp");
    save_model(&demo.model, &tmp_model)?;
    fs::write(&tmp_summary, serde_json::to_vec(&demo.summary)?)?;
    fs::rename(tmp_model, model_path)?;
    fs::rename(tmp_summary, summary_path)?;
    Ok(demo)
}
