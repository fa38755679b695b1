//! JSONL dataset files, one example per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sira_core::synth::{Example, Gold, Split, Strategy};
use sira_core::TokenId;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldRecord {
    Presence { object: usize, present: bool },
    Caption { objects: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub image_tokens: Vec<TokenId>,
    pub prompt_tokens: Vec<TokenId>,
    pub gold: GoldRecord,
    pub split: String,
    pub strategy: String,
    /// Teacher-forced continuation; training examples only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_tokens: Vec<TokenId>,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        Self {
            image_tokens: e.image_tokens.clone(),
            prompt_tokens: e.prompt_tokens.clone(),
            gold: match &e.gold {
                Gold::Presence { object, present } => GoldRecord::Presence {
                    object: *object,
                    present: *present,
                },
                Gold::Caption { objects } => GoldRecord::Caption {
                    objects: objects.clone(),
                },
            },
            split: match e.split {
                Split::Train => "train",
                Split::Test => "test",
            }
            .into(),
            strategy: e.strategy.name().into(),
            target_tokens: e.target_tokens.clone(),
        }
    }
}

impl ExampleRecord {
    pub fn to_example(&self) -> Result<Example, String> {
        let split = match self.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(format!("unknown split {other:?}")),
        };
        let strategy =
            Strategy::from_name(&self.strategy).ok_or_else(|| format!("unknown strategy {:?}", self.strategy))?;
        Ok(Example {
            image_tokens: self.image_tokens.clone(),
            prompt_tokens: self.prompt_tokens.clone(),
            target_tokens: self.target_tokens.clone(),
            gold: match &self.gold {
                GoldRecord::Presence { object, present } => Gold::Presence {
                    object: *object,
                    present: *present,
                },
                GoldRecord::Caption { objects } => Gold::Caption {
                    objects: objects.clone(),
                },
            },
            split,
            strategy,
        })
    }
}

pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> Result<(), CliError> {
    for e in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<Example>, CliError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| CliError::Parse { line: i + 1, message };
        let rec: ExampleRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(rec.to_example().map_err(parse)?);
    }
    Ok(out)
}
