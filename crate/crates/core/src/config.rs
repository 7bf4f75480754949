//! Flat `key = value` run configuration with `toy` and `paper` presets.
//!
//! ```text
//! preset = toy
//! split.seed = 42
//! model.d_model = 128
//! train.lr_start = 0.003
//! prompt.template = path/to/template.txt
//! ```
//!
//! `#` starts a comment line. A `preset` line, if present, is applied before
//! every other key regardless of its position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::dataset::SplitSpec;
use crate::model::{FloatWidth, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(ConfigError(format!(
                "unknown preset {other:?} (expected toy or paper)"
            ))),
        }
    }
}

/// Parameter count above which `train` refuses to run.
pub const MAX_TRAINABLE_PARAMETERS: usize = 200_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub split: SplitSpec,
    /// `vocab_size` is the BPE target; training uses the trained size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Prompt template file; the built-in template when `None`.
    pub template: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self {
                preset,
                split: SplitSpec::default(),
                model: ModelConfig::default(),
                train: TrainConfig::toy(),
                template: None,
            },
            // 7B-shaped architecture with the published fine-tuning recipe.
            Preset::Paper => Self {
                preset,
                split: SplitSpec::default(),
                model: ModelConfig {
                    vocab_size: 32000,
                    d_model: 4096,
                    n_layers: 32,
                    n_heads: 32,
                    d_ff: 11008,
                    max_seq_len: 1024,
                    float_width: FloatWidth::F32,
                    ..ModelConfig::default()
                },
                train: TrainConfig::paper(),
                template: None,
            },
        }
    }

    /// Parses a config file on top of its preset (toy when absent).
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Toy,
        };
        let mut cfg = Self::preset(preset);
        cfg.apply(pairs.into_iter().filter(|(k, _)| k != "preset"))?;
        Ok(cfg)
    }

    /// Applies `section.key = value` pairs in order.
    pub fn apply(
        &mut self,
        pairs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        let mut model = BTreeMap::new();
        let mut train = BTreeMap::new();
        for (key, value) in pairs {
            let bad = || ConfigError(format!("bad value {value:?} for {key}"));
            match key.split_once('.') {
                Some(("split", "seed")) => self.split.seed = value.parse().map_err(|_| bad())?,
                Some(("split", "test_fraction")) => {
                    self.split.test_fraction = value.parse().map_err(|_| bad())?
                }
                Some(("split", "val_fraction_of_rest")) => {
                    self.split.val_fraction_of_rest = value.parse().map_err(|_| bad())?
                }
                Some(("model", k)) => {
                    model.insert(k.to_owned(), value);
                }
                Some(("train", k)) => {
                    train.insert(k.to_owned(), value);
                }
                Some(("prompt", "template")) => {
                    self.template = (!value.is_empty()).then(|| PathBuf::from(value));
                }
                _ if key == "preset" => {
                    return Err(ConfigError(
                        "preset can only be set in a config file".into(),
                    ));
                }
                _ => return Err(ConfigError(format!("unknown key {key:?}"))),
            }
        }
        self.model
            .apply_pairs(&model)
            .map_err(|e| ConfigError(e.to_string()))?;
        self.train
            .apply_pairs(&train)
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    /// `key=value` override strings as given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        let pairs = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                    .ok_or_else(|| ConfigError(format!("override {o:?} is not key=value")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.apply(pairs)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.split
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.train.max_seq_len > self.model.max_seq_len {
            return Err(ConfigError(format!(
                "train.max_seq_len {} exceeds model.max_seq_len {}",
                self.train.max_seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Rough parameter count of the configured model.
    pub fn estimated_parameters(&self) -> usize {
        let m = &self.model;
        let d = m.d_model;
        let per_layer = 4 * d * d + 2 * d * m.d_ff + 9 * d + m.d_ff;
        let head = if m.tie_embeddings {
            0
        } else {
            d * m.vocab_size
        };
        m.vocab_size * d + m.max_seq_len * d + m.n_layers * per_layer + 2 * d + head
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset.as_str());
        let _ = writeln!(s, "split.seed = {}", self.split.seed);
        let _ = writeln!(s, "split.test_fraction = {:?}", self.split.test_fraction);
        let _ = writeln!(
            s,
            "split.val_fraction_of_rest = {:?}",
            self.split.val_fraction_of_rest
        );
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "model.{k} = {v}");
        }
        for (k, v) in self.train.to_pairs() {
            let _ = writeln!(s, "train.{k} = {v}");
        }
        let template = self
            .template
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = writeln!(s, "prompt.template = {template}");
        s
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}
