use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadType {
    /// Next-token head over the full vocabulary.
    Lm,
    /// Three-way affine head on the EOS hidden state.
    Classification,
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadType::Lm => "lm",
            HeadType::Classification => "classification",
        })
    }
}

impl FromStr for HeadType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lm" => Ok(HeadType::Lm),
            "classification" | "cls" => Ok(HeadType::Classification),
            other => Err(format!("unknown head type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }
}

impl fmt::Display for FloatWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FloatWidth::F32 => "32",
            FloatWidth::F64 => "64",
        })
    }
}

impl FromStr for FloatWidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "32" => Ok(FloatWidth::F32),
            "64" => Ok(FloatWidth::F64),
            other => Err(format!("float width must be 32 or 64, got {other:?}")),
        }
    }
}

/// Hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub head_type: HeadType,
    pub float_width: FloatWidth,
    pub init_seed: u64,
    /// Reuse the token embedding as the LM output projection.
    pub tie_embeddings: bool,
    /// Restart position ids at every packed segment.
    pub segment_local_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            head_type: HeadType::Lm,
            float_width: FloatWidth::F32,
            init_seed: 0,
            tie_embeddings: false,
            segment_local_positions: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` pairs without a section prefix, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("head_type", self.head_type.to_string()),
            ("float_width", self.float_width.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            (
                "segment_local_positions",
                self.segment_local_positions.to_string(),
            ),
        ]
    }

    /// Reads the keys produced by [`ModelConfig::to_pairs`]; missing keys keep
    /// the values already in `self`.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), ModelError> {
        fn parse<V: FromStr>(key: &str, v: &str) -> Result<V, ModelError> {
            v.parse()
                .map_err(|_| ModelError::InvalidConfig(format!("bad value {v:?} for {key}")))
        }
        for (k, v) in pairs {
            match k.as_str() {
                "vocab_size" => self.vocab_size = parse(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "n_layers" => self.n_layers = parse(k, v)?,
                "n_heads" => self.n_heads = parse(k, v)?,
                "d_ff" => self.d_ff = parse(k, v)?,
                "max_seq_len" => self.max_seq_len = parse(k, v)?,
                "head_type" => self.head_type = v.parse().map_err(ModelError::InvalidConfig)?,
                "float_width" => self.float_width = v.parse().map_err(ModelError::InvalidConfig)?,
                "init_seed" => self.init_seed = parse(k, v)?,
                "tie_embeddings" => self.tie_embeddings = parse(k, v)?,
                "segment_local_positions" => self.segment_local_positions = parse(k, v)?,
                other => {
                    return Err(ModelError::InvalidConfig(format!(
                        "unknown model key {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}
