//! `FSNT` checkpoint container.
//!
//! ```text
//! magic       4 bytes  "FSNT"
//! version     u32 LE   (1)
//! config_len  u32 LE
//! config      config_len bytes of UTF-8 `key=value\n` lines
//! n_tensors   u32 LE
//! per tensor:
//!   name_len  u32 LE, name bytes (UTF-8)
//!   rank      u32 LE, rank x u64 LE dims
//!   data      prod(dims) little-endian floats, row-major,
//!             4 or 8 bytes each per `float_width`
//! ```
//!
//! Optimizer moments are stored as extra tensors named `optim.m.<param>` and
//! `optim.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{FloatWidth, ModelConfig};
use super::float::Float;
use super::params::{Params, Tensor};
use super::{Model, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW moments and the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub step: u64,
    pub val_accuracy: Option<f64>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            val_accuracy: None,
        }
    }

    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        Ok(Self::new(Model::init(config)?))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta: Vec<(String, String)> = self
            .model
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        meta.push(("step".into(), self.step.to_string()));
        if let Some(acc) = self.val_accuracy {
            meta.push(("val_accuracy".into(), format!("{acc:?}")));
        }
        if let Some(opt) = &self.optimizer {
            meta.push(("optimizer_step".into(), opt.step.to_string()));
        }
        let config: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut tensors: Vec<(String, &Tensor<T>)> = self.model.params.tensors();
        if let Some(opt) = &self.optimizer {
            tensors.extend(
                opt.m
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("optim.m.{n}"), t)),
            );
            tensors.extend(
                opt.v
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("optim.v.{n}"), t)),
            );
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                x.put_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (meta, tensors) = parse_container(bytes, T::WIDTH)?;
        let mut config = ModelConfig::default();
        let mut model_pairs = BTreeMap::new();
        let mut step = 0;
        let mut val_accuracy = None;
        let mut optimizer_step = None;
        for (k, v) in meta {
            let bad = || ModelError::Format(format!("bad value {v:?} for {k}"));
            match k.as_str() {
                "step" => step = v.parse().map_err(|_| bad())?,
                "val_accuracy" => val_accuracy = Some(v.parse().map_err(|_| bad())?),
                "optimizer_step" => optimizer_step = Some(v.parse().map_err(|_| bad())?),
                _ => {
                    model_pairs.insert(k, v);
                }
            }
        }
        config.apply_pairs(&model_pairs)?;
        config.validate()?;
        if config.float_width != T::WIDTH {
            return Err(ModelError::WidthMismatch {
                expected: T::WIDTH,
                found: config.float_width,
            });
        }

        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                m.insert(rest.to_owned(), t);
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                v.insert(rest.to_owned(), t);
            } else {
                params.insert(name, t);
            }
        }
        let params = Params::from_named(&config, params)?;
        let optimizer = match optimizer_step {
            Some(s) => Some(OptimizerState {
                step: s,
                m: Params::from_named(&config, m)?,
                v: Params::from_named(&config, v)?,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(ModelError::Format(
                    "optimizer tensors without optimizer_step".into(),
                ))
            }
        };
        if !params.all_finite() {
            return Err(ModelError::Format("non-finite parameter".into()));
        }
        Ok(Self {
            model: Model { config, params },
            optimizer,
            step,
            val_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String, ModelError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Format("invalid UTF-8".into()))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Vec<(String, String)>, ModelError> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .ok_or_else(|| ModelError::Format(format!("bad config line {l:?}")))
        })
        .collect()
}

/// Header key/value pairs and named tensors.
type Container<T> = (Vec<(String, String)>, Vec<(String, Tensor<T>)>);

fn parse_container<T: Float>(bytes: &[u8], width: FloatWidth) -> Result<Container<T>, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    let meta = read_header(&mut r)?;
    let stored: Option<FloatWidth> = meta
        .iter()
        .find(|(k, _)| k == "float_width")
        .and_then(|(_, v)| v.parse().ok());
    if let Some(stored) = stored {
        if stored != width {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: stored,
            });
        }
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width.bytes())?;
        let data = raw.chunks_exact(width.bytes()).map(T::get_le).collect();
        tensors.push((name, Tensor { shape, data }));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Format(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok((meta, tensors))
}

/// A checkpoint at whichever float width it was stored with.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let meta = read_header(&mut Reader { bytes, pos: 0 })?;
        let width = meta
            .iter()
            .find(|(k, _)| k == "float_width")
            .and_then(|(_, v)| v.parse::<FloatWidth>().ok())
            .ok_or_else(|| ModelError::Format("missing float_width".into()))?;
        match width {
            FloatWidth::F32 => Checkpoint::from_bytes(bytes).map(AnyCheckpoint::F32),
            FloatWidth::F64 => Checkpoint::from_bytes(bytes).map(AnyCheckpoint::F64),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => c.config(),
            AnyCheckpoint::F64(c) => c.config(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyCheckpoint::F32(c) => c.to_bytes(),
            AnyCheckpoint::F64(c) => c.to_bytes(),
        }
    }
}
