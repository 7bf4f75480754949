use std::collections::BTreeMap;

use super::config::{HeadType, ModelConfig};
use super::float::Float;
use super::ModelError;
use crate::rng::SplitMix64;

/// Standard deviation of the initial weight draws.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All learned tensors. Linear weights are stored `[in, out]` row-major so a
/// layer computes `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    /// `[d_model, vocab]`, absent when embeddings are tied.
    pub lm_head: Option<Tensor<T>>,
    pub cls_weight: Option<Tensor<T>>,
    pub cls_bias: Option<Tensor<T>>,
}

impl<T: Float> Params<T> {
    /// Zero tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |s: &[usize]| Tensor::zeros(s);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: z(&[d]),
                ln1_bias: z(&[d]),
                wq: z(&[d, d]),
                bq: z(&[d]),
                wk: z(&[d, d]),
                bk: z(&[d]),
                wv: z(&[d, d]),
                bv: z(&[d]),
                wo: z(&[d, d]),
                bo: z(&[d]),
                ln2_gain: z(&[d]),
                ln2_bias: z(&[d]),
                w1: z(&[d, cfg.d_ff]),
                b1: z(&[cfg.d_ff]),
                w2: z(&[cfg.d_ff, d]),
                b2: z(&[d]),
            })
            .collect();
        let lm = cfg.head_type == HeadType::Lm;
        let cls = cfg.head_type == HeadType::Classification;
        Self {
            tok_emb: z(&[cfg.vocab_size, d]),
            pos_emb: z(&[cfg.max_seq_len, d]),
            layers,
            lnf_gain: z(&[d]),
            lnf_bias: z(&[d]),
            lm_head: (lm && !cfg.tie_embeddings).then(|| z(&[d, cfg.vocab_size])),
            cls_weight: cls.then(|| z(&[d, 3])),
            cls_bias: cls.then(|| z(&[3])),
        }
    }

    /// Weights drawn from `N(0, 0.02^2)` in [`Params::tensors`] order from a
    /// single SplitMix64 stream seeded with `init_seed`; the residual output
    /// projections (`wo`, `w2`) are further scaled by `1/sqrt(2 n_layers)`.
    /// Norm gains start at 1, biases at 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = SplitMix64::new(cfg.init_seed);
        let resid_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        for (name, t) in p.tensors_mut() {
            if name.ends_with("gain") {
                t.data.fill(T::one());
            } else if t.rank() == 2 {
                let std = if name.ends_with(".wo") || name.ends_with(".w2") {
                    INIT_STD * resid_scale
                } else {
                    INIT_STD
                };
                for x in t.data.iter_mut() {
                    *x = T::of(rng.next_normal() * std);
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Named tensors in a fixed order (the checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_owned(), &self.tok_emb),
            ("pos_emb".to_owned(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let parts: [(&str, &Tensor<T>); 16] = [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("ff.w1", &l.w1),
                ("ff.b1", &l.b1),
                ("ff.w2", &l.w2),
                ("ff.b2", &l.b2),
            ];
            out.extend(
                parts
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gain".to_owned(), &self.lnf_gain));
        out.push(("ln_f.bias".to_owned(), &self.lnf_bias));
        if let Some(t) = &self.lm_head {
            out.push(("lm_head.weight".to_owned(), t));
        }
        if let Some(t) = &self.cls_weight {
            out.push(("cls_head.weight".to_owned(), t));
        }
        if let Some(t) = &self.cls_bias {
            out.push(("cls_head.bias".to_owned(), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_owned(), &mut self.tok_emb),
            ("pos_emb".to_owned(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let parts: [(&str, &mut Tensor<T>); 16] = [
                ("ln1.gain", &mut l.ln1_gain),
                ("ln1.bias", &mut l.ln1_bias),
                ("attn.wq", &mut l.wq),
                ("attn.bq", &mut l.bq),
                ("attn.wk", &mut l.wk),
                ("attn.bk", &mut l.bk),
                ("attn.wv", &mut l.wv),
                ("attn.bv", &mut l.bv),
                ("attn.wo", &mut l.wo),
                ("attn.bo", &mut l.bo),
                ("ln2.gain", &mut l.ln2_gain),
                ("ln2.bias", &mut l.ln2_bias),
                ("ff.w1", &mut l.w1),
                ("ff.b1", &mut l.b1),
                ("ff.w2", &mut l.w2),
                ("ff.b2", &mut l.b2),
            ];
            out.extend(
                parts
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gain".to_owned(), &mut self.lnf_gain));
        out.push(("ln_f.bias".to_owned(), &mut self.lnf_bias));
        if let Some(t) = &mut self.lm_head {
            out.push(("lm_head.weight".to_owned(), t));
        }
        if let Some(t) = &mut self.cls_weight {
            out.push(("cls_head.weight".to_owned(), t));
        }
        if let Some(t) = &mut self.cls_bias {
            out.push(("cls_head.bias".to_owned(), t));
        }
        out
    }

    /// Rebuilds parameters for `cfg` from a name-to-tensor map, checking that
    /// the names and shapes match exactly.
    pub fn from_named(
        cfg: &ModelConfig,
        mut named: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let mut p = Self::zeros(cfg);
        for (name, slot) in p.tensors_mut() {
            let t = named
                .remove(&name)
                .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
            if t.shape != slot.shape {
                return Err(ModelError::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(ModelError::Format(format!("unexpected tensor {extra}")));
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }
}
