//! SFT and classification-head training loops: cosine-annealed AdamW (or
//! SGD) with global-norm clipping and best-on-validation selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    Checkpoint, Float, HeadType, Model, ModelConfig, ModelError, OptimizerState, Params,
    SequenceInput,
};
use crate::packing::{build_attention_mask, PackedSequence, TokenizedExample};
use crate::rng::SplitMix64;
use crate::tokenizer::IGNORE_LABEL;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("gradients are not finite")]
    NonFiniteGradient,
    #[error("training diverged at step {step} (lr {lr:e}): loss or gradient is not finite")]
    Diverged { step: usize, lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cosine")
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            other => Err(format!("unknown schedule {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
    pub grad_clip_norm: f64,
    /// Packed sequences per step for SFT, single samples per step for the
    /// classification head.
    pub micro_batch: usize,
    pub max_seq_len: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    /// Published fine-tuning recipe for the 7B model.
    pub fn paper() -> Self {
        Self {
            epochs: 5,
            lr_start: 3e-5,
            lr_end: 3e-6,
            schedule: Schedule::Cosine,
            grad_clip_norm: 1.0,
            micro_batch: 4,
            max_seq_len: 1024,
            optimizer: OptimizerKind::default(),
            seed: 42,
            eval_every: 100,
        }
    }

    /// CPU-sized run for a from-scratch model.
    pub fn toy() -> Self {
        Self {
            epochs: 4,
            lr_start: 1e-3,
            lr_end: 1e-4,
            micro_batch: 2,
            max_seq_len: 256,
            eval_every: 25,
            ..Self::paper()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr_start.is_finite() && self.lr_end.is_finite()) || self.lr_end < 0.0 {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.lr_end > self.lr_start {
            return bad(format!(
                "lr_end {} exceeds lr_start {}",
                self.lr_end, self.lr_start
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if self.micro_batch == 0 {
            return bad("micro_batch must be at least 1".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if let OptimizerKind::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || !(eps > 0.0)
                || weight_decay < 0.0
            {
                return bad("adamw needs 0 <= beta < 1, eps > 0, weight_decay >= 0".into());
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("epochs", self.epochs.to_string()),
            ("lr_start", format!("{:?}", self.lr_start)),
            ("lr_end", format!("{:?}", self.lr_end)),
            ("schedule", self.schedule.to_string()),
            ("grad_clip_norm", format!("{:?}", self.grad_clip_norm)),
            ("micro_batch", self.micro_batch.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
        ];
        match self.optimizer {
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => out.extend([
                ("optimizer", "adamw".to_owned()),
                ("beta1", format!("{beta1:?}")),
                ("beta2", format!("{beta2:?}")),
                ("eps", format!("{eps:?}")),
                ("weight_decay", format!("{weight_decay:?}")),
            ]),
            OptimizerKind::Sgd => out.push(("optimizer", "sgd".to_owned())),
        }
        out.push(("seed", self.seed.to_string()));
        out.push(("eval_every", self.eval_every.to_string()));
        out
    }

    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), TrainError> {
        fn parse<V: FromStr>(key: &str, v: &str) -> Result<V, TrainError> {
            v.parse()
                .map_err(|_| TrainError::InvalidConfig(format!("bad value {v:?} for {key}")))
        }
        let mut adam = match self.optimizer {
            OptimizerKind::AdamW { .. } => self.optimizer,
            OptimizerKind::Sgd => OptimizerKind::default(),
        };
        let mut use_sgd = self.optimizer == OptimizerKind::Sgd;
        for (key, v) in pairs {
            let v = v.as_str();
            let OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } = &mut adam
            else {
                unreachable!()
            };
            match key.as_str() {
                "epochs" => self.epochs = parse(key, v)?,
                "lr_start" => self.lr_start = parse(key, v)?,
                "lr_end" => self.lr_end = parse(key, v)?,
                "schedule" => self.schedule = v.parse().map_err(TrainError::InvalidConfig)?,
                "grad_clip_norm" => self.grad_clip_norm = parse(key, v)?,
                "micro_batch" => self.micro_batch = parse(key, v)?,
                "max_seq_len" => self.max_seq_len = parse(key, v)?,
                "optimizer" => {
                    use_sgd = match v {
                        "adamw" => false,
                        "sgd" => true,
                        other => {
                            return Err(TrainError::InvalidConfig(format!(
                                "unknown optimizer {other:?}"
                            )))
                        }
                    }
                }
                "beta1" => *beta1 = parse(key, v)?,
                "beta2" => *beta2 = parse(key, v)?,
                "eps" => *eps = parse(key, v)?,
                "weight_decay" => *weight_decay = parse(key, v)?,
                "seed" => self.seed = parse(key, v)?,
                "eval_every" => self.eval_every = parse(key, v)?,
                other => {
                    return Err(TrainError::InvalidConfig(format!(
                        "unknown train key {other:?}"
                    )))
                }
            }
        }
        self.optimizer = if use_sgd { OptimizerKind::Sgd } else { adam };
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Optimizer steps for a run: `epochs * ceil(items / micro_batch)`.
pub fn total_steps(items: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * items.div_ceil(cfg.micro_batch)
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 || step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == 0 {
        return Ok(cfg.lr_start);
    }
    if step == total_steps {
        return Ok(cfg.lr_end);
    }
    let progress = step as f64 / total_steps as f64;
    let lr = cfg.lr_end
        + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(lr.clamp(cfg.lr_end, cfg.lr_start))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<T: Float>(grads: &mut Params<T>, max_norm: f64) -> Result<f64, TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = T::of(x.as_f64() * scale);
            }
        }
    }
    Ok(norm)
}

/// Parameter update rule with its moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub state: OptimizerState<T>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &Params<T>) -> Self {
        Self {
            kind,
            state: OptimizerState {
                step: 0,
                m: params.zeros_like(),
                v: params.zeros_like(),
            },
        }
    }

    /// One update. AdamW decays only rank-2 tensors (matrices and
    /// embeddings), decoupled from the adaptive step.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.state.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, T::of(-lr)),
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.state.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (ms, vs) = (&mut self.state.m, &mut self.state.v);
                let iter = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(ms.tensors_mut().into_iter().zip(vs.tensors_mut()));
                for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
                    let decay = if p.rank() == 2 { weight_decay } else { 0.0 };
                    for i in 0..p.data.len() {
                        let gi = g.data[i].as_f64();
                        let mi = beta1 * m.data[i].as_f64() + (1.0 - beta1) * gi;
                        let vi = beta2 * v.data[i].as_f64() + (1.0 - beta2) * gi * gi;
                        m.data[i] = T::of(mi);
                        v.data[i] = T::of(vi);
                        let pi = p.data[i].as_f64();
                        let update = (mi / bc1) / ((vi / bc2).sqrt() + eps) + decay * pi;
                        p.data[i] = T::of(pi - lr * update);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step { step: usize, lr: f64, loss: f64 },
    Eval { step: usize, val_accuracy: f64 },
}

/// Append-only training log, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn losses(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            LogRecord::Step { step, loss, .. } => Some((step, loss)),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            LogRecord::Eval { step, val_accuracy } => Some((step, val_accuracy)),
            _ => None,
        })
    }

    /// Highest validation accuracy and the earliest step reaching it.
    pub fn best_eval(&self) -> Option<(usize, f64)> {
        self.evals().fold(None, |best, (s, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((s, a)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights at the best validation accuracy (the final weights when no
    /// validation ran).
    pub checkpoint: Checkpoint<T>,
    pub log: TrainLog,
    pub total_steps: usize,
    /// Accuracy of the final weights on the validation set.
    pub final_val_accuracy: Option<f64>,
}

/// Fraction of examples whose constrained greedy answer is the gold letter.
pub fn generation_accuracy<T: Float>(
    model: &Model<T>,
    examples: &[TokenizedExample],
) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|e| {
            model
                .generate_answer(&e.prompt_tokens)
                .map(|id| id == e.answer_token)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Fraction of examples whose class-head argmax is the gold class.
pub fn classhead_accuracy<T: Float>(
    model: &Model<T>,
    examples: &[TokenizedExample],
) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|e| {
            model
                .forward_cls(&e.framed())
                .map(|l| crate::model::argmax(&l) == e.class_id())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Mean-loss gradients of one SFT micro-batch: the cross-entropy is
/// averaged over every counted label in the batch.
pub fn sft_batch_grads<T: Float>(
    model: &Model<T>,
    batch: &[&PackedSequence],
) -> Result<(f64, Params<T>), ModelError> {
    let counted: usize = batch
        .iter()
        .map(|s| s.labels.iter().filter(|&&l| l != IGNORE_LABEL).count())
        .sum();
    let mut grads = model.params.zeros_like();
    if counted == 0 {
        return Ok((0.0, grads));
    }
    let scale = T::one() / T::of(counted as f64);
    let seg_local = model.config.segment_local_positions;
    let parts = batch
        .par_iter()
        .map(|s| {
            let mut g = model.params.zeros_like();
            let input = SequenceInput::packed(s, seg_local);
            model
                .accumulate_lm(&input, &s.labels, IGNORE_LABEL, scale, &mut g)
                .map(|(loss, _)| (loss, g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for (loss, g) in parts {
        total += loss.as_f64();
        grads.add_scaled(&g, T::one());
    }
    Ok((total / counted as f64, grads))
}

/// Gradient accumulation over single `BOS q EOS` samples, each contributing
/// `1/len` of its loss gradient. This is what [`train_classhead`] uses.
pub fn classhead_accumulated_grads<T: Float>(
    model: &Model<T>,
    samples: &[(Vec<u32>, usize)],
) -> Result<(f64, Params<T>), ModelError> {
    let scale = T::one() / T::of(samples.len() as f64);
    let parts = samples
        .par_iter()
        .map(|(tokens, class)| {
            let mut g = model.params.zeros_like();
            let input = SequenceInput::causal(tokens.clone());
            model
                .accumulate_cls(&input, &[(tokens.len() - 1, *class)], scale, &mut g)
                .map(|loss| (loss, g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for (loss, g) in parts {
        total += loss.as_f64();
        grads.add_scaled(&g, T::one());
    }
    Ok((total / samples.len() as f64, grads))
}

/// The same mean loss computed as one batch: all samples packed into a
/// single block-diagonal sequence with segment-local positions, pooled at
/// each EOS.
pub fn classhead_batch_grads<T: Float>(
    model: &Model<T>,
    samples: &[(Vec<u32>, usize)],
) -> Result<(f64, Params<T>), ModelError> {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::new();
    let mut targets = Vec::new();
    for (seg, (t, class)) in samples.iter().enumerate() {
        tokens.extend_from_slice(t);
        positions.extend(0..t.len());
        segments.extend(std::iter::repeat_n(seg, t.len()));
        targets.push((tokens.len() - 1, *class));
    }
    let input = SequenceInput::new(tokens, positions, build_attention_mask(&segments));
    let mut grads = model.params.zeros_like();
    let scale = T::one() / T::of(samples.len() as f64);
    let loss = model.accumulate_cls(&input, &targets, scale, &mut grads)?;
    Ok((loss.as_f64() / samples.len() as f64, grads))
}

struct Loop<'a, T> {
    cfg: &'a TrainConfig,
    model: Model<T>,
    optimizer: Optimizer<T>,
    log: TrainLog,
    best: Option<(f64, Checkpoint<T>)>,
    total: usize,
    step: usize,
}

impl<T: Float> Loop<'_, T> {
    fn update(&mut self, loss: f64, mut grads: Params<T>) -> Result<(), TrainError> {
        let lr = lr_at_step(self.step, self.total, self.cfg)?;
        let diverged = TrainError::Diverged {
            step: self.step + 1,
            lr,
        };
        if !loss.is_finite() {
            return Err(diverged);
        }
        clip_gradients(&mut grads, self.cfg.grad_clip_norm).map_err(|_| diverged)?;
        self.optimizer.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        self.log.push(LogRecord::Step {
            step: self.step,
            lr,
            loss,
        });
        Ok(())
    }

    fn maybe_eval(
        &mut self,
        accuracy: impl Fn(&Model<T>) -> Result<f64, ModelError>,
    ) -> Result<Option<f64>, TrainError> {
        if !self.step.is_multiple_of(self.cfg.eval_every) && self.step != self.total {
            return Ok(None);
        }
        let acc = accuracy(&self.model)?;
        self.log.push(LogRecord::Eval {
            step: self.step,
            val_accuracy: acc,
        });
        if self.best.as_ref().is_none_or(|(b, _)| acc > *b) {
            let ck = Checkpoint {
                model: self.model.clone(),
                optimizer: self.optimizer_state(),
                step: self.step as u64,
                val_accuracy: Some(acc),
            };
            self.best = Some((acc, ck));
        }
        Ok(Some(acc))
    }

    fn optimizer_state(&self) -> Option<OptimizerState<T>> {
        match self.optimizer.kind {
            OptimizerKind::AdamW { .. } => Some(self.optimizer.state.clone()),
            OptimizerKind::Sgd => None,
        }
    }

    fn finish(self, final_val_accuracy: Option<f64>) -> TrainOutcome<T> {
        let checkpoint = match self.best {
            Some((_, ck)) => ck,
            None => Checkpoint {
                optimizer: self.optimizer_state(),
                step: self.step as u64,
                val_accuracy: None,
                model: self.model,
            },
        };
        TrainOutcome {
            checkpoint,
            log: self.log,
            total_steps: self.total,
            final_val_accuracy,
        }
    }
}

fn start<'a, T: Float>(
    model_cfg: &ModelConfig,
    cfg: &'a TrainConfig,
    head: HeadType,
    items: usize,
) -> Result<Loop<'a, T>, TrainError> {
    cfg.validate()?;
    if model_cfg.head_type != head {
        return Err(ModelError::HeadMismatch {
            expected: head,
            found: model_cfg.head_type,
        }
        .into());
    }
    if items == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    let model = Model::<T>::init(model_cfg.clone())?;
    let optimizer = Optimizer::new(cfg.optimizer, &model.params);
    Ok(Loop {
        cfg,
        model,
        optimizer,
        log: TrainLog::default(),
        best: None,
        total: total_steps(items, cfg),
        step: 0,
    })
}

fn epoch_order(rng: &mut SplitMix64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Supervised fine-tuning on packed sequences with loss only on answer
/// tokens. Validation accuracy uses constrained greedy decoding.
pub fn train_sft<T: Float>(
    train: &[PackedSequence],
    val: &[TokenizedExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let mut lp = start::<T>(model_cfg, cfg, HeadType::Lm, train.len())?;
    if lp.total == 0 {
        return Ok(lp.finish(None));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut last = None;
    for _ in 0..cfg.epochs {
        for chunk in epoch_order(&mut rng, train.len()).chunks(cfg.micro_batch) {
            let batch: Vec<&PackedSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = lr_at_step(lp.step, lp.total, cfg)?;
            let (loss, grads) =
                sft_batch_grads(&lp.model, &batch).map_err(|e| diverged_or(e, lp.step + 1, lr))?;
            lp.update(loss, grads)?;
            if !val.is_empty() {
                last = lp.maybe_eval(|m| generation_accuracy(m, val))?.or(last);
            }
        }
    }
    Ok(lp.finish(last))
}

/// Classification-head training: each step accumulates gradients over
/// `micro_batch` single samples.
pub fn train_classhead<T: Float>(
    train: &[TokenizedExample],
    val: &[TokenizedExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let mut lp = start::<T>(model_cfg, cfg, HeadType::Classification, train.len())?;
    if lp.total == 0 {
        return Ok(lp.finish(None));
    }
    let samples: Vec<(Vec<u32>, usize)> =
        train.iter().map(|e| (e.framed(), e.class_id())).collect();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut last = None;
    for _ in 0..cfg.epochs {
        for chunk in epoch_order(&mut rng, train.len()).chunks(cfg.micro_batch) {
            let batch: Vec<(Vec<u32>, usize)> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = lr_at_step(lp.step, lp.total, cfg)?;
            let (loss, grads) = classhead_accumulated_grads(&lp.model, &batch)
                .map_err(|e| diverged_or(e, lp.step + 1, lr))?;
            lp.update(loss, grads)?;
            if !val.is_empty() {
                last = lp.maybe_eval(|m| classhead_accuracy(m, val))?.or(last);
            }
        }
    }
    Ok(lp.finish(last))
}

fn diverged_or(e: ModelError, step: usize, lr: f64) -> TrainError {
    match e {
        ModelError::NonFiniteLoss => TrainError::Diverged { step, lr },
        other => other.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FloatWidth;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at_step(0, 100, &cfg).unwrap(), 3e-5);
        assert_eq!(lr_at_step(100, 100, &cfg).unwrap(), 3e-6);
        assert!((lr_at_step(50, 100, &cfg).unwrap() - 1.65e-5).abs() < 1e-18);
        assert!(lr_at_step(101, 100, &cfg).is_err());
        assert!(lr_at_step(0, 0, &cfg).is_err());
        let lrs: Vec<f64> = (0..=37).map(|s| lr_at_step(s, 37, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn total_steps_rounds_up() {
        let cfg = TrainConfig {
            epochs: 3,
            micro_batch: 4,
            ..TrainConfig::paper()
        };
        assert_eq!(total_steps(9, &cfg), 9);
        assert_eq!(total_steps(8, &cfg), 6);
    }

    fn grads_with(values: &[f64]) -> Params<f64> {
        let cfg = ModelConfig {
            vocab_size: 262,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_seq_len: 4,
            float_width: FloatWidth::F64,
            ..ModelConfig::default()
        };
        let mut p = Params::<f64>::zeros(&cfg);
        p.tok_emb.data[..values.len()].copy_from_slice(values);
        p
    }

    #[test]
    fn clipping() {
        let mut g = grads_with(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g, grads_with(&[0.3, 0.4]));

        let mut g = grads_with(&[0.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 4.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-9);
        assert_eq!(g.tok_emb.data[1], 1.0);

        let mut g = grads_with(&[]);
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g.global_norm(), 0.0);

        let mut g = grads_with(&[f64::NAN]);
        assert!(matches!(
            clip_gradients(&mut g, 1.0),
            Err(TrainError::NonFiniteGradient)
        ));
    }

    #[test]
    fn config_validation_and_pairs() {
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = TrainConfig {
            lr_end: 1e-3,
            lr_start: 1e-4,
            ..TrainConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        let cfg = TrainConfig::paper();
        let pairs: BTreeMap<String, String> = cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        let mut back = TrainConfig::toy();
        back.apply_pairs(&pairs).unwrap();
        assert_eq!(back, cfg);
        let mut sgd = TrainConfig::toy();
        sgd.apply_pairs(&BTreeMap::from([(
            "optimizer".to_owned(),
            "sgd".to_owned(),
        )]))
        .unwrap();
        assert_eq!(sgd.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = grads_with(&[1.0, -2.0]);
        let g = grads_with(&[0.5, -0.1]);
        let kind = OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(kind, &p);
        opt.step(&mut p, &g, 0.01);
        assert!((p.tok_emb.data[0] - 0.99).abs() < 1e-12);
        assert!((p.tok_emb.data[1] + 1.99).abs() < 1e-12);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn log_round_trip_and_best() {
        let mut log = TrainLog::default();
        log.push(LogRecord::Step {
            step: 1,
            lr: 0.1,
            loss: 2.5,
        });
        log.push(LogRecord::Eval {
            step: 1,
            val_accuracy: 0.5,
        });
        log.push(LogRecord::Eval {
            step: 2,
            val_accuracy: 0.75,
        });
        log.push(LogRecord::Eval {
            step: 3,
            val_accuracy: 0.75,
        });
        let text = log.to_jsonl();
        assert!(text.starts_with("{\"step\":1,\"lr\":0.1,\"loss\":2.5}\n"));
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.best_eval(), Some((2, 0.75)));
    }
}
