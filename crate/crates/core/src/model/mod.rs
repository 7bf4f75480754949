//! Small decoder-only transformer with an LM head or a three-way
//! classification head, exact gradients and a binary checkpoint format.

mod checkpoint;
mod config;
mod float;
mod params;
mod transformer;

pub use checkpoint::{
    AnyCheckpoint, Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{FloatWidth, HeadType, ModelConfig};
pub use float::Float;
pub use params::{LayerParams, Params, Tensor, INIT_STD};

use crate::packing::{build_attention_mask, AttentionMask, PackedSequence};
use crate::tokenizer::{ANSWER_IDS, BOS_ID, EOS_ID};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {token} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("model has a {found} head, operation needs {expected}")]
    HeadMismatch { expected: HeadType, found: HeadType },
    #[error("classification input must be framed as BOS ... EOS")]
    MissingFrame,
    #[error("label {label} is outside the vocabulary of {vocab_size}")]
    LabelOutOfRange { label: i64, vocab_size: usize },
    #[error("class id {0} is out of range")]
    ClassOutOfRange(usize),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint stores {found}-bit floats, expected {expected}-bit")]
    WidthMismatch {
        expected: FloatWidth,
        found: FloatWidth,
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Tokens, position ids and attention mask for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
}

impl SequenceInput {
    pub fn new(tokens: Vec<u32>, positions: Vec<usize>, mask: AttentionMask) -> Self {
        Self {
            tokens,
            positions,
            mask,
        }
    }

    /// Positions `0..n` with a plain causal mask.
    pub fn causal(tokens: Vec<u32>) -> Self {
        let n = tokens.len();
        Self {
            tokens,
            positions: (0..n).collect(),
            mask: AttentionMask::causal(n),
        }
    }

    /// Packed sequence with its block-diagonal mask.
    pub fn packed(seq: &PackedSequence, segment_local_positions: bool) -> Self {
        Self {
            tokens: seq.tokens.clone(),
            positions: seq.positions(segment_local_positions),
            mask: build_attention_mask(&seq.segment_ids),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmLoss<T> {
    /// Mean cross-entropy over counted positions, 0 when none are counted.
    pub loss: T,
    pub counted: usize,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Float> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        if config.float_width != T::WIDTH {
            return Err(ModelError::WidthMismatch {
                expected: T::WIDTH,
                found: config.float_width,
            });
        }
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    fn require_head(&self, expected: HeadType) -> Result<(), ModelError> {
        if self.config.head_type != expected {
            return Err(ModelError::HeadMismatch {
                expected,
                found: self.config.head_type,
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &SequenceInput) -> Result<(), ModelError> {
        let n = input.len();
        if n == 0 {
            return Err(ModelError::ShapeMismatch("empty input".into()));
        }
        if n > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if input.positions.len() != n || input.mask.size() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "{n} tokens, {} positions, {}x{} mask",
                input.positions.len(),
                input.mask.size(),
                input.mask.size()
            )));
        }
        if let Some(&token) = input
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        if let Some(&p) = input
            .positions
            .iter()
            .find(|&&p| p >= self.config.max_seq_len)
        {
            return Err(ModelError::ShapeMismatch(format!(
                "position {p} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    fn lm_logits_row(&self, h: &[T]) -> Vec<T> {
        let v = self.config.vocab_size;
        match &self.params.lm_head {
            Some(w) => transformer::matmul(h, &w.data, 1, h.len(), v),
            None => (0..v)
                .map(|i| transformer::dot(h, self.params.tok_emb.row(i)))
                .collect(),
        }
    }

    fn lm_head_backward(&self, h: &[T], dlogits: &[T], dh: &mut [T], grads: &mut Params<T>) {
        let d = h.len();
        let v = dlogits.len();
        match &self.params.lm_head {
            Some(w) => {
                let gw = grads.lm_head.as_mut().expect("grads mirror params");
                for i in 0..d {
                    let wr = &w.data[i * v..(i + 1) * v];
                    dh[i] += transformer::dot(wr, dlogits);
                    for (g, &dl) in gw.data[i * v..(i + 1) * v].iter_mut().zip(dlogits) {
                        *g += h[i] * dl;
                    }
                }
            }
            None => {
                for (tok, &dl) in dlogits.iter().enumerate() {
                    let row = self.params.tok_emb.row(tok);
                    for i in 0..d {
                        dh[i] += dl * row[i];
                    }
                    for (g, &hv) in grads.tok_emb.data[tok * d..(tok + 1) * d].iter_mut().zip(h) {
                        *g += dl * hv;
                    }
                }
            }
        }
    }

    fn cls_logits_at(&self, h: &[T]) -> [T; 3] {
        let w = self
            .params
            .cls_weight
            .as_ref()
            .expect("classification head");
        let b = self.params.cls_bias.as_ref().expect("classification head");
        let mut out = [b.data[0], b.data[1], b.data[2]];
        for (i, &hv) in h.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += hv * w.data[i * 3 + c];
            }
        }
        out
    }

    /// Logits for every position, `[len, vocab]`. Row `t` depends only on
    /// the positions `j` with `mask(t, j)`.
    pub fn forward_lm(&self, input: &SequenceInput) -> Result<Tensor<T>, ModelError> {
        self.require_head(HeadType::Lm)?;
        self.check_input(input)?;
        let fwd = transformer::forward(
            &self.config,
            &self.params,
            &input.tokens,
            &input.positions,
            &input.mask,
        );
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(input.len() * self.config.vocab_size);
        for h in fwd.hidden().chunks(d) {
            data.extend(self.lm_logits_row(h));
        }
        Ok(Tensor {
            shape: vec![input.len(), self.config.vocab_size],
            data,
        })
    }

    /// Class logits from the EOS hidden state of a `BOS q EOS` input.
    pub fn forward_cls(&self, tokens: &[u32]) -> Result<[T; 3], ModelError> {
        check_frame(tokens)?;
        let input = SequenceInput::causal(tokens.to_vec());
        Ok(self.forward_cls_pooled(&input, &[tokens.len() - 1])?[0])
    }

    /// Class logits read from the hidden state at each of `pool_positions`.
    pub fn forward_cls_pooled(
        &self,
        input: &SequenceInput,
        pool_positions: &[usize],
    ) -> Result<Vec<[T; 3]>, ModelError> {
        self.require_head(HeadType::Classification)?;
        self.check_input(input)?;
        if let Some(&p) = pool_positions.iter().find(|&&p| p >= input.len()) {
            return Err(ModelError::ShapeMismatch(format!(
                "pooling position {p} out of range"
            )));
        }
        let fwd = transformer::forward(
            &self.config,
            &self.params,
            &input.tokens,
            &input.positions,
            &input.mask,
        );
        let d = self.config.d_model;
        Ok(pool_positions
            .iter()
            .map(|&p| self.cls_logits_at(&fwd.hidden()[p * d..(p + 1) * d]))
            .collect())
    }

    /// Adds `scale * d(sum of counted CE)/d(params)` into `grads`; returns the
    /// summed loss and the number of counted positions.
    pub fn accumulate_lm(
        &self,
        input: &SequenceInput,
        labels: &[i64],
        ignore_label: i64,
        scale: T,
        grads: &mut Params<T>,
    ) -> Result<(T, usize), ModelError> {
        self.require_head(HeadType::Lm)?;
        self.check_input(input)?;
        if labels.len() != input.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} labels for {} tokens",
                labels.len(),
                input.len()
            )));
        }
        let v = self.config.vocab_size;
        for &l in labels {
            if l != ignore_label && (l < 0 || l as usize >= v) {
                return Err(ModelError::LabelOutOfRange {
                    label: l,
                    vocab_size: v,
                });
            }
        }
        let counted: Vec<usize> = (0..labels.len())
            .filter(|&t| labels[t] != ignore_label)
            .collect();
        if counted.is_empty() {
            return Ok((T::zero(), 0));
        }

        let fwd = transformer::forward(
            &self.config,
            &self.params,
            &input.tokens,
            &input.positions,
            &input.mask,
        );
        let d = self.config.d_model;
        let mut d_hidden = vec![T::zero(); input.len() * d];
        let mut total = T::zero();
        for &t in &counted {
            let h = &fwd.hidden()[t * d..(t + 1) * d];
            let logits = self.lm_logits_row(h);
            let (loss, mut dl) = cross_entropy_grad(&logits, labels[t] as usize);
            total += loss;
            for g in dl.iter_mut() {
                *g *= scale;
            }
            self.lm_head_backward(h, &dl, &mut d_hidden[t * d..(t + 1) * d], grads);
        }
        if !total.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        transformer::backward(&self.config, &self.params, &fwd, &d_hidden, grads);
        Ok((total, counted.len()))
    }

    /// Like [`Model::accumulate_lm`] for classification targets given as
    /// `(pooling position, class id)` pairs within one input. Returns the
    /// summed loss.
    pub fn accumulate_cls(
        &self,
        input: &SequenceInput,
        targets: &[(usize, usize)],
        scale: T,
        grads: &mut Params<T>,
    ) -> Result<T, ModelError> {
        self.require_head(HeadType::Classification)?;
        self.check_input(input)?;
        for &(pos, class) in targets {
            if class > 2 {
                return Err(ModelError::ClassOutOfRange(class));
            }
            if pos >= input.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "pooling position {pos} out of range"
                )));
            }
        }
        let fwd = transformer::forward(
            &self.config,
            &self.params,
            &input.tokens,
            &input.positions,
            &input.mask,
        );
        let d = self.config.d_model;
        let w = self
            .params
            .cls_weight
            .as_ref()
            .expect("classification head");
        let mut d_hidden = vec![T::zero(); input.len() * d];
        let mut total = T::zero();
        for &(pos, class) in targets {
            let h = &fwd.hidden()[pos * d..(pos + 1) * d];
            let (loss, mut dl) = cross_entropy_grad(&self.cls_logits_at(h), class);
            total += loss;
            for g in dl.iter_mut() {
                *g *= scale;
            }
            let gw = grads.cls_weight.as_mut().expect("grads mirror params");
            let gb = grads.cls_bias.as_mut().expect("grads mirror params");
            for (b, &g) in gb.data.iter_mut().zip(&dl) {
                *b += g;
            }
            for i in 0..d {
                for (c, &g) in dl.iter().enumerate() {
                    gw.data[i * 3 + c] += h[i] * g;
                    d_hidden[pos * d + i] += w.data[i * 3 + c] * g;
                }
            }
        }
        if !total.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        transformer::backward(&self.config, &self.params, &fwd, &d_hidden, grads);
        Ok(total)
    }

    /// Loss and exact gradients of the mean cross-entropy over counted
    /// positions. With no counted position the loss and every gradient are 0.
    pub fn backward_lm(
        &self,
        input: &SequenceInput,
        labels: &[i64],
        ignore_label: i64,
    ) -> Result<(LmLoss<T>, Params<T>), ModelError> {
        let mut grads = self.params.zeros_like();
        let counted = labels.iter().filter(|&&l| l != ignore_label).count();
        let scale = if counted == 0 {
            T::zero()
        } else {
            T::one() / T::of(counted as f64)
        };
        let (sum, counted) = self.accumulate_lm(input, labels, ignore_label, scale, &mut grads)?;
        let loss = if counted == 0 { T::zero() } else { sum * scale };
        Ok((LmLoss { loss, counted }, grads))
    }

    /// Loss and exact gradients of the classification cross-entropy for one
    /// `BOS q EOS` sample.
    pub fn backward_cls(
        &self,
        tokens: &[u32],
        class_id: usize,
    ) -> Result<(T, Params<T>), ModelError> {
        check_frame(tokens)?;
        let input = SequenceInput::causal(tokens.to_vec());
        let mut grads = self.params.zeros_like();
        let loss = self.accumulate_cls(
            &input,
            &[(tokens.len() - 1, class_id)],
            T::one(),
            &mut grads,
        )?;
        Ok((loss, grads))
    }

    /// LM logits of the three answer letters at the position after
    /// `BOS prompt EOS`.
    pub fn answer_logits(&self, prompt_tokens: &[u32]) -> Result<[T; 3], ModelError> {
        self.require_head(HeadType::Lm)?;
        let mut tokens = Vec::with_capacity(prompt_tokens.len() + 2);
        tokens.push(BOS_ID);
        tokens.extend_from_slice(prompt_tokens);
        tokens.push(EOS_ID);
        let input = SequenceInput::causal(tokens);
        self.check_input(&input)?;
        let fwd = transformer::forward(
            &self.config,
            &self.params,
            &input.tokens,
            &input.positions,
            &input.mask,
        );
        let d = self.config.d_model;
        let row = self.lm_logits_row(&fwd.hidden()[(input.len() - 1) * d..]);
        Ok(ANSWER_IDS.map(|id| row[id as usize]))
    }

    /// Constrained greedy decode: the answer-letter id with the highest
    /// logit, ties going to the lowest id.
    pub fn generate_answer(&self, prompt_tokens: &[u32]) -> Result<u32, ModelError> {
        let logits = self.answer_logits(prompt_tokens)?;
        let mut full = vec![T::neg_infinity(); ANSWER_IDS[2] as usize + 1];
        for (id, l) in ANSWER_IDS.iter().zip(logits) {
            full[*id as usize] = l;
        }
        Ok(constrained_argmax(&full, &ANSWER_IDS))
    }
}

fn check_frame(tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.len() < 2 || tokens[0] != BOS_ID || tokens[tokens.len() - 1] != EOS_ID {
        return Err(ModelError::MissingFrame);
    }
    Ok(())
}

/// Highest-logit candidate; ties go to the smallest candidate id.
pub fn constrained_argmax<T: Float>(logits: &[T], candidates: &[u32]) -> u32 {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    for &c in &sorted[1..] {
        if logits[c as usize] > logits[best as usize] {
            best = c;
        }
    }
    best
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp<T: Float>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Cross-entropy of one row and its gradient w.r.t. the logits.
fn cross_entropy_grad<T: Float>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    (loss, grad)
}

/// Mean cross-entropy over positions whose label is not `ignore_label`.
pub fn loss_lm<T: Float>(
    logits: &Tensor<T>,
    labels: &[i64],
    ignore_label: i64,
) -> Result<LmLoss<T>, ModelError> {
    if logits.rank() != 2 || logits.shape[0] != labels.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape,
            labels.len()
        )));
    }
    let v = logits.shape[1];
    let mut total = T::zero();
    let mut counted = 0;
    for (t, &l) in labels.iter().enumerate() {
        if l == ignore_label {
            continue;
        }
        if l < 0 || l as usize >= v {
            return Err(ModelError::LabelOutOfRange {
                label: l,
                vocab_size: v,
            });
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[l as usize];
        counted += 1;
    }
    let loss = if counted == 0 {
        T::zero()
    } else {
        total / T::of(counted as f64)
    };
    Ok(LmLoss { loss, counted })
}

pub fn loss_cls<T: Float>(logits: &[T], class_id: usize) -> Result<T, ModelError> {
    if logits.len() != 3 {
        return Err(ModelError::ShapeMismatch(format!(
            "{} class logits",
            logits.len()
        )));
    }
    if class_id > 2 {
        return Err(ModelError::ClassOutOfRange(class_id));
    }
    Ok(log_sum_exp(logits) - logits[class_id])
}

#[cfg(test)]
mod tests;
