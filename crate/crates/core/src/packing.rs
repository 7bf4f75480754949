//! Packed training sequences, loss labels and block-diagonal attention masks.
//!
//! A packed sequence concatenates `K` question/answer pairs:
//!
//! ```text
//! tokens   BOS q1 q1 q1 EOS a1 BOS q2 q2 EOS a2
//! labels    -1 -1 -1 -1  a1 -1  -1 -1 -1  a2 -1
//! segment    0  0  0  0   0  0   1  1  1   1  1
//! ```
//!
//! `labels[t]` is the target for the logit at position `t` (next-token
//! alignment), so only the EOS position of each pair carries a label and it
//! is that pair's answer token.

use std::fmt::Write as _;

use crate::dataset::LabeledExample;
use crate::prompting::{PromptStyle, PromptTemplate};
use crate::tokenizer::{Vocabulary, ANSWER_IDS, BOS_ID, EOS_ID, IGNORE_LABEL, PAD_ID};

const PACK_HEADER: &str = "finsent-pack v1";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PackingError {
    #[error("example {source_index}: {len} prompt tokens do not fit in max_seq_len {max_seq_len}")]
    ExampleTooLong {
        source_index: usize,
        len: usize,
        max_seq_len: usize,
    },
    #[error("example {0}: empty prompt")]
    EmptyPrompt(usize),
    #[error("malformed packed layout at position {position}: {message}")]
    MalformedLayout { position: usize, message: String },
    #[error("pack file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// One tokenized question with its single-token answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub prompt_tokens: Vec<u32>,
    pub answer_token: u32,
    pub source_index: usize,
}

impl TokenizedExample {
    /// `BOS q EOS`, the classification-head input frame.
    pub fn framed(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.prompt_tokens.len() + 2);
        t.push(BOS_ID);
        t.extend_from_slice(&self.prompt_tokens);
        t.push(EOS_ID);
        t
    }

    /// Class id of the answer token (0 positive, 1 negative, 2 neutral).
    pub fn class_id(&self) -> usize {
        ANSWER_IDS
            .iter()
            .position(|&a| a == self.answer_token)
            .expect("answer_token is an answer id")
    }

    fn packed_len(&self) -> usize {
        self.prompt_tokens.len() + 3
    }
}

pub fn tokenize_pair(
    example: &LabeledExample,
    source_index: usize,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    style: PromptStyle,
    max_seq_len: usize,
) -> Result<TokenizedExample, PackingError> {
    let prompt_tokens = vocab.encode(&template.build(&example.sentence, style));
    if prompt_tokens.is_empty() {
        return Err(PackingError::EmptyPrompt(source_index));
    }
    if prompt_tokens.len() + 3 > max_seq_len {
        return Err(PackingError::ExampleTooLong {
            source_index,
            len: prompt_tokens.len(),
            max_seq_len,
        });
    }
    let answer = vocab.encode(example.label.letter().as_str());
    debug_assert_eq!(answer.len(), 1);
    Ok(TokenizedExample {
        prompt_tokens,
        answer_token: answer[0],
        source_index,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub labels: Vec<i64>,
    pub segment_ids: Vec<usize>,
    pub pair_count: usize,
    /// Source index of each packed pair, in segment order.
    pub sources: Vec<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions whose label is counted (one EOS per pair).
    pub fn answer_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_LABEL)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn positions(&self, segment_local: bool) -> Vec<usize> {
        position_ids(&self.segment_ids, segment_local)
    }
}

/// Greedy first-fit in input order: a pair joins the current sequence when
/// its `BOS q EOS a` span still fits, otherwise a new sequence is started.
pub fn pack(
    examples: &[TokenizedExample],
    max_seq_len: usize,
) -> Result<Vec<PackedSequence>, PackingError> {
    let mut out = Vec::new();
    let mut current = PackedSequence {
        tokens: Vec::new(),
        labels: Vec::new(),
        segment_ids: Vec::new(),
        pair_count: 0,
        sources: Vec::new(),
    };
    for ex in examples {
        if ex.prompt_tokens.is_empty() {
            return Err(PackingError::EmptyPrompt(ex.source_index));
        }
        if ex.packed_len() > max_seq_len {
            return Err(PackingError::ExampleTooLong {
                source_index: ex.source_index,
                len: ex.prompt_tokens.len(),
                max_seq_len,
            });
        }
        if current.tokens.len() + ex.packed_len() > max_seq_len {
            out.push(std::mem::replace(
                &mut current,
                PackedSequence {
                    tokens: Vec::new(),
                    labels: Vec::new(),
                    segment_ids: Vec::new(),
                    pair_count: 0,
                    sources: Vec::new(),
                },
            ));
        }
        let k = current.pair_count;
        current.tokens.push(BOS_ID);
        current.tokens.extend_from_slice(&ex.prompt_tokens);
        current.tokens.push(EOS_ID);
        current.tokens.push(ex.answer_token);
        current
            .segment_ids
            .extend(std::iter::repeat_n(k, ex.packed_len()));
        current.pair_count += 1;
        current.sources.push(ex.source_index);
    }
    if current.pair_count > 0 {
        out.push(current);
    }
    for seq in &mut out {
        seq.labels = build_labels(&seq.tokens, &seq.segment_ids, IGNORE_LABEL)?;
    }
    Ok(out)
}

/// Validates the `BOS q EOS a` layout of every segment and returns the
/// next-token labels: the answer id at each EOS position, `ignore_label`
/// elsewhere.
pub fn build_labels(
    tokens: &[u32],
    segment_ids: &[usize],
    ignore_label: i64,
) -> Result<Vec<i64>, PackingError> {
    let bad = |position: usize, message: &str| PackingError::MalformedLayout {
        position,
        message: message.to_owned(),
    };
    if tokens.len() != segment_ids.len() {
        return Err(bad(0, "tokens and segment_ids differ in length"));
    }
    let mut labels = vec![ignore_label; tokens.len()];
    let mut start = 0;
    while start < tokens.len() {
        let seg = segment_ids[start];
        if start > 0 && seg != segment_ids[start - 1] + 1 {
            return Err(bad(start, "segment ids must count up from 0 by one"));
        }
        if start == 0 && seg != 0 {
            return Err(bad(0, "first segment id must be 0"));
        }
        let end = (start..tokens.len())
            .find(|&i| segment_ids[i] != seg)
            .unwrap_or(tokens.len());
        let span = &tokens[start..end];
        if span.len() < 4 {
            return Err(bad(start, "segment shorter than BOS q EOS a"));
        }
        if span[0] != BOS_ID {
            return Err(bad(start, "segment does not start with BOS"));
        }
        let eos = span.len() - 2;
        if span[eos] != EOS_ID {
            return Err(bad(start + eos, "EOS must directly precede the answer"));
        }
        if !ANSWER_IDS.contains(&span[eos + 1]) {
            return Err(bad(end - 1, "segment does not end with an answer token"));
        }
        if let Some(i) = span[1..eos]
            .iter()
            .position(|&t| t == BOS_ID || t == EOS_ID || t == PAD_ID)
        {
            return Err(bad(start + 1 + i, "special token inside the question"));
        }
        labels[start + eos] = span[eos + 1] as i64;
        start = end;
    }
    Ok(labels)
}

/// Position ids: restart at 0 for each segment when `segment_local`,
/// otherwise the absolute index in the packed sequence.
pub fn position_ids(segment_ids: &[usize], segment_local: bool) -> Vec<usize> {
    if !segment_local {
        return (0..segment_ids.len()).collect();
    }
    let mut out = Vec::with_capacity(segment_ids.len());
    let mut offset = 0;
    for (i, &s) in segment_ids.iter().enumerate() {
        if i > 0 && s != segment_ids[i - 1] {
            offset = i;
        }
        out.push(i - offset);
    }
    out
}

/// Dense row-major `T x T` boolean mask; `allowed(i, j)` means query `i` may
/// attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self { size, allowed }
    }

    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |i, j| j <= i)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }

    /// Additive form: 0 where allowed, -inf where blocked.
    pub fn additive(&self) -> Vec<f64> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

/// Causal within a segment, nothing across segments.
pub fn build_attention_mask(segment_ids: &[usize]) -> AttentionMask {
    let n = segment_ids.len();
    let mut allowed = vec![false; n * n];
    let mut start = 0;
    while start < n {
        let end = (start..n)
            .find(|&i| segment_ids[i] != segment_ids[start])
            .unwrap_or(n);
        for i in start..end {
            allowed[i * n + start..=i * n + i].fill(true);
        }
        start = end;
    }
    AttentionMask { size: n, allowed }
}

/// Packed sequences padded to a common length. Padding uses `PAD`, carries
/// the ignore label and is excluded from attention in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<Vec<i64>>,
    pub positions: Vec<Vec<usize>>,
    pub masks: Vec<AttentionMask>,
    pub lengths: Vec<usize>,
}

pub fn collate(seqs: &[PackedSequence], segment_local: bool) -> PaddedBatch {
    let width = seqs.iter().map(PackedSequence::len).max().unwrap_or(0);
    let mut batch = PaddedBatch {
        tokens: Vec::new(),
        labels: Vec::new(),
        positions: Vec::new(),
        masks: Vec::new(),
        lengths: Vec::new(),
    };
    for seq in seqs {
        let n = seq.len();
        let mut tokens = seq.tokens.clone();
        tokens.resize(width, PAD_ID);
        let mut labels = seq.labels.clone();
        labels.resize(width, IGNORE_LABEL);
        let mut positions = seq.positions(segment_local);
        positions.resize(width, 0);
        let inner = build_attention_mask(&seq.segment_ids);
        let mask = AttentionMask::from_fn(width, |i, j| i < n && j < n && inner.allowed(i, j));
        batch.tokens.push(tokens);
        batch.labels.push(labels);
        batch.positions.push(positions);
        batch.masks.push(mask);
        batch.lengths.push(n);
    }
    batch
}

/// Renders the plain-text `.pack` dump:
///
/// ```text
/// finsent-pack v1
/// sequences <n>
/// seq <index> pairs <K> len <T>
/// sources <source indices>
/// tokens <T ids>
/// labels <T labels>
/// segments <T segment ids>
/// ```
pub fn write_pack(seqs: &[PackedSequence]) -> String {
    fn join<I: IntoIterator<Item = D>, D: std::fmt::Display>(items: I) -> String {
        items
            .into_iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
    let mut out = format!("{PACK_HEADER}\nsequences {}\n", seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let _ = writeln!(out, "seq {i} pairs {} len {}", s.pair_count, s.len());
        let _ = writeln!(out, "sources {}", join(&s.sources));
        let _ = writeln!(out, "tokens {}", join(&s.tokens));
        let _ = writeln!(out, "labels {}", join(&s.labels));
        let _ = writeln!(out, "segments {}", join(&s.segment_ids));
    }
    out
}

pub fn read_pack(text: &str) -> Result<Vec<PackedSequence>, PackingError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let err = |line: usize, message: String| PackingError::Format { line, message };
    let mut next = |key: &str| -> Result<(usize, Vec<String>), PackingError> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing `{key}` line")))?;
        let mut parts = line.split(' ');
        if parts.next() != Some(key) {
            return Err(err(n, format!("expected `{key}`")));
        }
        Ok((
            n,
            parts.filter(|p| !p.is_empty()).map(str::to_owned).collect(),
        ))
    };
    fn nums<N: std::str::FromStr>(n: usize, parts: &[String]) -> Result<Vec<N>, PackingError> {
        parts
            .iter()
            .map(|p| {
                p.parse().map_err(|_| PackingError::Format {
                    line: n,
                    message: format!("bad integer {p:?}"),
                })
            })
            .collect()
    }

    let (n, header) = next("finsent-pack")?;
    if header != ["v1"] {
        return Err(err(n, "unsupported pack version".into()));
    }
    let (n, count) = next("sequences")?;
    let count: usize = nums::<usize>(n, &count)?
        .first()
        .copied()
        .ok_or_else(|| err(n, "missing count".into()))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (n, head) = next("seq")?;
        let head: Vec<usize> = match head.as_slice() {
            [idx, p, pairs, l, len] if p == "pairs" && l == "len" => {
                nums(n, &[idx.clone(), pairs.clone(), len.clone()])?
            }
            _ => return Err(err(n, "expected `seq <i> pairs <K> len <T>`".into())),
        };
        if head[0] != i {
            return Err(err(n, format!("expected seq {i}")));
        }
        let (n1, sources) = next("sources")?;
        let (n2, tokens) = next("tokens")?;
        let (n3, labels) = next("labels")?;
        let (n4, segments) = next("segments")?;
        let seq = PackedSequence {
            sources: nums(n1, &sources)?,
            tokens: nums(n2, &tokens)?,
            labels: nums(n3, &labels)?,
            segment_ids: nums(n4, &segments)?,
            pair_count: head[1],
        };
        if seq.tokens.len() != head[2]
            || seq.labels.len() != head[2]
            || seq.segment_ids.len() != head[2]
        {
            return Err(err(n, "length mismatch".into()));
        }
        let expected = build_labels(&seq.tokens, &seq.segment_ids, IGNORE_LABEL)?;
        if expected != seq.labels || seq.sources.len() != seq.pair_count {
            return Err(err(n3, "labels or sources inconsistent with layout".into()));
        }
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(len: usize, answer: usize, source_index: usize) -> TokenizedExample {
        TokenizedExample {
            prompt_tokens: (0..len as u32).map(|t| 10 + t % 200).collect(),
            answer_token: ANSWER_IDS[answer],
            source_index,
        }
    }

    /// Reference mask: the pairwise definition, evaluated entry by entry.
    fn brute_mask(segment_ids: &[usize]) -> Vec<Vec<bool>> {
        let n = segment_ids.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| segment_ids[i] == segment_ids[j] && j <= i)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn packs_two_pairs_into_one_sequence() {
        let seqs = pack(&[ex(3, 0, 0), ex(4, 2, 1)], 16).unwrap();
        assert_eq!(seqs.len(), 1);
        let s = &seqs[0];
        assert_eq!(s.len(), (1 + 3 + 1 + 1) + (1 + 4 + 1 + 1));
        assert_eq!(s.pair_count, 2);
        assert_eq!(s.segment_ids, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(s.answer_positions(), vec![4, 11]);
        assert_eq!(s.labels[4], ANSWER_IDS[0] as i64);
        assert_eq!(s.labels[11], ANSWER_IDS[2] as i64);
        assert_eq!(s.sources, vec![0, 1]);
    }

    #[test]
    fn starts_new_sequence_when_full() {
        let seqs = pack(&[ex(1017, 0, 0), ex(2, 1, 1)], 1024).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].len(), 1020);
        assert_eq!(seqs[1].pair_count, 1);
    }

    #[test]
    fn oversized_example_is_rejected() {
        assert_eq!(
            pack(&[ex(1022, 0, 7)], 1024).unwrap_err(),
            PackingError::ExampleTooLong {
                source_index: 7,
                len: 1022,
                max_seq_len: 1024
            }
        );
        assert_eq!(pack(&[ex(1021, 0, 7)], 1024).unwrap()[0].len(), 1024);
    }

    #[test]
    fn single_pair_labels() {
        let a = ANSWER_IDS[1];
        let labels = build_labels(&[BOS_ID, 11, 12, EOS_ID, a], &[0; 5], IGNORE_LABEL).unwrap();
        assert_eq!(labels, vec![-1, -1, -1, a as i64, -1]);
        assert_eq!(
            build_labels(&[], &[], IGNORE_LABEL).unwrap(),
            Vec::<i64>::new()
        );
    }

    #[test]
    fn malformed_layouts_are_rejected() {
        let a = ANSWER_IDS[0];
        assert!(build_labels(&[11, 12, EOS_ID, a], &[0; 4], -1).is_err());
        assert!(build_labels(&[BOS_ID, 12, EOS_ID, 13], &[0; 4], -1).is_err());
        assert!(build_labels(&[BOS_ID, EOS_ID, 12, EOS_ID, a], &[0; 5], -1).is_err());
        assert!(build_labels(&[BOS_ID, 12, EOS_ID, a], &[1; 4], -1).is_err());
        assert!(build_labels(&[BOS_ID, 12, EOS_ID, a], &[0; 3], -1).is_err());
    }

    #[test]
    fn mask_for_one_segment_is_causal() {
        assert_eq!(build_attention_mask(&[0; 4]), AttentionMask::causal(4));
    }

    #[test]
    fn mask_for_two_segments_is_block_diagonal() {
        let m = build_attention_mask(&[0, 0, 1, 1]);
        let expect = [
            [true, false, false, false],
            [true, true, false, false],
            [false, false, true, false],
            [false, false, true, true],
        ];
        for (i, row) in expect.iter().enumerate() {
            assert_eq!(m.row(i), row);
        }
        assert!(!m.allowed(2, 1));
    }

    #[test]
    fn answer_position_sees_only_its_segment() {
        let seqs = pack(&[ex(3, 0, 0), ex(4, 1, 1), ex(2, 2, 2)], 64).unwrap();
        let s = &seqs[0];
        let m = build_attention_mask(&s.segment_ids);
        for (k, &p) in s.answer_positions().iter().enumerate() {
            for j in 0..s.len() {
                let same = s.segment_ids[j] == k;
                assert_eq!(m.allowed(p, j), same && j <= p);
            }
        }
    }

    #[test]
    fn local_positions_restart_per_segment() {
        assert_eq!(
            position_ids(&[0, 0, 0, 1, 1, 2], true),
            vec![0, 1, 2, 0, 1, 0]
        );
        assert_eq!(position_ids(&[0, 0, 1], false), vec![0, 1, 2]);
    }

    #[test]
    fn collate_pads_with_ignored_unattended_positions() {
        let seqs = pack(&[ex(3, 0, 0), ex(9, 1, 1)], 12).unwrap();
        assert_eq!(seqs.len(), 2);
        let b = collate(&seqs, true);
        assert_eq!(b.tokens[0].len(), 12);
        assert_eq!(&b.tokens[0][6..], &[PAD_ID; 6]);
        assert!(b.labels[0][6..].iter().all(|&l| l == IGNORE_LABEL));
        for i in 0..12 {
            for j in 0..12 {
                if i >= 6 || j >= 6 {
                    assert!(!b.masks[0].allowed(i, j));
                }
            }
        }
        assert_eq!(b.lengths, vec![6, 12]);
    }

    #[test]
    fn additive_mask_uses_neg_infinity() {
        let add = AttentionMask::causal(2).additive();
        assert_eq!(add, vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]);
    }

    #[test]
    fn pack_file_round_trip() {
        let seqs = pack(&[ex(3, 0, 5), ex(4, 2, 9), ex(6, 1, 2)], 16).unwrap();
        let text = write_pack(&seqs);
        assert!(
            text.starts_with("finsent-pack v1\nsequences 2\nseq 0 pairs 2 len 13\nsources 5 9\n")
        );
        assert_eq!(read_pack(&text).unwrap(), seqs);
        assert!(read_pack(&text.replace("labels -1", "labels 3")).is_err());
    }

    proptest! {
        #[test]
        fn packing_conserves_pairs(lens in proptest::collection::vec((1usize..40, 0usize..3), 1..60), cap in 45usize..200) {
            let input: Vec<_> = lens.iter().enumerate().map(|(i, &(l, a))| ex(l, a, i)).collect();
            let seqs = pack(&input, cap).unwrap();
            let total: usize = seqs.iter().map(|s| s.pair_count).sum();
            prop_assert_eq!(total, input.len());
            let counted: usize = seqs.iter().map(|s| s.answer_positions().len()).sum();
            prop_assert_eq!(counted, input.len());
            let order: Vec<usize> = seqs.iter().flat_map(|s| s.sources.clone()).collect();
            prop_assert_eq!(order, (0..input.len()).collect::<Vec<_>>());
            for s in &seqs {
                prop_assert!(s.len() <= cap);
                prop_assert!(s.segment_ids.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(build_labels(&s.tokens, &s.segment_ids, IGNORE_LABEL).unwrap(), s.labels.clone());
            }
        }

        #[test]
        fn mask_matches_pairwise_definition(sizes in proptest::collection::vec(1usize..8, 1..8)) {
            let segs: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
            let m = build_attention_mask(&segs);
            let brute = brute_mask(&segs);
            for (i, row) in brute.iter().enumerate() {
                prop_assert_eq!(m.row(i), row.as_slice());
            }
        }
    }
}
