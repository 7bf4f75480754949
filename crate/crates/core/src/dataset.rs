//! Financial PhraseBank ingestion, label mapping and seeded splits.
//!
//! The distributed PhraseBank files hold one `sentence@label` record per line,
//! usually Latin-1 encoded. Files are decoded as UTF-8 when they are valid UTF-8
//! (a leading UTF-8 BOM is stripped) and as Latin-1 otherwise.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `sentence@label`, got {content:?}")]
    Malformed { line: usize, content: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: empty sentence")]
    EmptySentence { line: usize },
    #[error("class id {0} is out of range (expected 0, 1 or 2)")]
    ClassOutOfRange(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// Sentiment class. Class ids: positive 0, negative 1, neutral 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn class_id(self) -> usize {
        match self {
            Sentiment::Positive => 0,
            Sentiment::Negative => 1,
            Sentiment::Neutral => 2,
        }
    }

    pub fn from_class_id(id: usize) -> Result<Self, DatasetError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(DatasetError::ClassOutOfRange(id))
    }

    /// Choice letter used by the prompt: A) positive. B) negative. C) neutral.
    pub fn letter(self) -> AnswerLetter {
        match self {
            Sentiment::Positive => AnswerLetter::A,
            Sentiment::Negative => AnswerLetter::B,
            Sentiment::Neutral => AnswerLetter::C,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            _ => Err(()),
        }
    }
}

pub fn label_to_id(label: Sentiment) -> usize {
    label.class_id()
}

pub fn id_to_label(id: usize) -> Result<Sentiment, DatasetError> {
    Sentiment::from_class_id(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerLetter {
    A,
    B,
    C,
}

impl AnswerLetter {
    pub const ALL: [AnswerLetter; 3] = [AnswerLetter::A, AnswerLetter::B, AnswerLetter::C];

    pub fn as_char(self) -> char {
        match self {
            AnswerLetter::A => 'A',
            AnswerLetter::B => 'B',
            AnswerLetter::C => 'C',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLetter::A => "A",
            AnswerLetter::B => "B",
            AnswerLetter::C => "C",
        }
    }

    /// Accepts either case.
    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(AnswerLetter::A),
            'B' => Some(AnswerLetter::B),
            'C' => Some(AnswerLetter::C),
            _ => None,
        }
    }

    pub fn sentiment(self) -> Sentiment {
        match self {
            AnswerLetter::A => Sentiment::Positive,
            AnswerLetter::B => Sentiment::Negative,
            AnswerLetter::C => Sentiment::Neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sentence: String,
    pub label: Sentiment,
}

impl LabeledExample {
    /// Returns `None` when the sentence is blank.
    pub fn new(sentence: impl Into<String>, label: Sentiment) -> Option<Self> {
        let sentence = sentence.into();
        if sentence.trim().is_empty() {
            None
        } else {
            Some(Self { sentence, label })
        }
    }

    /// The `sentence@label` line form.
    pub fn to_line(&self) -> String {
        format!("{}@{}", self.sentence, self.label)
    }
}

pub fn load_phrasebank(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_phrasebank(&decode_text(&bytes))
}

/// UTF-8 (with optional BOM) when valid, Latin-1 otherwise.
pub fn decode_text(bytes: &[u8]) -> String {
    let body = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    match std::str::from_utf8(body) {
        Ok(s) => s.to_owned(),
        Err(_) => body.iter().map(|&b| b as char).collect(),
    }
}

/// Parses `sentence@label` lines. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_phrasebank(text: &str) -> Result<Vec<LabeledExample>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (sentence, label) = line
            .rsplit_once('@')
            .ok_or_else(|| DatasetError::Malformed {
                line: line_no,
                content: line.to_owned(),
            })?;
        let label_text = label.trim();
        let label = label_text
            .parse::<Sentiment>()
            .map_err(|_| DatasetError::UnknownLabel {
                line: line_no,
                label: label_text.to_owned(),
            })?;
        let example = LabeledExample::new(sentence.trim(), label)
            .ok_or(DatasetError::EmptySentence { line: line_no })?;
        out.push(example);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub val_fraction_of_rest: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.20,
            val_fraction_of_rest: 0.10,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.val_fraction_of_rest >= 0.0 && self.val_fraction_of_rest < 1.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "val_fraction_of_rest must be in [0, 1), got {}",
                self.val_fraction_of_rest
            )));
        }
        Ok(())
    }
}

/// Indices into the loaded example list, in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

impl Split {
    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `(source_index, example)` pairs for one split.
    pub fn select<'a>(
        &self,
        which: SplitName,
        examples: &'a [LabeledExample],
    ) -> Vec<(usize, &'a LabeledExample)> {
        self.indices(which)
            .iter()
            .map(|&i| (i, &examples[i]))
            .collect()
    }
}

/// Splits `n` examples: the first `round(test_fraction * n)` shuffled indices
/// go to test, the next `round(val_fraction_of_rest * rest)` to validation,
/// the remainder to train. Shuffling is unstratified Fisher-Yates driven by
/// [`SplitMix64`] seeded with `spec.seed`.
pub fn split(examples: &[LabeledExample], spec: &SplitSpec) -> Result<Split, DatasetError> {
    split_count(examples.len(), spec)
}

pub fn split_count(n: usize, spec: &SplitSpec) -> Result<Split, DatasetError> {
    spec.validate()?;
    if n == 0 {
        return Err(DatasetError::InvalidSplit("no examples to split".into()));
    }
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let rest = n - n_test;
    let n_val = (spec.val_fraction_of_rest * rest as f64).round() as usize;
    let n_train = rest - n_val;
    if n_test == 0 {
        return Err(DatasetError::InvalidSplit(format!(
            "test split is empty for n={n}, test_fraction={}",
            spec.test_fraction
        )));
    }
    if spec.val_fraction_of_rest > 0.0 && n_val == 0 {
        return Err(DatasetError::InvalidSplit(format!(
            "validation split is empty for n={n}, val_fraction_of_rest={}",
            spec.val_fraction_of_rest
        )));
    }
    if n_train == 0 {
        return Err(DatasetError::InvalidSplit(format!(
            "train split is empty for n={n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(spec.seed).shuffle(&mut order);
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Ok(Split { train, val, test })
}

/// Contents of `splits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub n: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction_of_rest: f64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const SPLIT_MANIFEST_FORMAT: &str = "finsent-splits v1";

impl SplitManifest {
    pub fn new(n: usize, spec: &SplitSpec, split: &Split) -> Self {
        Self {
            format: SPLIT_MANIFEST_FORMAT.to_owned(),
            n,
            seed: spec.seed,
            test_fraction: spec.test_fraction,
            val_fraction_of_rest: spec.val_fraction_of_rest,
            train: split.train.clone(),
            val: split.val.clone(),
            test: split.test.clone(),
        }
    }

    pub fn split(&self) -> Split {
        Split {
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let manifest: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if manifest.format != SPLIT_MANIFEST_FORMAT {
            return Err(format!("unsupported splits format {:?}", manifest.format));
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_sentence_and_label_on_last_at() {
        let ex = parse_phrasebank("Profit rose to EUR 12 mn .@positive\n").unwrap();
        assert_eq!(
            ex,
            vec![LabeledExample {
                sentence: "Profit rose to EUR 12 mn .".into(),
                label: Sentiment::Positive
            }]
        );
        let ex = parse_phrasebank("mail me @ home@neutral").unwrap();
        assert_eq!(ex[0].sentence, "mail me @ home");
        assert_eq!(ex[0].label, Sentiment::Neutral);
    }

    #[test]
    fn missing_separator_reports_line_number() {
        let err = parse_phrasebank("A fine day .@positive\n\nno label here\n").unwrap_err();
        match err {
            DatasetError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let err = parse_phrasebank("Shares fell .@bearish").unwrap_err();
        assert!(
            matches!(err, DatasetError::UnknownLabel { line: 1, ref label } if label == "bearish")
        );
    }

    #[test]
    fn empty_sentence_is_rejected() {
        assert!(matches!(
            parse_phrasebank("  @neutral").unwrap_err(),
            DatasetError::EmptySentence { line: 1 }
        ));
    }

    #[test]
    fn crlf_and_latin1_are_accepted() {
        let bytes = b"Ty\xF6 valmis .@neutral\r\nSales up .@positive\r\n";
        let ex = parse_phrasebank(&decode_text(bytes)).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].sentence, "Ty\u{f6} valmis .");
        let with_bom = b"\xEF\xBB\xBFSales up .@positive";
        assert_eq!(
            parse_phrasebank(&decode_text(with_bom)).unwrap()[0].sentence,
            "Sales up ."
        );
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_phrasebank("/definitely/not/here.txt").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.txt"));
    }

    #[test]
    fn label_ids_follow_class_order() {
        assert_eq!(label_to_id(Sentiment::Positive), 0);
        assert_eq!(label_to_id(Sentiment::Negative), 1);
        assert_eq!(label_to_id(Sentiment::Neutral), 2);
        for s in Sentiment::ALL {
            assert_eq!(id_to_label(label_to_id(s)).unwrap(), s);
            assert_eq!(s.letter().sentiment(), s);
        }
        assert!(id_to_label(3).is_err());
        assert_eq!(Sentiment::Positive.letter(), AnswerLetter::A);
        assert_eq!(Sentiment::Negative.letter(), AnswerLetter::B);
        assert_eq!(Sentiment::Neutral.letter(), AnswerLetter::C);
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec {
            test_fraction: 0.2,
            val_fraction_of_rest: 0.0,
            seed: 1,
        };
        let s = split_count(10, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 0, 2));

        let s = split_count(4845, &SplitSpec::default()).unwrap();
        assert_eq!(s.test.len(), 969);
        assert_eq!(s.val.len(), 388);
        assert_eq!(s.train.len(), 4845 - 969 - 388);
    }

    #[test]
    fn split_rejects_bad_fractions_and_empty_splits() {
        let mut spec = SplitSpec {
            test_fraction: 1.0,
            ..SplitSpec::default()
        };
        assert!(split_count(10, &spec).is_err());
        spec.test_fraction = 0.2;
        spec.val_fraction_of_rest = -0.1;
        assert!(split_count(10, &spec).is_err());
        // 0.2 * 2 rounds to 0 test examples
        assert!(split_count(2, &SplitSpec::default()).is_err());
        assert!(split_count(0, &SplitSpec::default()).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let spec = SplitSpec::default();
        let s = split_count(50, &spec).unwrap();
        let m = SplitManifest::new(50, &spec, &s);
        let back = SplitManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(), s);
    }

    proptest! {
        #[test]
        fn split_is_a_seeded_partition(n in 5usize..400, seed in any::<u64>(), tf in 0.05f64..0.6, vf in 0.0f64..0.5) {
            let spec = SplitSpec { test_fraction: tf, val_fraction_of_rest: vf, seed };
            if let Ok(s) = split_count(n, &spec) {
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(s.test.len(), (tf * n as f64).round() as usize);
                prop_assert_eq!(split_count(n, &spec).unwrap(), s);
            }
        }
    }
}
