//! Accuracy reports for few-shot generation, SFT generation and the
//! classification head.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledExample, Sentiment};
use crate::model::{argmax, softmax, Float, HeadType, Model, ModelError};
use crate::prompting::{PromptStyle, PromptTemplate};
use crate::tokenizer::{Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("mode {mode} needs a model with a {expected} head, checkpoint has {found}")]
    HeadMismatch {
        mode: EvalMode,
        expected: HeadType,
        found: HeadType,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Fewshot,
    Sft,
    Classhead,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Fewshot, EvalMode::Sft, EvalMode::Classhead];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Fewshot => "fewshot",
            EvalMode::Sft => "sft",
            EvalMode::Classhead => "classhead",
        }
    }

    /// Row label in comparison tables.
    pub fn method(self) -> &'static str {
        match self {
            EvalMode::Fewshot => "Base",
            EvalMode::Sft => "SFT",
            EvalMode::Classhead => "ClassHead",
        }
    }

    pub fn head_type(self) -> HeadType {
        match self {
            EvalMode::Classhead => HeadType::Classification,
            _ => HeadType::Lm,
        }
    }

    pub fn prompt_style(self) -> PromptStyle {
        match self {
            EvalMode::Fewshot => PromptStyle::FewShot,
            _ => PromptStyle::ZeroShot,
        }
    }

    pub fn check_head(self, found: HeadType) -> Result<(), EvalError> {
        if found != self.head_type() {
            return Err(EvalError::HeadMismatch {
                mode: self,
                expected: self.head_type(),
                found,
            });
        }
        Ok(())
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fewshot" => Ok(EvalMode::Fewshot),
            "sft" => Ok(EvalMode::Sft),
            "classhead" => Ok(EvalMode::Classhead),
            other => Err(format!(
                "unknown mode {other:?} (expected fewshot, sft or classhead)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub source_index: usize,
    pub gold: Sentiment,
    /// `None` when no answer could be produced.
    pub pred: Option<Sentiment>,
    /// Largest class probability, class-head mode only.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Rows are gold, columns predicted, both in positive, negative,
    /// neutral order. Unparsed answers are not in the matrix, so its sum
    /// plus `unparsed_count` is `n`.
    pub confusion: [[usize; 3]; 3],
    pub unparsed_count: usize,
    pub per_example: Vec<ExampleResult>,
}

impl EvalReport {
    /// Aggregates per-example results, ordering them by source index.
    pub fn from_results(
        mode: EvalMode,
        mut results: Vec<ExampleResult>,
    ) -> Result<Self, EvalError> {
        if results.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        results.sort_by_key(|r| r.source_index);
        let mut confusion = [[0; 3]; 3];
        let mut correct = 0;
        let mut unparsed = 0;
        for r in &results {
            match r.pred {
                Some(p) => {
                    confusion[r.gold.class_id()][p.class_id()] += 1;
                    if p == r.gold {
                        correct += 1;
                    }
                }
                None => unparsed += 1,
            }
        }
        let n = results.len();
        Ok(Self {
            mode,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            confusion,
            unparsed_count: unparsed,
            per_example: results,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode      {}", self.mode);
        let _ = writeln!(s, "n         {}", self.n);
        let _ = writeln!(s, "correct   {}", self.correct);
        let _ = writeln!(s, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(s, "unparsed  {}", self.unparsed_count);
        let _ = writeln!(s);
        let _ = writeln!(s, "gold \\ pred  positive  negative   neutral");
        for (i, row) in self.confusion.iter().enumerate() {
            let gold = Sentiment::from_class_id(i).expect("three classes");
            let _ = writeln!(
                s,
                "{:<11}{:>10}{:>10}{:>10}",
                gold.as_str(),
                row[0],
                row[1],
                row[2]
            );
        }
        s
    }
}

/// Produces an answer-letter token for a tokenized prompt.
pub trait AnswerGenerator: Sync {
    fn answer(&self, prompt_tokens: &[u32]) -> Result<u32, EvalError>;

    /// Longest prompt the generator accepts, not counting BOS and EOS.
    fn max_prompt_len(&self) -> usize {
        usize::MAX
    }
}

/// Produces three class logits for a `BOS q EOS` sequence.
pub trait ClassScorer: Sync {
    fn class_logits(&self, framed: &[u32]) -> Result<[f64; 3], EvalError>;

    fn max_len(&self) -> usize {
        usize::MAX
    }
}

impl<T: Float> AnswerGenerator for Model<T> {
    fn answer(&self, prompt_tokens: &[u32]) -> Result<u32, EvalError> {
        Ok(self.generate_answer(prompt_tokens)?)
    }

    fn max_prompt_len(&self) -> usize {
        self.config.max_seq_len - 2
    }
}

impl<T: Float> ClassScorer for Model<T> {
    fn class_logits(&self, framed: &[u32]) -> Result<[f64; 3], EvalError> {
        Ok(self.forward_cls(framed)?.map(|x| x.as_f64()))
    }

    fn max_len(&self) -> usize {
        self.config.max_seq_len
    }
}

/// Few-shot or SFT evaluation: prompt, constrained answer, letter to label.
/// Prompts longer than the generator accepts count as unparsed.
pub fn evaluate_generation(
    generator: &impl AnswerGenerator,
    mode: EvalMode,
    template: &PromptTemplate,
    testset: &[(usize, &LabeledExample)],
    vocab: &Vocabulary,
) -> Result<EvalReport, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let results = testset
        .par_iter()
        .map(|&(source_index, ex)| {
            let prompt = vocab.encode(&template.build(&ex.sentence, mode.prompt_style()));
            let pred = if prompt.len() > generator.max_prompt_len() {
                None
            } else {
                Vocabulary::letter_of(generator.answer(&prompt)?).map(|l| l.sentiment())
            };
            Ok(ExampleResult {
                source_index,
                gold: ex.label,
                pred,
                confidence: None,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_results(mode, results)
}

/// Class-head evaluation on `BOS prompt EOS`; the prediction is the argmax
/// (ties to the lowest class id) and the confidence its softmax probability.
pub fn evaluate_classhead(
    scorer: &impl ClassScorer,
    template: &PromptTemplate,
    testset: &[(usize, &LabeledExample)],
    vocab: &Vocabulary,
) -> Result<EvalReport, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let results = testset
        .par_iter()
        .map(|&(source_index, ex)| {
            let mut framed = vec![BOS_ID];
            framed.extend(vocab.encode(&template.build(&ex.sentence, PromptStyle::ZeroShot)));
            framed.push(EOS_ID);
            let (pred, confidence) = if framed.len() > scorer.max_len() {
                (None, None)
            } else {
                let logits = scorer.class_logits(&framed)?;
                let probs = softmax(&logits);
                let k = argmax(&logits);
                (Sentiment::from_class_id(k).ok(), Some(probs[k]))
            };
            Ok(ExampleResult {
                source_index,
                gold: ex.label,
                pred,
                confidence,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_results(EvalMode::Classhead, results)
}

/// Published 7B and baseline accuracies, shown for orientation only.
pub const REFERENCE_ROWS: &[(&str, f64)] = &[
    ("LLaMA2-7B few-shot (Base)", 0.68),
    ("LLaMA2-7B SFT", 0.90),
    ("LLaMA2-7B ClassHead", 0.90),
    ("LSTM", 0.71),
    ("LSTM with ELMo", 0.75),
    ("ULMFit", 0.83),
    ("LPS", 0.71),
    ("HSC", 0.71),
    ("FinBERT", 0.86),
];

pub const REFERENCE_LABEL: &str = "published reference, not reproduced here";

/// Fixed-width accuracy table, one row per report in mode order, optionally
/// followed by the reference block.
pub fn compare_report(reports: &[EvalReport], include_reference: bool) -> String {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.mode);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:<11}{:>7}{:>9}{:>10}",
        "method", "mode", "n", "correct", "accuracy"
    );
    for r in sorted {
        let _ = writeln!(
            s,
            "{:<12}{:<11}{:>7}{:>9}{:>10.4}",
            r.mode.method(),
            r.mode.as_str(),
            r.n,
            r.correct,
            r.accuracy
        );
    }
    if include_reference {
        let _ = writeln!(s);
        let _ = writeln!(s, "{REFERENCE_LABEL}");
        for (name, acc) in REFERENCE_ROWS {
            let _ = writeln!(s, "{name:<30}{acc:>10.2}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ANSWER_IDS;

    fn data() -> (Vec<LabeledExample>, Vocabulary) {
        let ex = crate::synthetic::toy_corpus(30, 4);
        let vocab = {
            let corpus: Vec<&str> = ex.iter().map(|e| e.sentence.as_str()).collect();
            crate::tokenizer::train_bpe(&corpus, 400).unwrap()
        };
        (ex, vocab)
    }

    struct Fixed(u32);

    impl AnswerGenerator for Fixed {
        fn answer(&self, _: &[u32]) -> Result<u32, EvalError> {
            Ok(self.0)
        }
    }

    struct Logits([f64; 3]);

    impl ClassScorer for Logits {
        fn class_logits(&self, _: &[u32]) -> Result<[f64; 3], EvalError> {
            Ok(self.0)
        }
    }

    #[test]
    fn constant_answer_accounts_correctly() {
        let (ex, vocab) = data();
        let test: Vec<(usize, &LabeledExample)> = ex.iter().enumerate().rev().collect();
        let t = PromptTemplate::default();
        let r =
            evaluate_generation(&Fixed(ANSWER_IDS[2]), EvalMode::Sft, &t, &test, &vocab).unwrap();
        assert_eq!(r.n, 30);
        assert_eq!(r.correct, 10);
        assert_eq!(r.unparsed_count, 0);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 30);
        assert_eq!(r.confusion[0][2], 10);
        assert!(r
            .per_example
            .windows(2)
            .all(|w| w[0].source_index < w[1].source_index));
        assert_eq!(r.accuracy * 30.0, 10.0);
    }

    #[test]
    fn non_answer_tokens_are_unparsed() {
        let (ex, vocab) = data();
        let test: Vec<(usize, &LabeledExample)> = ex.iter().enumerate().collect();
        let r = evaluate_generation(
            &Fixed(65),
            EvalMode::Fewshot,
            &PromptTemplate::default(),
            &test,
            &vocab,
        )
        .unwrap();
        assert_eq!(r.unparsed_count, 30);
        assert_eq!(r.correct, 0);
    }

    #[test]
    fn classhead_confidence_and_ties() {
        let (ex, vocab) = data();
        let test: Vec<(usize, &LabeledExample)> = ex.iter().enumerate().collect();
        let t = PromptTemplate::default();
        let r = evaluate_classhead(&Logits([1.0, 3.0, 3.0]), &t, &test, &vocab).unwrap();
        assert!(r
            .per_example
            .iter()
            .all(|e| e.pred == Some(Sentiment::Negative)));
        let c = r.per_example[0].confidence.unwrap();
        let expected = 3f64.exp() / (1f64.exp() + 2.0 * 3f64.exp());
        assert!((c - expected).abs() < 1e-12);
        let row_sums: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![10, 10, 10]);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let (_, vocab) = data();
        let t = PromptTemplate::default();
        assert!(matches!(
            evaluate_generation(&Fixed(ANSWER_IDS[0]), EvalMode::Sft, &t, &[], &vocab),
            Err(EvalError::EmptyTestSet)
        ));
        assert!(matches!(
            evaluate_classhead(&Logits([0.0; 3]), &t, &[], &vocab),
            Err(EvalError::EmptyTestSet)
        ));
    }

    #[test]
    fn report_json_round_trip_and_table() {
        let (ex, vocab) = data();
        let test: Vec<(usize, &LabeledExample)> = ex.iter().enumerate().collect();
        let t = PromptTemplate::default();
        let r = evaluate_classhead(&Logits([0.2, 0.1, 0.0]), &t, &test, &vocab).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);

        let table = compare_report(std::slice::from_ref(&r), false);
        assert_eq!(table.lines().count(), 2);
        assert!(table
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("ClassHead   classhead"));
        let with_ref = compare_report(&[r], true);
        assert!(with_ref.contains(REFERENCE_LABEL));
        assert!(with_ref
            .lines()
            .any(|l| l.starts_with("FinBERT") && l.ends_with("0.86")));
    }

    #[test]
    fn mode_parsing_and_heads() {
        for m in EvalMode::ALL {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
        }
        assert!(EvalMode::Sft.check_head(HeadType::Classification).is_err());
        assert!(EvalMode::Classhead
            .check_head(HeadType::Classification)
            .is_ok());
    }
}
