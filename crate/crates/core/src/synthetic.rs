//! Deterministic toy financial-news corpus with lexical sentiment cues.
//!
//! Each sentence names a company and a metric and carries one cue phrase
//! whose polarity decides the label, so a small model can learn the task
//! from a few hundred lines.

use crate::dataset::{LabeledExample, Sentiment};
use crate::rng::SplitMix64;

const COMPANIES: &[&str] = &[
    "Nokia",
    "Elcoteq",
    "Componenta",
    "Aspo",
    "Raute",
    "Stora Enso",
    "Finnair",
    "Kone",
    "Outokumpu",
    "Wartsila",
    "Talvivaara",
    "Sanoma",
    "Ruukki",
    "Tieto",
    "Fiskars",
    "Orion",
];

const METRICS: &[&str] = &[
    "operating profit",
    "net sales",
    "order intake",
    "earnings per share",
    "quarterly revenue",
    "pretax profit",
    "market share",
    "cash flow",
];

const POSITIVE: &[&str] = &[
    "rose sharply to",
    "increased to",
    "jumped to",
    "improved to",
    "climbed to",
    "grew strongly to",
];

const NEGATIVE: &[&str] = &[
    "fell to",
    "dropped to",
    "decreased to",
    "slumped to",
    "declined to",
    "plunged to",
];

const NEUTRAL: &[&str] = &[
    "was reported at",
    "totalled",
    "stood at",
    "amounted to",
    "was recorded at",
    "was",
];

const PERIODS: &[&str] = &[
    "in 2007",
    "in the first quarter",
    "last year",
    "in January-June",
    "in 2008",
    "for the period",
];

/// Class counts of the 4845-sentence fixture, proportioned like the
/// 50%-agreement PhraseBank release.
pub const PHRASEBANK_COUNTS: [(Sentiment, usize); 3] = [
    (Sentiment::Positive, 1363),
    (Sentiment::Negative, 604),
    (Sentiment::Neutral, 2878),
];

fn pick<'a>(rng: &mut SplitMix64, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len() as u64) as usize]
}

/// One sentence carrying a cue for `label`.
pub fn sentence(rng: &mut SplitMix64, label: Sentiment) -> String {
    let company = pick(rng, COMPANIES);
    let metric = pick(rng, METRICS);
    let cue = match label {
        Sentiment::Positive => pick(rng, POSITIVE),
        Sentiment::Negative => pick(rng, NEGATIVE),
        Sentiment::Neutral => pick(rng, NEUTRAL),
    };
    let whole = rng.below(200);
    let frac = rng.below(10);
    let period = pick(rng, PERIODS);
    format!("{company} {metric} {cue} EUR {whole}.{frac} mn {period} .")
}

/// `n` examples with labels cycling positive, negative, neutral.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = SplitMix64::new(seed);
    let labels = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];
    (0..n)
        .map(|i| {
            let label = labels[i % 3];
            LabeledExample {
                sentence: sentence(&mut rng, label),
                label,
            }
        })
        .collect()
}

/// 4845 examples with the PhraseBank class counts, labels interleaved in a
/// seeded order.
pub fn phrasebank_like(seed: u64) -> Vec<LabeledExample> {
    let mut labels: Vec<Sentiment> = PHRASEBANK_COUNTS
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
        .collect();
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .map(|label| LabeledExample {
            sentence: sentence(&mut rng, label),
            label,
        })
        .collect()
}

/// Renders examples as `sentence@label` lines.
pub fn to_phrasebank_text(examples: &[LabeledExample]) -> String {
    examples.iter().map(|e| e.to_line() + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_phrasebank;

    #[test]
    fn fixture_matches_phrasebank_counts() {
        let ex = phrasebank_like(1);
        assert_eq!(ex.len(), 4845);
        for (s, n) in PHRASEBANK_COUNTS {
            assert_eq!(ex.iter().filter(|e| e.label == s).count(), n);
        }
    }

    #[test]
    fn text_round_trips_through_parser() {
        let ex = toy_corpus(30, 3);
        assert_eq!(parse_phrasebank(&to_phrasebank_text(&ex)).unwrap(), ex);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(toy_corpus(10, 5), toy_corpus(10, 5));
        assert_ne!(toy_corpus(10, 5), toy_corpus(10, 6));
    }
}
