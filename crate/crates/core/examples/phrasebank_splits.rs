// Loads a PhraseBank file (or the generated 4845-line fixture), splits it
// 80/20 with a 10% validation carve-out and prints the split manifest.
//
// FINSENT_PHRASEBANK=/path/Sentences_50Agree.txt cargo run --example phrasebank_splits

use finsent::dataset::{load_phrasebank, split, Sentiment, SplitManifest, SplitSpec};
use finsent::synthetic::phrasebank_like;

pub fn run_example() -> anyhow::Result<()> {
    let examples = match std::env::var_os("FINSENT_PHRASEBANK") {
        Some(path) => {
            println!("loading {}", path.to_string_lossy());
            load_phrasebank(&path)?
        }
        None => {
            println!("FINSENT_PHRASEBANK not set, using the generated fixture");
            phrasebank_like(7)
        }
    };
    println!("{} examples", examples.len());
    for s in [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral] {
        let n = examples.iter().filter(|e| e.label == s).count();
        println!(
            "  {:<9}{n:>5}  {:.1}%",
            s.as_str(),
            100.0 * n as f64 / examples.len() as f64
        );
    }

    let spec = SplitSpec::default();
    let parts = split(&examples, &spec)?;
    println!(
        "train {} / val {} / test {} (seed {})",
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        spec.seed
    );
    anyhow::ensure!(
        split(&examples, &spec)? == parts,
        "split is not reproducible"
    );

    let other = split(&examples, &SplitSpec { seed: 43, ..spec })?;
    let overlap = parts.test.iter().filter(|i| other.test.contains(i)).count();
    println!(
        "seed 43 shares {overlap} of {} test indices",
        parts.test.len()
    );

    let manifest = SplitManifest::new(examples.len(), &spec, &parts).to_json();
    println!(
        "splits.json ({} bytes): {} ...",
        manifest.len(),
        &manifest[..120]
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
