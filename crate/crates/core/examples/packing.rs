// Packs tokenized question/answer pairs into fixed-length sequences and
// prints the labels, position ids and block-diagonal mask of one of them.
//
// cargo run --example packing

use finsent::packing::{build_attention_mask, collate, pack, tokenize_pair};
use finsent::prompting::{PromptStyle, PromptTemplate};
use finsent::synthetic::toy_corpus;
use finsent::tokenizer::{train_bpe, IGNORE_LABEL};

pub fn run_example() -> anyhow::Result<()> {
    let template = PromptTemplate::default();
    let examples = toy_corpus(24, 3);
    let corpus: Vec<String> = examples
        .iter()
        .map(|e| template.build(&e.sentence, PromptStyle::ZeroShot))
        .collect();
    let vocab = train_bpe(&corpus, 700)?;
    let pairs = examples
        .iter()
        .enumerate()
        .map(|(i, e)| tokenize_pair(e, i, &vocab, &template, PromptStyle::ZeroShot, 256))
        .collect::<Result<Vec<_>, _>>()?;
    let lens: Vec<usize> = pairs.iter().map(|p| p.prompt_tokens.len()).collect();
    println!("prompt lengths: {lens:?}");

    let packed = pack(&pairs, 256)?;
    let used: usize = packed.iter().map(|s| s.len()).sum();
    println!(
        "{} pairs -> {} sequences, fill {:.1}%",
        pairs.len(),
        packed.len(),
        100.0 * used as f64 / (packed.len() * 256) as f64
    );
    for (i, s) in packed.iter().enumerate() {
        println!(
            "  seq {i}: len {} pairs {} sources {:?}",
            s.len(),
            s.pair_count,
            s.sources
        );
    }

    let first = &packed[0];
    let counted: Vec<(usize, i64)> = first
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(i, &l)| (i, l))
        .collect();
    println!("counted labels (position, answer id): {counted:?}");

    // Down-sampled view of the mask: one character per 16x16 block.
    let mask = build_attention_mask(&first.segment_ids);
    for i in (0..mask.size()).step_by(16) {
        let row: String = (0..mask.size())
            .step_by(16)
            .map(|j| if mask.allowed(i, j) { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }

    let batch = collate(&packed, true);
    println!(
        "collated batch: {} rows x {} columns",
        batch.tokens.len(),
        batch.tokens[0].len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
