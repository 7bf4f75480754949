// Classification-head training: a 3-way affine head pooled at the EOS of
// `BOS prompt EOS`, trained with gradient accumulation over single samples,
// evaluated with per-example confidences.
//
// cargo run --release --example classhead_training

use finsent::dataset::{split, SplitName, SplitSpec};
use finsent::evaluation::evaluate_classhead;
use finsent::model::{HeadType, ModelConfig};
use finsent::packing::{tokenize_pair, TokenizedExample};
use finsent::prompting::{PromptStyle, PromptTemplate};
use finsent::synthetic::toy_corpus;
use finsent::tokenizer::train_bpe;
use finsent::training::{train_classhead, TrainConfig};

pub fn run_example() -> anyhow::Result<()> {
    let examples = toy_corpus(120, 12);
    let parts = split(&examples, &SplitSpec::default())?;
    let template = PromptTemplate::default();
    let style = PromptStyle::ZeroShot;

    let train_prompts: Vec<String> = parts
        .select(SplitName::Train, &examples)
        .iter()
        .map(|(_, e)| template.build(&e.sentence, style))
        .collect();
    let vocab = train_bpe(&train_prompts, 512)?;
    let tokenize = |which| {
        parts
            .select(which, &examples)
            .into_iter()
            .map(|(i, e)| tokenize_pair(e, i, &vocab, &template, style, 128))
            .collect::<Result<Vec<TokenizedExample>, _>>()
    };
    let train = tokenize(SplitName::Train)?;
    let val = tokenize(SplitName::Val)?;

    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 128,
        head_type: HeadType::Classification,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 8,
        lr_start: 3e-3,
        lr_end: 3e-4,
        micro_batch: 2,
        max_seq_len: 128,
        eval_every: 43,
        ..TrainConfig::toy()
    };
    let outcome = train_classhead::<f32>(&train, &val, &model_cfg, &cfg)?;
    println!("{} steps over {} samples", outcome.total_steps, train.len());
    for (step, acc) in outcome.log.evals() {
        let loss = outcome
            .log
            .losses()
            .find(|(s, _)| *s == step)
            .map_or(f64::NAN, |(_, l)| l);
        println!("  step {step:>4} loss {loss:.4} val accuracy {acc:.3}");
    }

    let model = &outcome.checkpoint.model;
    let test = parts.select(SplitName::Test, &examples);
    let report = evaluate_classhead(model, &template, &test, &vocab)?;
    print!("{}", report.summary_text());
    for r in report.per_example.iter().take(5) {
        println!(
            "  #{:<4} gold {:<8} pred {:<8} p={:.3}",
            r.source_index,
            r.gold.as_str(),
            r.pred.map_or("-", |p| p.as_str()),
            r.confidence.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
