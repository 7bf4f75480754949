// Supervised fine-tuning end to end on a generated corpus: tokenize, pack,
// train with loss on answer tokens only, then evaluate on held-out titles
// and round-trip the checkpoint.
//
// cargo run --release --example sft_training

use finsent::dataset::{split, SplitName, SplitSpec};
use finsent::evaluation::{evaluate_generation, EvalMode};
use finsent::model::{AnyCheckpoint, HeadType, ModelConfig};
use finsent::packing::{pack, tokenize_pair, TokenizedExample};
use finsent::prompting::{PromptStyle, PromptTemplate};
use finsent::synthetic::toy_corpus;
use finsent::tokenizer::train_bpe;
use finsent::training::{train_sft, TrainConfig};

pub fn run_example() -> anyhow::Result<()> {
    let examples = toy_corpus(120, 11);
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
    let packed = pack(&train, 128)?;
    println!(
        "{} train pairs in {} packed sequences, {} val",
        train.len(),
        packed.len(),
        val.len()
    );

    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 128,
        head_type: HeadType::Lm,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 12,
        lr_start: 3e-3,
        lr_end: 3e-4,
        micro_batch: 2,
        max_seq_len: 128,
        eval_every: 40,
        ..TrainConfig::toy()
    };
    let outcome = train_sft::<f32>(&packed, &val, &model_cfg, &cfg)?;
    for (step, loss) in outcome.log.losses().filter(|(s, _)| s % 40 == 0) {
        println!("  step {step:>4} loss {loss:.4}");
    }
    for (step, acc) in outcome.log.evals() {
        println!("  step {step:>4} val accuracy {acc:.3}");
    }
    let (best_step, best) = outcome.log.best_eval().unwrap_or_default();
    println!("best checkpoint: step {best_step}, val accuracy {best:.3}");

    let bytes = outcome.checkpoint.to_bytes();
    let AnyCheckpoint::F32(reloaded) = AnyCheckpoint::from_bytes(&bytes)? else {
        anyhow::bail!("expected a float32 checkpoint");
    };
    println!("checkpoint: {} bytes, step {}", bytes.len(), reloaded.step);

    let test = parts.select(SplitName::Test, &examples);
    let report = evaluate_generation(&reloaded.model, EvalMode::Sft, &template, &test, &vocab)?;
    print!("{}", report.summary_text());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
