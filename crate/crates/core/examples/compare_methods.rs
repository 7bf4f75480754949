// Few-shot base model, SFT and classification head on one split, reported
// side by side in the same table `finsent eval` writes.
//
// cargo run --release --example compare_methods

use finsent::dataset::{split, SplitName, SplitSpec};
use finsent::evaluation::{compare_report, evaluate_classhead, evaluate_generation, EvalMode};
use finsent::model::{HeadType, Model, ModelConfig};
use finsent::packing::{pack, tokenize_pair, TokenizedExample};
use finsent::prompting::{PromptStyle, PromptTemplate};
use finsent::synthetic::toy_corpus;
use finsent::tokenizer::train_bpe;
use finsent::training::{train_classhead, train_sft, TrainConfig};

const SEQ: usize = 320;

pub fn run_example() -> anyhow::Result<()> {
    let examples = toy_corpus(150, 21);
    let parts = split(&examples, &SplitSpec::default())?;
    let template = PromptTemplate::default();

    // Few-shot prompts are part of the tokenizer corpus so they stay short.
    let corpus: Vec<String> = parts
        .select(SplitName::Train, &examples)
        .iter()
        .flat_map(|(_, e)| {
            [PromptStyle::ZeroShot, PromptStyle::FewShot].map(|s| template.build(&e.sentence, s))
        })
        .collect();
    let vocab = train_bpe(&corpus, 1024)?;
    let tokenize = |which| {
        parts
            .select(which, &examples)
            .into_iter()
            .map(|(i, e)| tokenize_pair(e, i, &vocab, &template, PromptStyle::ZeroShot, SEQ))
            .collect::<Result<Vec<TokenizedExample>, _>>()
    };
    let train = tokenize(SplitName::Train)?;
    let val = tokenize(SplitName::Val)?;
    let test = parts.select(SplitName::Test, &examples);

    let lm_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: SEQ,
        ..ModelConfig::default()
    };
    let cls_cfg = ModelConfig {
        head_type: HeadType::Classification,
        ..lm_cfg.clone()
    };
    let cfg = TrainConfig {
        epochs: 6,
        lr_start: 3e-3,
        lr_end: 3e-4,
        micro_batch: 2,
        max_seq_len: SEQ,
        eval_every: 50,
        ..TrainConfig::toy()
    };

    // A from-scratch model has no pretrained knowledge, so its few-shot row
    // sits near chance.
    let base = Model::<f32>::init(lm_cfg.clone())?;
    let fewshot = evaluate_generation(&base, EvalMode::Fewshot, &template, &test, &vocab)?;

    let sft = train_sft::<f32>(&pack(&train, SEQ)?, &val, &lm_cfg, &cfg)?;
    let sft_report = evaluate_generation(
        &sft.checkpoint.model,
        EvalMode::Sft,
        &template,
        &test,
        &vocab,
    )?;

    let cls = train_classhead::<f32>(&train, &val, &cls_cfg, &cfg)?;
    let cls_report = evaluate_classhead(&cls.checkpoint.model, &template, &test, &vocab)?;

    println!("few-shot unparsed: {}", fewshot.unparsed_count);
    print!(
        "{}",
        compare_report(&[fewshot, sft_report, cls_report], true)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
