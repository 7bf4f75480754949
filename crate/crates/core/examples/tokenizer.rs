// Trains a byte-level BPE vocabulary on toy prompts and round-trips text
// through it.
//
// cargo run --example tokenizer

use finsent::dataset::AnswerLetter;
use finsent::prompting::{PromptStyle, PromptTemplate};
use finsent::synthetic::toy_corpus;
use finsent::tokenizer::{
    pre_tokenize, train_bpe, Vocabulary, BOS_ID, EOS_ID, FIRST_MERGE_ID, PAD_ID,
};

pub fn run_example() -> anyhow::Result<()> {
    let template = PromptTemplate::default();
    let corpus: Vec<String> = toy_corpus(60, 1)
        .iter()
        .map(|e| template.build(&e.sentence, PromptStyle::ZeroShot))
        .collect();
    let vocab = train_bpe(&corpus, 600)?;
    println!(
        "vocabulary: {} ids, {} merges",
        vocab.len(),
        vocab.merges().len()
    );
    println!("specials: BOS={BOS_ID} EOS={EOS_ID} PAD={PAD_ID}, first merge id {FIRST_MERGE_ID}");

    let text = "Kone operating profit rose to EUR 13.1 mn .";
    println!("pre-tokens: {:?}", pre_tokenize(text));
    let ids = vocab.encode(text);
    println!("{} bytes -> {} ids: {ids:?}", text.len(), ids.len());
    let pieces: Vec<String> = ids
        .iter()
        .map(|&i| vocab.token(i).unwrap().escaped())
        .collect();
    println!("pieces: {}", pieces.join("|"));
    anyhow::ensure!(vocab.decode(&ids)? == text, "decode(encode(x)) != x");

    for letter in [AnswerLetter::A, AnswerLetter::B, AnswerLetter::C] {
        let id = vocab.answer_id(letter);
        anyhow::ensure!(vocab.encode(letter.as_str()) == [id]);
        println!("answer {} -> id {id}", letter.as_str());
    }

    let reloaded = Vocabulary::from_text(&vocab.to_text())?;
    anyhow::ensure!(reloaded == vocab, "vocabulary text round trip");
    println!(
        "vocabulary file: {} bytes, reload ok",
        vocab.to_text().len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
