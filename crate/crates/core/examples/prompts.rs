// Renders few-shot and zero-shot prompts from the shipped template and
// parses generated answers.
//
// cargo run --example prompts

use finsent::prompting::{build_fewshot_prompt, build_sft_prompt, parse_answer, PromptTemplate};

pub fn run_example() -> anyhow::Result<()> {
    let template = PromptTemplate::default();
    let title = "Finnair passenger numbers fell 4 percent in March .";

    println!(
        "--- few-shot ---\n{}",
        build_fewshot_prompt(&template, title)
    );
    let sft = build_sft_prompt(&template, title);
    println!("--- zero-shot ---\n{sft}");
    anyhow::ensure!(sft.ends_with("Answer:"));

    for generated in ["B", " c.", "Answer: A) positive", "none"] {
        match parse_answer(generated) {
            Ok(label) => println!("{generated:?} -> {label}"),
            Err(e) => println!("{generated:?} -> unparsed ({e})"),
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
