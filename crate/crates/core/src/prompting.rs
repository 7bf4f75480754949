//! Single-choice prompt construction and answer parsing.
//!
//! A template file is plain UTF-8 with `#`-prefixed section headers:
//!
//! ```text
//! #finsent-template v1
//! #instruction
//! <preamble lines>
//! #exemplar A
//! <title>
//! #exemplar B
//! <title>
//! #exemplar C
//! <title>
//! #question
//! <question block containing {{title}}, ending with "Answer:">
//! ```
//!
//! Blocks are joined by one blank line. An exemplar block is the question
//! block for its title followed directly by its letter (`Answer:A`).

use std::path::Path;

use crate::dataset::{AnswerLetter, Sentiment};

pub const TITLE_PLACEHOLDER: &str = "{{title}}";
pub const ANSWER_SUFFIX: &str = "Answer:";
const TEMPLATE_HEADER: &str = "#finsent-template v1";

/// The template shipped with the crate.
pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template_v1.txt");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no A/B/C answer found in {0:?}")]
    NoAnswerFound(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// Whether each prompt carries the three worked exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptStyle {
    #[default]
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub instruction: String,
    pub exemplars: Vec<(String, AnswerLetter)>,
    pub question_format: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }
}

impl PromptTemplate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let invalid = |m: &str| PromptError::InvalidTemplate(m.to_owned());
        let mut lines = text.lines();
        if lines.next() != Some(TEMPLATE_HEADER) {
            return Err(invalid("missing `#finsent-template v1` header"));
        }

        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('#') {
                sections.push((name.to_owned(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else {
                return Err(invalid("text before the first section"));
            }
        }
        let body = |lines: &[&str]| {
            let mut lines = lines.to_vec();
            while lines.last().is_some_and(|l| l.is_empty()) {
                lines.pop();
            }
            lines.join("\n")
        };

        let mut instruction = None;
        let mut exemplars = Vec::new();
        let mut question_format = None;
        for (name, lines) in &sections {
            match name.as_str() {
                "instruction" => instruction = Some(body(lines)),
                "question" => question_format = Some(body(lines)),
                other => {
                    let letter = match other {
                        "exemplar A" => AnswerLetter::A,
                        "exemplar B" => AnswerLetter::B,
                        "exemplar C" => AnswerLetter::C,
                        _ => return Err(invalid(&format!("unknown section #{other}"))),
                    };
                    let title = body(lines);
                    if title.is_empty() || title.contains('\n') {
                        return Err(invalid("exemplar must be a single non-empty title line"));
                    }
                    exemplars.push((title, letter));
                }
            }
        }

        let letters: Vec<AnswerLetter> = exemplars.iter().map(|(_, l)| *l).collect();
        if letters != AnswerLetter::ALL {
            return Err(invalid("exemplars must be exactly A, B, C in that order"));
        }
        let question_format = question_format.ok_or_else(|| invalid("missing #question"))?;
        if question_format.matches(TITLE_PLACEHOLDER).count() != 1 {
            return Err(invalid("question must contain {{title}} exactly once"));
        }
        if !question_format.ends_with(ANSWER_SUFFIX) {
            return Err(invalid("question must end with `Answer:`"));
        }
        Ok(Self {
            instruction: instruction.ok_or_else(|| invalid("missing #instruction"))?,
            exemplars,
            question_format,
        })
    }

    pub fn render_question(&self, title: &str) -> String {
        self.question_format.replacen(TITLE_PLACEHOLDER, title, 1)
    }

    pub fn build(&self, title: &str, style: PromptStyle) -> String {
        match style {
            PromptStyle::ZeroShot => build_sft_prompt(self, title),
            PromptStyle::FewShot => build_fewshot_prompt(self, title),
        }
    }
}

/// Instruction, the three answered exemplars, then the open question.
pub fn build_fewshot_prompt(template: &PromptTemplate, title: &str) -> String {
    let mut blocks = vec![template.instruction.clone()];
    for (exemplar, letter) in &template.exemplars {
        blocks.push(format!(
            "{}{}",
            template.render_question(exemplar),
            letter.as_str()
        ));
    }
    blocks.push(template.render_question(title));
    blocks.join("\n\n")
}

/// Instruction followed by the single open question.
pub fn build_sft_prompt(template: &PromptTemplate, title: &str) -> String {
    format!(
        "{}\n\n{}",
        template.instruction,
        template.render_question(title)
    )
}

/// First standalone `A`, `B` or `C` (either case), i.e. a letter with no
/// alphanumeric neighbour, mapped A to positive, B to negative, C to neutral.
pub fn parse_answer(generated: &str) -> Result<Sentiment, PromptError> {
    let chars: Vec<char> = generated.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let Some(letter) = AnswerLetter::from_char(c) else {
            continue;
        };
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        if before_ok && after_ok {
            return Ok(letter.sentiment());
        }
    }
    Err(PromptError::NoAnswerFound(generated.to_owned()))
}
