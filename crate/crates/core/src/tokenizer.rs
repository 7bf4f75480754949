//! Byte-level BPE tokenizer with reserved special tokens and protected
//! single-token answer letters.
//!
//! Id layout:
//!
//! | ids          | tokens                                   |
//! |--------------|------------------------------------------|
//! | `0..256`     | raw bytes                                |
//! | `256..259`   | `<bos>`, `<eos>`, `<pad>`                |
//! | `259..262`   | answer letters `A`, `B`, `C`             |
//! | `262..`      | merged byte sequences, in merge order    |
//!
//! Text is first cut into pre-token chunks (letter runs, digit runs,
//! punctuation runs and whitespace runs, with a single leading space glued
//! onto the following word). A chunk that is exactly `A`, `B` or `C` maps to
//! the dedicated answer id; every other chunk is encoded as bytes and then
//! merged. Merges never cross chunk boundaries.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataset::AnswerLetter;

pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
pub const PAD_ID: u32 = 258;
pub const ANSWER_IDS: [u32; 3] = [259, 260, 261];
pub const FIRST_MERGE_ID: u32 = 262;
/// Label value for positions that do not contribute to the loss.
pub const IGNORE_LABEL: i64 = -1;

pub const NUM_SPECIAL: usize = 3;
pub const MIN_VOCAB_SIZE: usize = 256 + NUM_SPECIAL + 3;

const VOCAB_HEADER: &str = "finsent-vocab v1";
const MERGES_SENTINEL: &str = "#merges";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab_size {got} is below the minimum of {min}")]
    VocabTooSmall { got: usize, min: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("special token id {0} cannot be decoded to text")]
    SpecialId(u32),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("vocabulary file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialToken {
    Bos,
    Eos,
    Pad,
}

impl SpecialToken {
    fn name(self) -> &'static str {
        match self {
            SpecialToken::Bos => "bos",
            SpecialToken::Eos => "eos",
            SpecialToken::Pad => "pad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Bytes(Vec<u8>),
    Special(SpecialToken),
    Answer(AnswerLetter),
}

impl Token {
    /// Escaped form used in the vocabulary file. Bytes `0x21..=0x7E` other
    /// than `\` and `<` are written literally, `\` as `\\`, everything else as
    /// `\xHH`. Special and answer tokens are written as `<bos>`, `<A>`, ...,
    /// which cannot collide with an escaped byte token.
    pub fn escaped(&self) -> String {
        match self {
            Token::Bytes(bytes) => escape_bytes(bytes),
            Token::Special(s) => format!("<{}>", s.name()),
            Token::Answer(l) => format!("<{}>", l.as_str()),
        }
    }

    fn parse_escaped(s: &str) -> Option<Token> {
        match s {
            "<bos>" => return Some(Token::Special(SpecialToken::Bos)),
            "<eos>" => return Some(Token::Special(SpecialToken::Eos)),
            "<pad>" => return Some(Token::Special(SpecialToken::Pad)),
            "<A>" => return Some(Token::Answer(AnswerLetter::A)),
            "<B>" => return Some(Token::Answer(AnswerLetter::B)),
            "<C>" => return Some(Token::Answer(AnswerLetter::C)),
            _ => {}
        }
        unescape_bytes(s).map(Token::Bytes)
    }
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'<' => out.push_str("\\x3C"),
            0x21..=0x7E => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02X}");
            }
        }
    }
    out
}

fn unescape_bytes(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        match raw[i] {
            b'\\' => match raw.get(i + 1)? {
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                }
                b'x' => {
                    let hex = std::str::from_utf8(raw.get(i + 2..i + 4)?).ok()?;
                    out.push(u8::from_str_radix(hex, 16).ok()?);
                    i += 4;
                }
                _ => return None,
            },
            b @ 0x21..=0x7E if b != b'<' => {
                out.push(b);
                i += 1;
            }
            _ => return None,
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Splits text into pre-token chunks. Concatenating the chunks gives back the
/// input exactly.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let (_, c) = chars[i];
        let mut j = i + 1;
        if classify(c) == CharClass::Space {
            let glue_space =
                c == ' ' && j < chars.len() && classify(chars[j].1) != CharClass::Space;
            if glue_space {
                let class = classify(chars[j].1);
                while j < chars.len() && classify(chars[j].1) == class {
                    j += 1;
                }
            } else {
                while j < chars.len() && classify(chars[j].1) == CharClass::Space {
                    j += 1;
                }
                // leave a final plain space to lead the next word
                if j < chars.len() && j - i > 1 && chars[j - 1].1 == ' ' {
                    j -= 1;
                }
            }
        } else {
            let class = classify(c);
            while j < chars.len() && classify(chars[j].1) == class {
                j += 1;
            }
        }
        let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
        chunks.push(&text[start..end]);
        i = j;
    }
    chunks
}

fn protected_answer(chunk: &str) -> Option<AnswerLetter> {
    match chunk {
        "A" => Some(AnswerLetter::A),
        "B" => Some(AnswerLetter::B),
        "C" => Some(AnswerLetter::C),
        _ => None,
    }
}

/// Immutable trained vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<Token>,
    token_to_id: HashMap<Token, u32>,
    merges: Vec<(u32, u32)>,
    merge_ranks: HashMap<(u32, u32), u32>,
}

impl Vocabulary {
    fn base() -> Self {
        let mut id_to_token: Vec<Token> = (0..=255u8).map(|b| Token::Bytes(vec![b])).collect();
        id_to_token.push(Token::Special(SpecialToken::Bos));
        id_to_token.push(Token::Special(SpecialToken::Eos));
        id_to_token.push(Token::Special(SpecialToken::Pad));
        for l in AnswerLetter::ALL {
            id_to_token.push(Token::Answer(l));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            id_to_token,
            token_to_id,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.token_bytes(left).to_vec();
        bytes.extend_from_slice(self.token_bytes(right));
        let id = self.id_to_token.len() as u32;
        let token = Token::Bytes(bytes);
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.merge_ranks
            .insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        id
    }

    fn token_bytes(&self, id: u32) -> &[u8] {
        match &self.id_to_token[id as usize] {
            Token::Bytes(b) => b,
            other => panic!("token {other:?} has no byte form"),
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.id_to_token.get(id as usize)
    }

    pub fn id_of(&self, token: &Token) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn bos_id(&self) -> u32 {
        BOS_ID
    }

    pub fn eos_id(&self) -> u32 {
        EOS_ID
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn ignore_label(&self) -> i64 {
        IGNORE_LABEL
    }

    pub fn answer_id(&self, letter: AnswerLetter) -> u32 {
        ANSWER_IDS[letter as usize]
    }

    pub fn is_special(id: u32) -> bool {
        (BOS_ID..=PAD_ID).contains(&id)
    }

    pub fn letter_of(id: u32) -> Option<AnswerLetter> {
        ANSWER_IDS
            .iter()
            .position(|&a| a == id)
            .map(|i| AnswerLetter::ALL[i])
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            match protected_answer(chunk) {
                Some(letter) => out.push(self.answer_id(letter)),
                None => out.extend(self.encode_chunk(chunk.as_bytes())),
            }
        }
        out
    }

    fn encode_chunk(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0], w[1]))
                        .map(|&r| (r, w[0], w[1]))
                })
                .min();
            let Some((rank, left, right)) = best else {
                break;
            };
            let new_id = FIRST_MERGE_ID + rank;
            ids = merge_pair(&ids, left, right, new_id);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.id_to_token.get(id as usize) {
                None => return Err(TokenizerError::UnknownId(id)),
                Some(Token::Special(_)) => return Err(TokenizerError::SpecialId(id)),
                Some(Token::Answer(l)) => bytes.push(l.as_char() as u8),
                Some(Token::Bytes(b)) => bytes.extend_from_slice(b),
            }
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// Serializes to the versioned plain-text vocabulary format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for (id, token) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{}", token.escaped());
        }
        out.push_str(MERGES_SENTINEL);
        out.push('\n');
        for &(l, r) in &self.merges {
            let _ = writeln!(
                out,
                "{} {}",
                self.id_to_token[l as usize].escaped(),
                self.id_to_token[r as usize].escaped()
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: String| TokenizerError::Format { line, message };
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, VOCAB_HEADER)) => {}
            Some((n, other)) => return Err(err(n, format!("bad header {other:?}"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut tokens = Vec::new();
        let mut saw_sentinel = false;
        for (n, line) in lines.by_ref() {
            if line == MERGES_SENTINEL {
                saw_sentinel = true;
                break;
            }
            let (id, esc) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "expected `<id>\\t<token>`".into()))?;
            let id: usize = id.parse().map_err(|_| err(n, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(err(n, format!("expected id {}, got {id}", tokens.len())));
            }
            let token =
                Token::parse_escaped(esc).ok_or_else(|| err(n, format!("bad token {esc:?}")))?;
            tokens.push((n, token));
        }
        if !saw_sentinel {
            return Err(err(0, "missing #merges section".into()));
        }

        let mut vocab = Self::base();
        if tokens.len() < vocab.len() {
            return Err(err(
                0,
                format!(
                    "only {} tokens, need at least {}",
                    tokens.len(),
                    vocab.len()
                ),
            ));
        }
        for (id, (n, token)) in tokens.iter().enumerate().take(vocab.len()) {
            if *token != vocab.id_to_token[id] {
                return Err(err(*n, format!("reserved id {id} holds {token:?}")));
            }
        }

        let merge_lines: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty()).collect();
        if merge_lines.len() != tokens.len() - vocab.len() {
            return Err(err(
                0,
                format!(
                    "{} merges for {} merged tokens",
                    merge_lines.len(),
                    tokens.len() - vocab.len()
                ),
            ));
        }
        for (n, line) in merge_lines {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| err(n, "expected `<left> <right>`".into()))?;
            let lookup = |esc: &str| {
                Token::parse_escaped(esc)
                    .and_then(|t| vocab.token_to_id.get(&t).copied())
                    .ok_or_else(|| err(n, format!("merge refers to unknown token {esc:?}")))
            };
            let (left, right) = (lookup(l)?, lookup(r)?);
            if vocab.id_to_token[left as usize].escaped().starts_with('<')
                || vocab.id_to_token[right as usize].escaped().starts_with('<')
            {
                return Err(err(n, "merge of a reserved token".into()));
            }
            let id = vocab.push_merge(left, right);
            if vocab.id_to_token[id as usize] != tokens[id as usize].1 {
                return Err(err(n, format!("merge result does not match token id {id}")));
            }
        }
        Ok(vocab)
    }
}

fn merge_pair(ids: &[u32], left: u32, right: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Trains byte-level BPE merges until the vocabulary holds `vocab_size`
/// entries or no adjacent pair occurs at least twice.
///
/// Each round merges the most frequent pair; ties go to the smallest
/// `(left_id, right_id)`. Chunk counts are kept in a sorted map, so the result
/// depends only on the corpus contents and `vocab_size`.
pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    vocab_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::VocabTooSmall {
            got: vocab_size,
            min: MIN_VOCAB_SIZE,
        });
    }

    let mut counts: std::collections::BTreeMap<&str, u64> = std::collections::BTreeMap::new();
    for text in corpus {
        for chunk in pre_tokenize(text.as_ref()) {
            if protected_answer(chunk).is_none() {
                *counts.entry(chunk).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .filter(|(c, _)| c.len() > 1)
        .map(|(c, n)| (c.bytes().map(u32::from).collect(), n))
        .collect();

    let mut vocab = Vocabulary::base();
    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let new_id = vocab.push_merge(left, right);
        for (ids, _) in words.iter_mut() {
            if ids.windows(2).any(|w| w[0] == left && w[1] == right) {
                *ids = merge_pair(ids, left, right, new_id);
            }
        }
        words.retain(|(ids, _)| ids.len() > 1);
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocabulary {
        train_bpe(
            &[
                "The transaction is planned to be financed with a EUR40m market-based loan.",
                "Operating profit rose to EUR 13.1 mn from EUR 8.7 mn in the corresponding period.",
                "Net sales decreased by 5 % and the company said profit fell.",
            ],
            400,
        )
        .unwrap()
    }

    #[test]
    fn pre_tokenize_is_lossless() {
        let text = "Answer:A  two  spaces\n News Title: EUR40m (2009)!";
        let chunks = pre_tokenize(text);
        assert_eq!(chunks.concat(), text);
        assert!(chunks.contains(&"A"));
        assert!(chunks.contains(&" Title"));
        assert!(chunks.contains(&" EUR"));
        assert!(chunks.contains(&"40"));
    }

    #[test]
    fn repeated_pair_yields_single_merge() {
        // "aaab": (a,a) occurs twice before merging, nothing repeats after.
        let vocab = train_bpe(&["aaab"], MIN_VOCAB_SIZE + 4).unwrap();
        assert_eq!(vocab.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(vocab.len(), MIN_VOCAB_SIZE + 1);
        assert_eq!(
            vocab.id_of(&Token::Bytes(b"aa".to_vec())),
            Some(FIRST_MERGE_ID)
        );
        assert_eq!(
            vocab.encode("aaab"),
            vec![FIRST_MERGE_ID, b'a' as u32, b'b' as u32]
        );
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let vocab = train_bpe(&["x"], MIN_VOCAB_SIZE).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), 262);
        let vocab = train_bpe(&["aaaa aaaa"], MIN_VOCAB_SIZE).unwrap();
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn training_preconditions() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            train_bpe(&empty, 1000),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(&["aaab"], 260),
            Err(TokenizerError::VocabTooSmall { got: 260, min: 262 })
        ));
    }

    #[test]
    fn answer_letters_are_single_tokens() {
        let vocab = small_vocab();
        for (letter, id) in AnswerLetter::ALL.iter().zip(ANSWER_IDS) {
            assert_eq!(vocab.encode(letter.as_str()), vec![id]);
        }
        let ids = vocab.encode("Answer:B");
        assert_eq!(*ids.last().unwrap(), ANSWER_IDS[1]);
        assert_eq!(Vocabulary::letter_of(ANSWER_IDS[2]), Some(AnswerLetter::C));
        assert_eq!(Vocabulary::letter_of(b'C' as u32), None);
    }

    #[test]
    fn encode_edge_cases() {
        let vocab = small_vocab();
        assert!(vocab.encode("").is_empty());
        assert_eq!(vocab.decode(&[]).unwrap(), "");
        assert_eq!(
            vocab.decode(&vocab.encode("EUR40m loan")).unwrap(),
            "EUR40m loan"
        );
        assert!(vocab.encode("EUR40m loan").len() < "EUR40m loan".len());
    }

    #[test]
    fn decode_rejects_special_and_unknown_ids() {
        let vocab = small_vocab();
        assert!(matches!(
            vocab.decode(&[BOS_ID]),
            Err(TokenizerError::SpecialId(256))
        ));
        assert!(matches!(
            vocab.decode(&[PAD_ID]),
            Err(TokenizerError::SpecialId(258))
        ));
        assert!(matches!(
            vocab.decode(&[99_999]),
            Err(TokenizerError::UnknownId(99_999))
        ));
        assert!(matches!(
            vocab.decode(&[0xFF]),
            Err(TokenizerError::InvalidUtf8)
        ));
    }

    #[test]
    fn token_maps_are_inverse() {
        let vocab = small_vocab();
        for id in 0..vocab.len() as u32 {
            let token = vocab.token(id).unwrap();
            assert_eq!(vocab.id_of(token), Some(id));
        }
    }

    #[test]
    fn vocabulary_text_round_trip_and_determinism() {
        let vocab = small_vocab();
        let text = vocab.to_text();
        assert!(text.starts_with("finsent-vocab v1\n0\t\\x00\n"));
        assert!(text.contains("\n256\t<bos>\n257\t<eos>\n258\t<pad>\n259\t<A>\n"));
        assert!(text.contains("\n60\t\\x3C\n"));
        assert!(text.contains("\n#merges\n"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.to_text(), text);
        assert_eq!(small_vocab().to_text(), text);
    }

    #[test]
    fn vocabulary_text_rejects_corruption() {
        let text = small_vocab().to_text();
        assert!(Vocabulary::from_text(&text.replacen("finsent-vocab v1", "vocab v0", 1)).is_err());
        assert!(Vocabulary::from_text(&text.replacen("256\t<bos>", "256\t<eos>", 1)).is_err());
        assert!(Vocabulary::from_text(&text.replacen("#merges\n", "", 1)).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(text in any::<String>()) {
            let vocab = small_vocab();
            let ids = vocab.encode(&text);
            prop_assert!(ids.iter().all(|&id| (id as usize) < vocab.len() && !Vocabulary::is_special(id)));
            prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
        }

        #[test]
        fn escape_round_trips(bytes in proptest::collection::vec(any::<u8>(), 1..12)) {
            prop_assert_eq!(unescape_bytes(&escape_bytes(&bytes)), Some(bytes));
        }
    }
}
