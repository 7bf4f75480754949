//! Sentiment classification of financial news with a small decoder-only
//! transformer: BPE tokenization, prompt construction, sequence packing
//! with block-diagonal attention, SFT and classification-head training, and
//! accuracy reporting.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod packing;
pub mod prompting;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
