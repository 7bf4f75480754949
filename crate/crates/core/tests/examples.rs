//! Runs every example so they stay in sync with the library.

macro_rules! example {
    ($name:ident, $file:literal) => {
        mod $name {
            #![allow(dead_code)]
            include!(concat!("../examples/", $file));

            #[test]
            fn runs() {
                run_example().unwrap();
            }
        }
    };
}

example!(tokenizer, "tokenizer.rs");
example!(prompts, "prompts.rs");
example!(packing, "packing.rs");
example!(gradient_check, "gradient_check.rs");
example!(phrasebank_splits, "phrasebank_splits.rs");
example!(sft_training, "sft_training.rs");
example!(classhead_training, "classhead_training.rs");
example!(compare_methods, "compare_methods.rs");
