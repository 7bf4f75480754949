//! Drives the command-line entry point through a small prepare/train/eval run.

use std::ffi::OsString;
use std::path::Path;

use finsent::cli::{self, EXIT_GATE, EXIT_OK};
use finsent::evaluation::EvalReport;
use finsent::synthetic::{to_phrasebank_text, toy_corpus};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(args.iter().map(OsString::from), &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

const SMALL: [&str; 14] = [
    "--set",
    "model.vocab_size=512",
    "--set",
    "model.d_model=32",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=64",
    "--set",
    "train.epochs=1",
    "--set",
    "train.eval_every=10",
];

fn with_small<'a>(base: &[&'a str]) -> Vec<&'a str> {
    base.iter().copied().chain(SMALL).collect()
}

#[test]
fn prepare_train_eval_and_gate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.txt");
    std::fs::write(&data, to_phrasebank_text(&toy_corpus(60, 4))).unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let (code, stdout, stderr) = run(&with_small(&[
        "finsent",
        "prepare",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_s,
    ]));
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(!stdout.is_empty());
    for f in ["splits.json", "vocab.txt", "train.pack"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let (code, stdout, stderr) = run(&with_small(&[
        "finsent",
        "train",
        "--mode",
        "classhead",
        "--out",
        out_s,
    ]));
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.contains("best_val_accuracy="), "{stdout}");
    assert!(out.join("trainlog-classhead.jsonl").exists());

    let ckpt = out.join("checkpoint-classhead.fsnt");
    let ckpt_s = ckpt.to_str().unwrap();
    let (code, _, stderr) = run(&[
        "finsent",
        "eval",
        "--mode",
        "classhead",
        "--ckpt",
        ckpt_s,
        "--out",
        out_s,
    ]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    let report =
        EvalReport::from_json(&std::fs::read_to_string(out.join("report-classhead.json")).unwrap())
            .unwrap();
    assert_eq!(report.n, 12);
    let confusion: usize = report.confusion.iter().flatten().sum();
    assert_eq!(confusion + report.unparsed_count, report.n);
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("ClassHead"), "{text}");

    // An unreachable accuracy floor still writes the report, then exits 5.
    let (code, _, stderr) = run(&[
        "finsent",
        "eval",
        "--mode",
        "classhead",
        "--ckpt",
        ckpt_s,
        "--out",
        out_s,
        "--min-accuracy",
        "1.01",
    ]);
    assert_eq!(code, EXIT_GATE, "{stderr}");

    // A classification checkpoint cannot drive generation.
    let (code, _, _) = run(&[
        "finsent", "eval", "--mode", "sft", "--ckpt", ckpt_s, "--out", out_s,
    ]);
    assert_ne!(code, EXIT_OK);
    assert!(!Path::new(&out.join(".lock")).exists());
}
