//! The `finsent` command line: `prepare`, `train`, `eval` and `prompt`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence, 5 accuracy gate not met.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Preset, RunConfig, MAX_TRAINABLE_PARAMETERS};
use crate::dataset::{self, LabeledExample, Split, SplitManifest, SplitName};
use crate::evaluation::{
    compare_report, evaluate_classhead, evaluate_generation, EvalMode, EvalReport,
};
use crate::model::{AnyCheckpoint, Checkpoint, Float, FloatWidth, HeadType, Model, ModelConfig};
use crate::packing::{self, PackedSequence, TokenizedExample};
use crate::prompting::{PromptStyle, PromptTemplate};
use crate::synthetic::to_phrasebank_text;
use crate::tokenizer::{self, Vocabulary};
use crate::training::{self, TrainError, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GATE: i32 = 5;

pub const EXAMPLES_FILE: &str = "examples.txt";
pub const SPLITS_FILE: &str = "splits.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_PACK_FILE: &str = "train.pack";
pub const RUNCONFIG_FILE: &str = "runconfig.txt";
pub const BASE_CHECKPOINT_FILE: &str = "checkpoint-base.fsnt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_FORMAT: &str = "finsent-report v1";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("accuracy {accuracy:.4} is below --min-accuracy {min}")]
    Gate { accuracy: f64, min: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Gate { .. } => EXIT_GATE,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "finsent",
    version,
    about = "Financial sentiment fine-tuning on a small decoder-only transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a PhraseBank file, split it, train the vocabulary and pack the train split.
    Prepare(PrepareArgs),
    /// Train an SFT or classification-head model on a prepared directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write reports.
    Eval(EvalArgs),
    /// Print a rendered prompt.
    Prompt(PromptArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// PhraseBank-format file of `sentence@label` lines.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Sft,
    Classhead,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Sft => "sft",
            TrainMode::Classhead => "classhead",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: TrainMode,
    /// Output directory; also the prepared data directory unless `--data-dir` is given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = parse_eval_mode)]
    pub mode: EvalMode,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Exit with code 5 when accuracy is below this value.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub title: String,
    #[arg(long)]
    pub fewshot: bool,
    #[arg(long)]
    pub template: Option<PathBuf>,
}

fn parse_eval_mode(s: &str) -> Result<EvalMode, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse()
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Prompt(a) => cmd_prompt(&a, stdout),
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is locked by another finsent run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::parse(&read(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => RunConfig::preset(
            name.parse::<Preset>()
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
        (None, None) => match fallback {
            Some(path) => RunConfig::parse(&read(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        },
    };
    cfg.apply_overrides(&args.overrides)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn load_template(cfg: &RunConfig) -> Result<PromptTemplate, CliError> {
    match &cfg.template {
        Some(path) => PromptTemplate::load(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        None => Ok(PromptTemplate::default()),
    }
}

/// Strings the vocabulary is trained on: every train example rendered in
/// both prompt styles.
pub fn tokenizer_corpus(
    template: &PromptTemplate,
    train: &[(usize, &LabeledExample)],
) -> Vec<String> {
    let mut corpus = Vec::with_capacity(train.len() * 2);
    for (_, ex) in train {
        corpus.push(template.build(&ex.sentence, PromptStyle::ZeroShot));
        corpus.push(template.build(&ex.sentence, PromptStyle::FewShot));
    }
    corpus
}

/// Zero-shot tokenization of one split.
pub fn tokenize_split(
    examples: &[(usize, &LabeledExample)],
    vocab: &Vocabulary,
    template: &PromptTemplate,
    max_seq_len: usize,
) -> Result<Vec<TokenizedExample>, CliError> {
    examples
        .iter()
        .map(|&(i, ex)| {
            packing::tokenize_pair(ex, i, vocab, template, PromptStyle::ZeroShot, max_seq_len)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_prepare(args: &PrepareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.config, None)?;
    if let Some(seed) = args.seed {
        cfg.split.seed = seed;
    }
    if let Some(f) = args.test_frac {
        cfg.split.test_fraction = f;
    }
    if let Some(f) = args.val_frac {
        cfg.split.val_fraction_of_rest = f;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let template = load_template(&cfg)?;
    let _lock = DirLock::acquire(&args.out)?;

    let examples = dataset::load_phrasebank(&args.data)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let split = dataset::split(&examples, &cfg.split).map_err(|e| CliError::Data(e.to_string()))?;
    let train = split.select(SplitName::Train, &examples);
    let vocab = tokenizer::train_bpe(&tokenizer_corpus(&template, &train), cfg.model.vocab_size)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let tokenized = tokenize_split(&train, &vocab, &template, cfg.train.max_seq_len)?;
    let packed = packing::pack(&tokenized, cfg.train.max_seq_len)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let out = &args.out;
    write(&out.join(EXAMPLES_FILE), to_phrasebank_text(&examples))?;
    write(
        &out.join(SPLITS_FILE),
        SplitManifest::new(examples.len(), &cfg.split, &split).to_json(),
    )?;
    write(&out.join(VOCAB_FILE), vocab.to_text())?;
    write(&out.join(TRAIN_PACK_FILE), packing::write_pack(&packed))?;
    write(&out.join(RUNCONFIG_FILE), cfg.to_text())?;

    let _ = writeln!(stdout, "examples={}", examples.len());
    let _ = writeln!(
        stdout,
        "train={} val={} test={}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let _ = writeln!(stdout, "vocab={}", vocab.len());
    let _ = writeln!(stdout, "packed_sequences={}", packed.len());
    Ok(())
}

/// Artifacts of a `prepare` run.
pub struct Prepared {
    pub config: RunConfig,
    pub examples: Vec<LabeledExample>,
    pub split: Split,
    pub vocab: Vocabulary,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let config = RunConfig::parse(&read(&dir.join(RUNCONFIG_FILE))?)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let examples = dataset::parse_phrasebank(&read(&dir.join(EXAMPLES_FILE))?)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let manifest =
            SplitManifest::from_json(&read(&dir.join(SPLITS_FILE))?).map_err(CliError::Data)?;
        if manifest.n != examples.len() {
            return Err(CliError::Data(format!(
                "{SPLITS_FILE} covers {} examples, {EXAMPLES_FILE} has {}",
                manifest.n,
                examples.len()
            )));
        }
        let vocab = Vocabulary::from_text(&read(&dir.join(VOCAB_FILE))?)
            .map_err(|e| CliError::Data(e.to_string()))?;
        Ok(Self {
            config,
            examples,
            split: manifest.split(),
            vocab,
        })
    }

    pub fn select(&self, which: SplitName) -> Vec<(usize, &LabeledExample)> {
        self.split.select(which, &self.examples)
    }
}

fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data_dir = args.data_dir.as_deref().unwrap_or(&args.out);
    let mut cfg = resolve_config(&args.config, Some(&data_dir.join(RUNCONFIG_FILE)))?;
    cfg.model.head_type = match args.mode {
        TrainMode::Sft => HeadType::Lm,
        TrainMode::Classhead => HeadType::Classification,
    };
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.estimated_parameters() > MAX_TRAINABLE_PARAMETERS {
        return Err(CliError::Config(format!(
            "model has ~{} parameters; the {} preset documents the published setup and is not trainable here",
            cfg.estimated_parameters(),
            cfg.preset.as_str()
        )));
    }
    let template = load_template(&cfg)?;
    let _lock = DirLock::acquire(&args.out)?;

    let prepared = Prepared::load(data_dir)?;
    let model_cfg = ModelConfig {
        vocab_size: prepared.vocab.len(),
        ..cfg.model.clone()
    };
    let val = tokenize_split(
        &prepared.select(SplitName::Val),
        &prepared.vocab,
        &template,
        cfg.train.max_seq_len,
    )?;
    let mode = args.mode.as_str();
    let out = &args.out;
    let summary = match (args.mode, model_cfg.float_width) {
        (TrainMode::Sft, width) => {
            let pack_path = data_dir.join(TRAIN_PACK_FILE);
            let packed = packing::read_pack(&read(&pack_path)?)
                .map_err(|e| CliError::Data(e.to_string()))?;
            if let Some(s) = packed
                .iter()
                .find(|s| s.tokens.len() > cfg.train.max_seq_len)
            {
                return Err(CliError::Data(format!(
                    "{} holds a {}-token sequence, longer than train.max_seq_len {}; rerun prepare",
                    pack_path.display(),
                    s.tokens.len(),
                    cfg.train.max_seq_len
                )));
            }
            match width {
                FloatWidth::F32 => run_sft::<f32>(&packed, &val, &model_cfg, &cfg, out, mode)?,
                FloatWidth::F64 => run_sft::<f64>(&packed, &val, &model_cfg, &cfg, out, mode)?,
            }
        }
        (TrainMode::Classhead, width) => {
            let train = tokenize_split(
                &prepared.select(SplitName::Train),
                &prepared.vocab,
                &template,
                cfg.train.max_seq_len,
            )?;
            match width {
                FloatWidth::F32 => finish_train(
                    training::train_classhead::<f32>(&train, &val, &model_cfg, &cfg.train)?,
                    out,
                    mode,
                )?,
                FloatWidth::F64 => finish_train(
                    training::train_classhead::<f64>(&train, &val, &model_cfg, &cfg.train)?,
                    out,
                    mode,
                )?,
            }
        }
    };
    let resolved = RunConfig {
        model: model_cfg,
        ..cfg
    };
    write(
        &out.join(format!("runconfig-train-{mode}.txt")),
        resolved.to_text(),
    )?;
    let _ = writeln!(stdout, "{summary}");
    Ok(())
}

fn run_sft<T: Float>(
    packed: &[PackedSequence],
    val: &[TokenizedExample],
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    out: &Path,
    mode: &str,
) -> Result<String, CliError> {
    let outcome = training::train_sft::<T>(packed, val, model_cfg, &cfg.train)?;
    let base = Checkpoint::new(
        Model::<T>::init(model_cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?,
    );
    write(&out.join(BASE_CHECKPOINT_FILE), base.to_bytes())?;
    finish_train(outcome, out, mode)
}

fn finish_train<T: Float>(
    outcome: TrainOutcome<T>,
    out: &Path,
    mode: &str,
) -> Result<String, CliError> {
    write(
        &out.join(format!("checkpoint-{mode}.fsnt")),
        outcome.checkpoint.to_bytes(),
    )?;
    write(
        &out.join(format!("trainlog-{mode}.jsonl")),
        outcome.log.to_jsonl(),
    )?;
    Ok(match outcome.checkpoint.val_accuracy {
        Some(acc) => format!(
            "best_val_accuracy={acc} at_step={}",
            outcome.checkpoint.step
        ),
        None => format!("best_val_accuracy=none at_step={}", outcome.checkpoint.step),
    })
}

/// All per-mode reports of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub format: String,
    pub reports: Vec<EvalReport>,
}

fn evaluate_any(
    ckpt: &AnyCheckpoint,
    mode: EvalMode,
    template: &PromptTemplate,
    testset: &[(usize, &LabeledExample)],
    vocab: &Vocabulary,
) -> Result<EvalReport, CliError> {
    fn go<T: Float>(
        model: &Model<T>,
        mode: EvalMode,
        template: &PromptTemplate,
        testset: &[(usize, &LabeledExample)],
        vocab: &Vocabulary,
    ) -> Result<EvalReport, crate::evaluation::EvalError> {
        match mode {
            EvalMode::Classhead => evaluate_classhead(model, template, testset, vocab),
            _ => evaluate_generation(model, mode, template, testset, vocab),
        }
    }
    let r = match ckpt {
        AnyCheckpoint::F32(c) => go(&c.model, mode, template, testset, vocab),
        AnyCheckpoint::F64(c) => go(&c.model, mode, template, testset, vocab),
    };
    r.map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data_dir = args.data_dir.as_deref().unwrap_or(&args.out);
    let prepared = Prepared::load(data_dir)?;
    let template = load_template(&prepared.config)?;
    let ckpt = AnyCheckpoint::load(&args.ckpt)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.ckpt.display())))?;
    args.mode
        .check_head(ckpt.config().head_type)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if ckpt.config().vocab_size != prepared.vocab.len() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} tokens, {} has {}",
            ckpt.config().vocab_size,
            VOCAB_FILE,
            prepared.vocab.len()
        )));
    }
    let _lock = DirLock::acquire(&args.out)?;

    let testset = prepared.select(args.split);
    let report = evaluate_any(&ckpt, args.mode, &template, &testset, &prepared.vocab)?;
    let out = &args.out;
    write(
        &out.join(format!("report-{}.json", args.mode)),
        report.to_json(),
    )?;
    write(
        &out.join(format!("report-{}.txt", args.mode)),
        report.summary_text(),
    )?;

    let mut reports = Vec::new();
    for mode in EvalMode::ALL {
        let path = out.join(format!("report-{mode}.json"));
        if path.exists() {
            reports.push(
                EvalReport::from_json(&read(&path)?)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
            );
        }
    }
    let aggregate = AggregateReport {
        format: REPORT_FORMAT.to_owned(),
        reports,
    };
    let json = serde_json::to_string_pretty(&aggregate).expect("report serializes") + "\n";
    write(&out.join(REPORT_JSON_FILE), json)?;
    let table = compare_report(&aggregate.reports, true);
    write(&out.join(REPORT_TEXT_FILE), &table)?;

    let _ = write!(stdout, "{}", report.summary_text());
    let _ = writeln!(stdout);
    let _ = write!(stdout, "{table}");
    if let Some(min) = args.min_accuracy {
        if report.accuracy < min {
            return Err(CliError::Gate {
                accuracy: report.accuracy,
                min,
            });
        }
    }
    Ok(())
}

fn cmd_prompt(args: &PromptArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let template = match &args.template {
        Some(path) => PromptTemplate::load(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => PromptTemplate::default(),
    };
    let style = if args.fewshot {
        PromptStyle::FewShot
    } else {
        PromptStyle::ZeroShot
    };
    stdout
        .write_all(template.build(&args.title, style).as_bytes())
        .map_err(|e| CliError::Data(e.to_string()))
}
