//! The `biam` command line: corpus generation, the three training stages,
//! evaluation, gradient checking and alignment export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use biam_core::data::{
    load_jsonl, load_text_jsonl, save_jsonl, save_text_jsonl, split_heldout, synth_corpus,
    unpaired_text_corpus, SynthConfig, Utterance,
};
use biam_core::export::export_alignment;
use biam_core::gradcheck::{self, GradcheckOptions};
use biam_core::train::{
    evaluate, finetune_paired, metrics_csv, pretrain_unpaired, train_paired, Checkpoint,
    EvalReport, TrainConfig,
};
use biam_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Gradcheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Gradcheck(_) => EXIT_NUMERICAL,
            CliError::Core(e) if e.is_numerical() || matches!(e, Error::ZeroNorm { .. }) => {
                EXIT_NUMERICAL
            }
            CliError::Core(Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gradcheck(ops) => write!(f, "gradient check failed for: {}", ops.join(", ")),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn io_error(context: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", context.display()),
    )))
}

#[derive(Parser, Debug)]
#[command(
    name = "biam",
    version,
    about = "Speech/text multimodal training with bidirectional attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file (full or partial); applied before overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.dim=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired corpus and a disjoint text-only corpus.
    GenData {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Paired training from a fresh initialization.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Text-only pretraining of the decoder on an existing checkpoint.
    PretrainText {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Paired fine-tuning of an existing checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// CER, monotonicity and losses of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// `all` or one module name.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Perturb the named operation's gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write the speech-to-text attention of one utterance as CSV and PGM.
    ExportAlignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utterance: String,
        /// Output prefix; `.w12.csv` and `.w12.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Heldout,
    Train,
    All,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { run_dir, cfg } => gen_data(&run_dir, &cfg),
        Command::Train { data, run_dir, cfg } => train(&data, &run_dir, &cfg),
        Command::PretrainText {
            checkpoint,
            text,
            run_dir,
            cfg,
        } => pretrain_text(&checkpoint, &text, &run_dir, &cfg),
        Command::Finetune {
            checkpoint,
            data,
            run_dir,
            cfg,
        } => finetune(&checkpoint, &data, &run_dir, &cfg),
        Command::Eval {
            checkpoint,
            data,
            run_dir,
            split,
        } => eval(&checkpoint, &data, &run_dir, split),
        Command::Gradcheck {
            scope,
            seed,
            corrupt,
        } => run_gradcheck(scope, seed, corrupt),
        Command::ExportAlignment {
            checkpoint,
            data,
            utterance,
            out,
        } => export(&checkpoint, &data, &utterance, &out),
    }
}

fn prepare_run_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Self-describing echo of one invocation.
fn echo_config(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: serde_json::Value,
) -> Result<(), CliError> {
    let doc = json!({
        "command": command,
        "versions": {
            "biam-cli": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": 1,
        },
        "inputs": inputs,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&dir.join(CONFIG_FILE), text + "\n")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => io_error(path, io),
        other => CliError::Core(other),
    })
}

fn load_corpus(path: &Path, vocab: usize) -> Result<Vec<Utterance>, CliError> {
    load_jsonl(path, vocab).map_err(|e| match e {
        Error::Io(io) => io_error(path, io),
        other => CliError::Core(other),
    })
}

/// Training config for a command that continues `ckpt`: the checkpoint's
/// own config is the base layer. The architecture must stay unchanged.
fn continued_config(ckpt: &Checkpoint, args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let cfg: TrainConfig = config::resolve(&ckpt.config, args.config.as_deref(), &args.overrides)?;
    if cfg.model != ckpt.config.model {
        return Err(CliError::Usage(
            "model architecture cannot change when continuing a checkpoint".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TEXT_FILE: &str = "text.jsonl";

fn gen_data(run_dir: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg: SynthConfig = config::resolve(
        &SynthConfig::default(),
        args.config.as_deref(),
        &args.overrides,
    )?;
    cfg.validate()?;
    prepare_run_dir(run_dir)?;
    echo_config(
        run_dir,
        "gen-data",
        serde_json::to_value(&cfg).expect("config serializes"),
        json!({}),
    )?;
    let corpus = synth_corpus(&cfg)?;
    let texts = unpaired_text_corpus(&cfg)?;
    save_jsonl(&corpus, &run_dir.join(CORPUS_FILE))?;
    save_text_jsonl(&texts, &run_dir.join(TEXT_FILE))?;
    println!(
        "wrote {} paired utterances and {} text sequences to {}",
        corpus.len(),
        texts.len(),
        run_dir.display()
    );
    Ok(())
}

fn write_train_outputs(run_dir: &Path, ckpt: &Checkpoint, csv: String) -> Result<(), CliError> {
    write_file(&run_dir.join(METRICS_FILE), csv)?;
    ckpt.save(&run_dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn train(data: &Path, run_dir: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg: TrainConfig = config::resolve(
        &TrainConfig::default(),
        args.config.as_deref(),
        &args.overrides,
    )?;
    cfg.validate()?;
    let corpus = load_corpus(data, cfg.model.vocab)?;
    prepare_run_dir(run_dir)?;
    echo_config(
        run_dir,
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
        json!({ "data": data }),
    )?;
    let (ckpt, history) = train_paired(&corpus, &cfg)?;
    write_train_outputs(run_dir, &ckpt, metrics_csv(&history))?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs ({}): held-out cer {:.4} monotonicity {:.4}",
            history.len(),
            cfg.mode.name(),
            last.cer,
            last.monotonicity
        );
    }
    Ok(())
}

fn pretrain_text(
    checkpoint: &Path,
    text: &Path,
    run_dir: &Path,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = continued_config(&ckpt, args)?;
    let texts = load_text_jsonl(text, cfg.model.vocab).map_err(|e| match e {
        Error::Io(io) => io_error(text, io),
        other => CliError::Core(other),
    })?;
    prepare_run_dir(run_dir)?;
    echo_config(
        run_dir,
        "pretrain-text",
        serde_json::to_value(&cfg).expect("config serializes"),
        json!({ "checkpoint": checkpoint, "text": text }),
    )?;
    let (ckpt, losses) = pretrain_unpaired(&texts, ckpt, &cfg)?;
    let mut csv = String::from("epoch,asr_attention\n");
    for (epoch, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    write_train_outputs(run_dir, &ckpt, csv)?;
    if let Some(last) = losses.last() {
        println!(
            "pretrained decoder for {} epochs: loss {last:.4}",
            losses.len()
        );
    }
    Ok(())
}

fn finetune(
    checkpoint: &Path,
    data: &Path,
    run_dir: &Path,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = continued_config(&ckpt, args)?;
    let corpus = load_corpus(data, cfg.model.vocab)?;
    prepare_run_dir(run_dir)?;
    echo_config(
        run_dir,
        "finetune",
        serde_json::to_value(&cfg).expect("config serializes"),
        json!({ "checkpoint": checkpoint, "data": data }),
    )?;
    let (ckpt, history) = finetune_paired(&corpus, ckpt, &cfg)?;
    write_train_outputs(run_dir, &ckpt, metrics_csv(&history))?;
    if let Some(last) = history.last() {
        println!(
            "fine-tuned {} epochs: held-out cer {:.4} monotonicity {:.4}",
            history.len(),
            last.cer,
            last.monotonicity
        );
    }
    Ok(())
}

pub const EVAL_HEADER: &str =
    "split,utterances,skipped,cer,monotonicity,asr_ctc,asr_attention,cd,mlm,gctc,total";

fn eval_csv(split: Split, r: &EvalReport) -> String {
    let b = &r.breakdown;
    format!(
        "{EVAL_HEADER}\n{},{},{},{},{},{},{},{},{},{},{}\n",
        split_name(split),
        r.utterances,
        r.skipped,
        r.cer,
        r.mean_monotonicity,
        b.asr_ctc,
        b.asr_attention,
        b.cd,
        b.mlm,
        b.gctc,
        b.total
    )
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Heldout => "heldout",
        Split::Train => "train",
        Split::All => "all",
    }
}

fn eval(checkpoint: &Path, data: &Path, run_dir: &Path, split: Split) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data, ckpt.config.model.vocab)?;
    let (train, heldout) = split_heldout(&corpus);
    let subset = match split {
        Split::Heldout => heldout,
        Split::Train => train,
        Split::All => &corpus[..],
    };
    prepare_run_dir(run_dir)?;
    echo_config(
        run_dir,
        "eval",
        serde_json::to_value(&ckpt.config).expect("config serializes"),
        json!({ "checkpoint": checkpoint, "data": data, "split": split_name(split) }),
    )?;
    let report = evaluate(subset, &ckpt)?;
    write_file(&run_dir.join(METRICS_FILE), eval_csv(split, &report))?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&run_dir.join(EVAL_FILE), text + "\n")?;
    println!(
        "{} split: {} utterances, cer {:.4}, monotonicity {:.4}",
        split_name(split),
        report.utterances,
        report.cer,
        report.mean_monotonicity
    );
    Ok(())
}

fn run_gradcheck(scope: String, seed: u64, corrupt: Option<String>) -> Result<(), CliError> {
    let opts = GradcheckOptions {
        scope: Some(scope),
        seed,
        corrupt,
    };
    let report = gradcheck::run(&opts).map_err(|e| match e {
        Error::InvalidInput(m) => CliError::Usage(m),
        other => CliError::Core(other),
    })?;
    for line in report.lines() {
        println!("{line}");
    }
    let failed: Vec<String> = report
        .failures()
        .map(|o| format!("{}::{}", o.module, o.op))
        .collect();
    if failed.is_empty() {
        println!(
            "all {} operations within relative error {:e}",
            report.ops.len(),
            report.tolerance
        );
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed))
    }
}

fn export(checkpoint: &Path, data: &Path, utterance: &str, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data, ckpt.config.model.vocab)?;
    let u = corpus.iter().find(|u| u.id == utterance).ok_or_else(|| {
        CliError::Core(Error::InvalidInput(format!(
            "no utterance `{utterance}` in {}",
            data.display()
        )))
    })?;
    let w12 = ckpt.model.alignment(&u.speech, &u.graphemes)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_run_dir(parent)?;
    }
    let (csv, pgm) = export_alignment(&w12, out)?;
    println!(
        "{}: {}×{} alignment written to {} and {}",
        utterance,
        w12.rows(),
        w12.cols(),
        csv.display(),
        pgm.display()
    );
    Ok(())
}
