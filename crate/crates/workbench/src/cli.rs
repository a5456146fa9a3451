//! The `sdcw` command line.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{WbError, WbResult};
use crate::pipeline::{self, Session};

pub const LOCK_FILE: &str = ".sdcw.lock";

#[derive(Debug, Parser)]
#[command(
    name = "sdcw",
    version,
    about = "Compress small token-classification transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (`key = value` lines); defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory for models and reports.
    #[arg(long, short, default_value = "runs")]
    pub out: PathBuf,
    /// Extra `key=value` settings that override the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/dev/test CoNLL splits and a text corpus.
    SynthData(Common),
    /// Masked-LM pretraining on a text corpus.
    Pretrain(Common),
    /// Fine-tune for NER, from scratch or from `model`.
    Finetune(Common),
    /// Magnitude pruning before, during or after fine-tuning.
    Prune(Common),
    /// Task-agnostic or task-specific distillation over a student grid.
    Distill(Common),
    /// Post-training int8 quantization of `model`.
    Quantize(Common),
    /// Score `model` on the test split.
    Eval(Common),
    /// Latency of `model` in fp32, dynamic and int8-mixed modes.
    Bench(Common),
    /// Zero-shot evaluation and fine-tuning of `model` on a new dataset.
    Transfer(Common),
    /// Regenerate CSV tables from a directory of run reports.
    Report {
        /// Directory holding run report JSON files.
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short, default_value = "runs")]
        out: PathBuf,
    },
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> WbResult<Self> {
        fs::create_dir_all(dir).map_err(|e| WbError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| WbError::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(WbError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(WbError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(common: &Common) -> WbResult<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &common.overrides),
        None => ExperimentConfig::parse("", Path::new("."), &common.overrides),
    }
}

/// Run one subcommand; returns the files it wrote.
pub fn run(cli: Cli) -> WbResult<Vec<PathBuf>> {
    let (common, work): (&Common, fn(&mut Session) -> WbResult<()>) = match &cli.command {
        Command::SynthData(c) => (c, pipeline::synth_data),
        Command::Pretrain(c) => (c, pipeline::pretrain),
        Command::Finetune(c) => (c, pipeline::finetune_cmd),
        Command::Prune(c) => (c, pipeline::prune),
        Command::Distill(c) => (c, pipeline::distill),
        Command::Quantize(c) => (c, pipeline::quantize),
        Command::Eval(c) => (c, pipeline::eval),
        Command::Bench(c) => (c, pipeline::bench),
        Command::Transfer(c) => (c, pipeline::transfer),
        Command::Report { input, out } => {
            let _lock = OutputLock::acquire(out)?;
            return pipeline::report_tables(input, out);
        }
    };
    let config = load_config(common)?;
    let _lock = OutputLock::acquire(&common.out)?;
    let mut session = Session::new(&config, &common.out);
    work(&mut session)?;
    for w in &session.warnings {
        eprintln!("warning: {w}");
    }
    Ok(session.written)
}

/// Parse `argv`, run, print outcomes; returns the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
