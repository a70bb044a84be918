//! `affectkit` command line: argument parsing, run logging and the
//! per-command drivers.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use config::RunConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "AFFECTKIT_SEED";

#[derive(Debug, Parser)]
#[command(name = "affectkit", version = crate::VERSION, about = "Dimensional speech emotion toolkit")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute 43-dim MFBF0 features for every WAV in a manifest.
    ExtractFeatures(ExtractArgs),
    /// Add noise at a sampled SNR (and optional reverberation) to every WAV.
    MixNoise(MixArgs),
    /// Train a TC-GRU or fusion model.
    Train(TrainArgs),
    /// Train a student against a frozen teacher.
    Distill(DistillArgs),
    /// CCC of models (or a predictions file) under one or more conditions.
    Evaluate(EvaluateArgs),
    /// WER / MER / WIL per emotion band from manifest transcripts.
    WerReport(WerArgs),
    /// Write the synthetic corpus.
    SynthData(SynthArgs),
    /// Finite-difference check of a freshly built model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub wav_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub noise_dir: PathBuf,
    /// SNR band in dB as `LOW,HIGH`.
    #[arg(long)]
    pub band: String,
    /// Reverberation time of a synthesized room response, in seconds.
    #[arg(long)]
    pub rt60: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One manifest per input stream, joined by id.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Corrupted variants of the streams, for noise-aware training.
    #[arg(long)]
    pub corrupted_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Teacher input streams, joined by id.
    #[arg(long, required = true)]
    pub teacher_manifest: Vec<PathBuf>,
    /// Student input streams.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub corrupted_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint as `PATH` or `NAME=PATH`; the default system name
    /// is the file stem.
    #[arg(long)]
    pub model: Vec<String>,
    /// CSV `id,act,val,dom` scored instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub predictions: Option<PathBuf>,
    /// Clean-condition streams.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Extra condition as `NAME=STREAM[+STREAM...]`.
    #[arg(long)]
    pub condition: Vec<String>,
    #[arg(long, default_value = "eval")]
    pub split: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WerArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to one split (default: all records).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error class=usage message={first}");
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "error class={} message={}",
                e.class(),
                one_line(&e.to_string())
            );
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // a pool may already exist when several commands run in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::ExtractFeatures(a) => commands::extract_features(a, cli.threads),
        Command::MixNoise(a) => commands::mix_noise(a, cli.threads),
        Command::Train(a) => commands::train(a, cli.threads),
        Command::Distill(a) => commands::distill(a, cli.threads),
        Command::Evaluate(a) => commands::evaluate(a, cli.threads),
        Command::WerReport(a) => commands::wer_report(a, cli.threads),
        Command::SynthData(a) => commands::synth_data(a, cli.threads),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.threads),
    }
}

/// Loads the config file (if any) and applies the seed override.
pub fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        seed.trim()
            .parse::<u64>()
            .map_err(|e| Error::Config(format!("{SEED_ENV}={seed:?}: {e}")))?;
        cfg.set("seed", seed.trim())?;
    }
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Record of one invocation, written as `run.log` in the output directory.
/// Contains nothing time- or host-dependent.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64, threads: Option<usize>) -> Self {
        let mut lines = vec![
            format!("affectkit {}", crate::VERSION),
            format!("command={command}"),
            format!("seed={seed}"),
            format!(
                "threads={}",
                threads.map_or("auto".to_string(), |t| t.to_string())
            ),
        ];
        lines.extend(cfg.entries().map(|(k, v)| format!("config.{k}={v}")));
        Self { lines }
    }

    pub fn arg(&mut self, name: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("arg.{name}={value}"));
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.lines
            .push(format!("input.{}=sha256:{digest}", path.display()));
        Ok(())
    }

    /// Digest over a list of files, in order, for inputs referenced
    /// indirectly (feature files named in a manifest).
    pub fn input_set(&mut self, label: &str, paths: &[PathBuf]) -> Result<()> {
        let mut h = Sha256::new();
        for p in paths {
            h.update(sha256_file(p)?.as_bytes());
        }
        self.lines.push(format!(
            "inputs.{label}=sha256:{} files={}",
            hex::encode(h.finalize()),
            paths.len()
        ));
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.lines.push(format!("output={name}"));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("run.log"), self.render())?;
        Ok(())
    }
}
