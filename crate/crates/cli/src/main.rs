mod commands;
mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Command;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "longclip", version, about = "Long-context contrastive image-text experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat TOML file of configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Token-length and truncation statistics of a caption corpus.
    TokenizeStats {
        #[arg(long)]
        input: Option<PathBuf>,
        /// records, shards or text (one caption per line).
        #[arg(long)]
        format: Option<String>,
        /// Directory with a saved vocabulary; trained on the corpus when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Content-token cutoff(s), comma-separated.
        #[arg(long)]
        cutoff: Option<String>,
    },
    /// Train both towers on a paired corpus.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        context_length: Option<usize>,
        /// Architecture preset: default or compact.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Recall@K in both directions on a paired corpus.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        ks: Option<String>,
        /// Evaluate with a shorter window than the one trained with.
        #[arg(long)]
        context_length: Option<usize>,
    },
    /// Zero-shot multiple-choice accuracy.
    EvalZeroshot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Line-delimited {image, options, correct} items.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Corpus holding the referenced image features.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        context_length: Option<usize>,
    },
    /// Caption augmentation, feasibility filtering and acronym expansion.
    Longcap {
        #[arg(long)]
        input: Option<PathBuf>,
        /// `mock` or an HTTP endpoint.
        #[arg(long)]
        backend: Option<String>,
        /// Status journal to resume from.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write the synthetic training and evaluation splits.
    MakeSynthetic {
        #[arg(long)]
        format: Option<String>,
    },
    /// Assemble the long-caption benchmark from article XML files.
    BuildBenchmark {
        /// An article XML file or a directory of them.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train and evaluate across context lengths on the synthetic corpus.
    Ablate {
        #[arg(long)]
        contexts: Option<String>,
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        arch: Option<String>,
    },
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::TokenizeStats { .. } => Command::TokenizeStats,
            Cmd::Train { .. } => Command::Train,
            Cmd::EvalRetrieval { .. } => Command::EvalRetrieval,
            Cmd::EvalZeroshot { .. } => Command::EvalZeroshot,
            Cmd::Longcap { .. } => Command::Longcap,
            Cmd::MakeSynthetic { .. } => Command::MakeSynthetic,
            Cmd::BuildBenchmark { .. } => Command::BuildBenchmark,
            Cmd::Ablate { .. } => Command::Ablate,
        }
    }

    /// Flags given on the command line, as configuration keys.
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        let s = |v: &Option<String>| v.clone();
        let n = |v: &Option<usize>| v.map(|v| v.to_string());
        match self {
            Cmd::TokenizeStats { input, format, vocab, cutoff } => vec![
                ("input", path(input)),
                ("format", s(format)),
                ("vocab", path(vocab)),
                ("cutoff", s(cutoff)),
            ],
            Cmd::Train { input, format, vocab, context_length, arch } => vec![
                ("input", path(input)),
                ("format", s(format)),
                ("vocab", path(vocab)),
                ("context_length", n(context_length)),
                ("arch", s(arch)),
            ],
            Cmd::EvalRetrieval { checkpoint, input, format, ks, context_length } => vec![
                ("checkpoint", path(checkpoint)),
                ("input", path(input)),
                ("format", s(format)),
                ("ks", s(ks)),
                ("context_length", n(context_length)),
            ],
            Cmd::EvalZeroshot { checkpoint, tasks, images, format, context_length } => vec![
                ("checkpoint", path(checkpoint)),
                ("tasks", path(tasks)),
                ("images", path(images)),
                ("format", s(format)),
                ("context_length", n(context_length)),
            ],
            Cmd::Longcap { input, backend, journal, workers } => vec![
                ("input", path(input)),
                ("backend", s(backend)),
                ("journal", path(journal)),
                ("workers", n(workers)),
            ],
            Cmd::MakeSynthetic { format } => vec![("format", s(format))],
            Cmd::BuildBenchmark { input } => vec![("input", path(input))],
            Cmd::Ablate { contexts, ks, arch } => vec![("contexts", s(contexts)), ("ks", s(ks)), ("arch", s(arch))],
        }
    }
}

/// Marks errors caused by the invocation rather than by the work itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(format!("{e:#}")).into())
}

fn resolve_config(cmd: &Cmd, common: &Common) -> Result<RunConfig> {
    let command = cmd.command();
    let mut cfg = RunConfig::new(command.defaults());
    if let Some(file) = &common.config {
        cfg.apply_file(file)?;
    }
    let all_keys: BTreeSet<String> = Command::ALL
        .iter()
        .flat_map(|c| c.defaults().keys().cloned().collect::<Vec<_>>())
        .collect();
    cfg.apply_env(std::env::vars(), &all_keys)?;
    for (key, value) in cmd.overrides() {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.set("out", &out.display().to_string())?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// `<out>/<command>-<timestamp>-seed<seed>`, suffixed if it already exists.
fn create_run_dir(out: &Path, command: Command, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{}-{stamp}-seed{seed}", command.name());
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("--out: cannot create {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = usage(resolve_config(&cli.command, &cli.common))?;
    let command = cli.command.command();
    let seed = usage(cfg.u64("seed"))?;
    let run_dir = create_run_dir(Path::new(&cfg.str("out")), command, seed)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    fs::write(
        run_dir.join("version.txt"),
        format!("longclip {}\ncommand = {}\n", env!("CARGO_PKG_VERSION"), command.name()),
    )?;
    let summary = match commands::execute(command, &cfg, &run_dir) {
        Ok(s) => s,
        Err(e) => {
            // a bad invocation leaves nothing worth keeping
            if e.downcast_ref::<UsageError>().is_some() {
                let _ = fs::remove_dir_all(&run_dir);
            }
            return Err(e);
        }
    };
    print!("{summary}");
    println!("run_dir = {}", run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
