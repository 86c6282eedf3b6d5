//! `introspect` command-line interface.
//!
//! Every subcommand writes its outputs and a `manifest.json` under `--out`;
//! `replay` re-runs a manifest and checks that the outputs are byte-identical.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use commands::{CommandKind, Request};
use manifest::RunManifest;

#[derive(Debug)]
pub enum Failure {
    Core(introspect::Error),
    Usage(String),
    /// A replay produced different bytes.
    Mismatch(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(_) | Failure::Usage(_) => 2,
            Failure::Mismatch(_) => 1,
        }
    }
}

impl From<introspect::Error> for Failure {
    fn from(e: introspect::Error) -> Self {
        Failure::Core(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => {
                write!(f, "{e}")?;
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    write!(f, ": {s}")?;
                    source = s.source();
                }
                Ok(())
            }
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Mismatch(m) => write!(f, "replay mismatch: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "introspect", version, about = "Bayesian classifiers, calibration metrics, CRF context and uncertainty-gated adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; built-in defaults when omitted (except for `recipe`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override one config field, e.g. `--set train.max_epochs=5` (repeatable).
    #[arg(long = "set", value_name = "PATH=JSON")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate shifted cluster datasets or CRF scenes.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a plain or concrete-dropout network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a Kronecker-factored Laplace posterior around a trained network.
    LaplaceFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Monte-Carlo predictions from a network or a Laplace posterior.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Calibration and separability metrics of a predictions file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ood: Option<PathBuf>,
    },
    /// Fit the two CRF weights on labelled scenes.
    TrainCrf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Smooth scene labels with a trained CRF.
    Smooth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Run the uncertainty-gated adaptation loop.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Start from this network instead of training one on the source.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Run an experiment recipe (see recipes/).
    Recipe {
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a manifest into a new directory and compare outputs byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn inputs(pairs: &[(&str, Option<&PathBuf>)]) -> BTreeMap<String, PathBuf> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), p.clone())))
        .collect()
}

#[allow(clippy::result_large_err)]
fn split(command: Command) -> Result<(CommandKind, Common, BTreeMap<String, PathBuf>), Command> {
    Ok(match command {
        Command::GenData { common } => (CommandKind::GenData, common, BTreeMap::new()),
        Command::Train { common, data } => (CommandKind::Train, common, inputs(&[("data", Some(&data))])),
        Command::LaplaceFit { common, model, data } => (
            CommandKind::LaplaceFit,
            common,
            inputs(&[("model", Some(&model)), ("data", Some(&data))]),
        ),
        Command::Predict { common, data, model, posterior } => (
            CommandKind::Predict,
            common,
            inputs(&[("data", Some(&data)), ("model", model.as_ref()), ("posterior", posterior.as_ref())]),
        ),
        Command::Eval { common, predictions, ood } => (
            CommandKind::Eval,
            common,
            inputs(&[("predictions", Some(&predictions)), ("ood", ood.as_ref())]),
        ),
        Command::TrainCrf { common, scenes } => (CommandKind::TrainCrf, common, inputs(&[("scenes", Some(&scenes))])),
        Command::Smooth { common, scenes, params } => (
            CommandKind::Smooth,
            common,
            inputs(&[("scenes", Some(&scenes)), ("params", Some(&params))]),
        ),
        Command::Adapt { common, source, target, base } => (
            CommandKind::Adapt,
            common,
            inputs(&[("source", Some(&source)), ("target", Some(&target)), ("base", base.as_ref())]),
        ),
        Command::Recipe { common } => (CommandKind::Recipe, common, BTreeMap::new()),
        replay @ Command::Replay { .. } => return Err(replay),
    })
}

/// Runs one command and writes its manifest.
fn execute(req: &Request<'_>) -> Result<RunManifest, Failure> {
    let start = Instant::now();
    let mut recorded = BTreeMap::new();
    for (name, path) in req.inputs {
        recorded.insert(name.clone(), manifest::record_input(path)?);
    }
    let done = commands::run(req)?;
    let mut artifacts = BTreeMap::new();
    for name in &done.artifacts {
        artifacts.insert(name.clone(), manifest::sha256_file(&req.out.join(name))?);
    }
    let m = RunManifest {
        command: req.kind.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: req.seed,
        workers: req.workers,
        config: done.config,
        inputs: recorded,
        artifacts,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    m.save(req.out)?;
    Ok(m)
}

fn replay(manifest_path: &Path, out: &Path) -> Result<RunManifest, Failure> {
    let old = RunManifest::load(manifest_path)?;
    let kind = CommandKind::parse(&old.command).ok_or_else(|| Failure::usage(format!("unknown command `{}` in manifest", old.command)))?;
    for (name, rec) in &old.inputs {
        let now = manifest::sha256_file(&rec.path)?;
        if now != rec.sha256 {
            return Err(Failure::usage(format!("input `{name}` ({}) changed since the recorded run", rec.path.display())));
        }
    }
    let paths: BTreeMap<String, PathBuf> = old.inputs.iter().map(|(k, r)| (k.clone(), r.path.clone())).collect();
    let req = Request {
        kind,
        config: Some(old.config.clone()),
        overrides: &[],
        seed: old.seed,
        workers: old.workers,
        inputs: &paths,
        out,
    };
    let new = execute(&req)?;
    let differing: Vec<&str> = old
        .artifacts
        .iter()
        .filter(|(name, digest)| new.artifacts.get(*name) != Some(digest))
        .map(|(name, _)| name.as_str())
        .collect();
    if !differing.is_empty() || new.artifacts.len() != old.artifacts.len() {
        return Err(Failure::Mismatch(format!("outputs differ: {}", differing.join(", "))));
    }
    Ok(new)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match split(cli.command) {
        Ok((kind, common, inputs)) => common
            .config
            .as_deref()
            .map(config::read_file)
            .transpose()
            .and_then(|config| {
                execute(&Request {
                    kind,
                    config,
                    overrides: &common.overrides,
                    seed: common.seed,
                    workers: common.workers.max(1),
                    inputs: &inputs,
                    out: &common.out,
                })
            })
            .map(|m| (m, common.out)),
        Err(Command::Replay { manifest, out }) => replay(&manifest, &out).map(|m| (m, out)),
        Err(_) => unreachable!("only replay is left unsplit"),
    };
    match result {
        Ok((m, out)) => {
            println!(
                "{}: wrote {} artifact(s) to {} in {:.2}s",
                m.command,
                m.artifacts.len(),
                out.display(),
                m.wall_time_secs
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
