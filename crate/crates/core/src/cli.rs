//! Command-line entry point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Profile, TrainConfig};
use crate::data::{load_cifar10_test, read_records, synthetic_dataset, DataError, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::network::{checkpoint, Network};
use crate::pruner::{find_removable, keep_one_survivor, prune_verified, PruneOptions, BIAS_TOL, PRESERVATION_TOL};
use crate::run::run_training;
use crate::size::{network_size, SizeMode, SizeReport};
use crate::trainer::sweep::{locus_csv, parse_gammas, run_sweep};
use crate::trainer::{evaluate, DATA_ENV};

pub const PRUNE_REPORT: &str = "prune_report.json";
pub const SIZE_REPORT: &str = "size_report.json";
/// Random inputs compared before and after an offline prune.
pub const PRESERVATION_PROBES: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "selfcomp", version, about = "Quantization-aware training with learned bit depths and channel removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write its run directory.
    Train(TrainArgs),
    /// Train once per compression factor and write the size/accuracy locus.
    Sweep(SweepArgs),
    /// Accuracy and loss of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Per-layer size and live channel counts of a checkpoint.
    SizeReport(SizeReportArgs),
    /// Remove zero-bit channels from a checkpoint.
    Prune(PruneArgs),
    /// Print the effective configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON object of configuration keys; absent keys come from the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub profile: Profile,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let base = TrainConfig::profile(self.profile);
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path, &base)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `log:lo:hi:n` or a comma-separated list.
    #[arg(long)]
    pub gammas: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CIFAR-10 directory (its test batch is used), a single binary batch
    /// file, or `synthetic:<kind>:<n>:<seed>`. Falls back to `SELFCOMP_DATA`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SizeReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "coupled")]
    pub mode: SizeMode,
    /// Where to write the JSON report; defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = BIAS_TOL)]
    pub bias_tol: f32,
    /// Seed of the random inputs used for the preservation check.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse arguments and run; returns the process exit status.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SizeReport(a) => cmd_size_report(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Config(a) => {
            println!("{}", a.resolve()?.to_json());
            Ok(0)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    out: &'a Path,
    steps: usize,
    stop_reason: crate::trainer::StopReason,
    accuracy: f64,
    #[serde(rename = "Q")]
    q: f64,
    bits_fraction: f64,
    weights_fraction: f64,
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let cfg = a.config.resolve()?;
    let s = run_training(&cfg, &a.out, None)?;
    print_json(&TrainSummary {
        out: &a.out,
        steps: s.steps,
        stop_reason: s.stop_reason,
        accuracy: s.accuracy,
        q: s.size.q,
        bits_fraction: s.bits_fraction,
        weights_fraction: s.weights_fraction,
    })?;
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs) -> Result<u8> {
    let cfg = a.config.resolve()?;
    let gammas = parse_gammas(&a.gammas)?;
    let rows = run_sweep(&cfg, &gammas, &a.out)?;
    print!("{}", locus_csv(&rows));
    for r in rows.iter().filter(|r| !r.succeeded()) {
        eprintln!("gamma {}: {}", r.gamma, r.error.as_deref().unwrap_or_default());
    }
    if rows.iter().any(|r| r.succeeded()) {
        Ok(0)
    } else {
        Ok(rows.first().and_then(|r| r.exit_code).unwrap_or(1))
    }
}

/// Resolve an evaluation data argument (see [`EvaluateArgs::data`]).
pub fn load_eval_data(spec: Option<&str>) -> Result<Dataset> {
    let spec = match spec {
        Some(s) => s.to_string(),
        None => std::env::var(DATA_ENV)
            .map_err(|_| DataError::Invalid(format!("no --data given and {DATA_ENV} is not set")))?,
    };
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || DataError::Invalid(format!("`{spec}`: expected synthetic:<kind>:<n>:<seed>"));
        let [kind, n, seed] = parts.as_slice() else {
            return Err(bad().into());
        };
        let kind: SyntheticKind = kind.parse()?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        return Ok(synthetic_dataset(kind, n, seed)?);
    }
    let path = PathBuf::from(&spec);
    let data = if path.is_dir() {
        load_cifar10_test(&path)?
    } else {
        read_records(&path)?
    };
    Ok(data)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<u8> {
    if a.batch_size == 0 {
        return Err(Error::Config("--batch-size must be positive".into()));
    }
    let net = checkpoint::load(&a.checkpoint)?;
    let data = load_eval_data(a.data.as_deref())?;
    print_json(&evaluate(&net, &data, a.batch_size)?)?;
    Ok(0)
}

/// Per-layer table of live channels against construction widths.
pub fn size_table(net: &Network, report: &SizeReport) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>6} {:>7} {:>14} {:>12}\n",
        "layer", "initial", "live", "mean_b", "storage_bits", "weights"
    );
    for l in &report.layers {
        let mean_b = net
            .bits(&l.layer)
            .filter(|b| !b.is_empty())
            .map(|b| format!("{:.2}", b.iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64))
            .unwrap_or_else(|| "float".into());
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>6} {:>7} {:>14.0} {:>12}",
            l.layer, l.initial_channels, l.live_channels, mean_b, l.storage_bits, l.weights
        );
    }
    let _ = writeln!(
        s,
        "Q = {:.6} bits per starting weight; {} of {} weights live; {:.0} bits stored",
        report.q, report.live_weights, report.n, report.total_bits
    );
    s
}

fn cmd_size_report(a: &SizeReportArgs) -> Result<u8> {
    let net = checkpoint::load(&a.checkpoint)?;
    let report = network_size(&net, a.mode);
    let path = a.out.clone().unwrap_or_else(|| a.checkpoint.join(SIZE_REPORT));
    write_json(&path, &report)?;
    print!("{}", size_table(&net, &report));
    print_json(&report)?;
    Ok(0)
}

fn cmd_prune(a: &PruneArgs) -> Result<u8> {
    if !(a.bias_tol.is_finite() && a.bias_tol > 0.0) {
        return Err(Error::Config("--bias-tol must be positive".into()));
    }
    let mut net = checkpoint::load(&a.input)?;
    let opts = PruneOptions {
        bias_tol: a.bias_tol,
        ..PruneOptions::default()
    };
    let mut set = find_removable(&net, &opts);
    keep_one_survivor(&net, &mut set);
    let report = prune_verified(&mut net, &set, PRESERVATION_PROBES, a.seed, PRESERVATION_TOL)?;
    checkpoint::save(&net, &a.out)?;
    write_json(&a.out.join(PRUNE_REPORT), &report)?;
    print_json(&report)?;
    Ok(0)
}
