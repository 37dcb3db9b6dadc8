//! A training run on disk: manifest, metrics, checkpoint and size report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{build_cifar_net, checkpoint};
use crate::size::{SizeReport, FLOAT_BITS};
use crate::trainer::{load_datasets, train, FileSink, MetricsRow, PruneEvent, StopReason};

pub const MANIFEST: &str = "run.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SIZE_REPORT: &str = "size_report.json";
pub const PRUNE_LOG: &str = "prune_events.json";

/// Content hash of the configuration, computed like a git blob id but with
/// SHA-256: `sha256("blob {len}\0{json}")`.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", json.len()).as_bytes());
    h.update(json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics_csv: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub checkpoint: PathBuf,
    pub size_report: PathBuf,
    pub prune_log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: RunOutputs,
    pub steps: Option<usize>,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

/// Final state of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_row: MetricsRow,
    pub size: SizeReport,
    pub accuracy: f64,
    /// Stored bits relative to 32-bit floats for every starting weight.
    pub bits_fraction: f64,
    /// Surviving weights relative to the starting count.
    pub weights_fraction: f64,
    pub steps: usize,
    pub stop_reason: StopReason,
    pub prune_events: Vec<PruneEvent>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Train according to `cfg`, writing every artifact into `out`. Datasets
/// are loaded from the configuration unless supplied.
pub fn run_training(cfg: &TrainConfig, out: &Path, data: Option<(Arc<Dataset>, Arc<Dataset>)>) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outputs = RunOutputs {
        metrics_csv: PathBuf::from(METRICS_CSV),
        metrics_jsonl: PathBuf::from(METRICS_JSONL),
        checkpoint: PathBuf::from(CHECKPOINT_DIR),
        size_report: PathBuf::from(SIZE_REPORT),
        prune_log: PathBuf::from(PRUNE_LOG),
    };
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
        outputs,
        steps: None,
        stop_reason: None,
        error: None,
    };
    let mpath = out.join(MANIFEST);
    write_json(&mpath, &manifest)?;

    let result = (|| -> Result<RunSummary> {
        let (train_set, eval_set) = match data {
            Some(d) => d,
            None => {
                let (a, b) = load_datasets(cfg)?;
                (Arc::new(a), Arc::new(b))
            }
        };
        let net = build_cifar_net(&cfg.widths(), &cfg.build_options())?;
        let mut sink = FileSink::create(&out.join(METRICS_CSV), &out.join(METRICS_JSONL))?;
        let outcome = train(net, train_set, &eval_set, cfg, &mut sink)?;
        sink.finish()?;
        checkpoint::save(&outcome.net, &out.join(CHECKPOINT_DIR))?;
        write_json(&out.join(SIZE_REPORT), &outcome.final_size)?;
        write_json(&out.join(PRUNE_LOG), &outcome.prune_events)?;
        let n = outcome.final_size.n as f64;
        Ok(RunSummary {
            final_row: outcome.history.last().cloned().expect("at least the initial row"),
            accuracy: outcome.final_eval.accuracy,
            bits_fraction: outcome.final_size.total_bits / (FLOAT_BITS * n),
            weights_fraction: outcome.final_size.live_weights as f64 / n,
            size: outcome.final_size,
            steps: outcome.steps,
            stop_reason: outcome.stop_reason,
            prune_events: outcome.prune_events,
        })
    })();

    manifest.finished_at = Some(now());
    match &result {
        Ok(s) => {
            manifest.status = "completed".into();
            manifest.steps = Some(s.steps);
            manifest.stop_reason = Some(s.stop_reason);
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    write_json(&mpath, &manifest)?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        b.gamma = 0.2;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
