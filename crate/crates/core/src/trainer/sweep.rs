//! One training run per compression factor; the final size and accuracy of
//! each run form the size/accuracy locus.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::run::{run_training, RunSummary};
use crate::trainer::load_datasets;

pub const LOCUS_HEADER: &str = "gamma,bits_fraction,weights_fraction,accuracy";
pub const LOCUS_FILE: &str = "locus.csv";

/// `log:lo:hi:n` (n values evenly spaced in log10) or a comma list.
pub fn parse_gammas(spec: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Config(format!("gamma list `{spec}`: {msg}"));
    let values = if let Some(rest) = spec.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [lo, hi, n] = parts.as_slice() else {
            return Err(bad("expected log:lo:hi:n".into()));
        };
        let lo: f64 = lo.parse().map_err(|e| bad(format!("{e}")))?;
        let hi: f64 = hi.parse().map_err(|e| bad(format!("{e}")))?;
        let n: usize = n.parse().map_err(|e| bad(format!("{e}")))?;
        if !(lo > 0.0 && hi > 0.0) || n == 0 {
            return Err(bad("bounds must be positive and n at least 1".into()));
        }
        let (a, b) = (lo.log10(), hi.log10());
        (0..n)
            .map(|i| {
                let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                10f64.powf(a + t * (b - a))
            })
            .collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(bad("values must be non-negative numbers".into()));
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocusRow {
    pub gamma: f64,
    pub bits_fraction: Option<f64>,
    pub weights_fraction: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    /// Exit status the failed run would have produced on its own.
    pub exit_code: Option<u8>,
}

impl LocusRow {
    fn from_summary(gamma: f64, s: &RunSummary) -> Self {
        Self {
            gamma,
            bits_fraction: Some(s.bits_fraction),
            weights_fraction: Some(s.weights_fraction),
            accuracy: Some(s.accuracy),
            error: None,
            exit_code: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "failed".into());
        format!(
            "{},{},{},{}",
            self.gamma,
            f(self.bits_fraction),
            f(self.weights_fraction),
            f(self.accuracy)
        )
    }
}

pub fn locus_csv(rows: &[LocusRow]) -> String {
    let mut s = format!("{LOCUS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Run `cfg` once per γ (same seed each time) into `out/run_{i}`, writing
/// `out/locus.csv`. Individual failures are recorded, not propagated.
pub fn run_sweep(cfg: &TrainConfig, gammas: &[f64], out: &Path) -> Result<Vec<LocusRow>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, eval) = load_datasets(cfg)?;
    let (train, eval) = (Arc::new(train), Arc::new(eval));
    let mut rows = Vec::with_capacity(gammas.len());
    for (i, &gamma) in gammas.iter().enumerate() {
        let run_cfg = TrainConfig { gamma, ..cfg.clone() };
        let dir = out.join(format!("run_{i:02}"));
        let row = match run_training(&run_cfg, &dir, Some((train.clone(), eval.clone()))) {
            Ok(summary) => LocusRow::from_summary(gamma, &summary),
            Err(e) => LocusRow {
                gamma,
                bits_fraction: None,
                weights_fraction: None,
                accuracy: None,
                error: Some(e.to_string()),
                exit_code: Some(e.exit_code()),
            },
        };
        rows.push(row);
        let path = out.join(LOCUS_FILE);
        fs::write(&path, locus_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
