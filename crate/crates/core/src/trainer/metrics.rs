use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,task_loss,Q,total_bits,live_channels,flops,train_acc,eval_acc,step_ms,lr_w,lr_q";

/// State of the run after a step; step 0 is the initial network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: Option<f64>,
    #[serde(rename = "Q")]
    pub q: f64,
    pub total_bits: f64,
    pub live_channels: usize,
    pub flops: u64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    pub step_ms: Option<f64>,
    pub lr_w: f64,
    pub lr_q: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            opt(self.task_loss),
            self.q,
            self.total_bits,
            self.live_channels,
            self.flops,
            opt(self.train_acc),
            opt(self.eval_acc),
            opt(self.step_ms),
            self.lr_w,
            self.lr_q
        )
    }
}

/// Receives every row as it is produced.
pub trait MetricsSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards rows.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// CSV plus a JSON-lines mirror.
pub struct FileSink {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
    csv_path: std::path::PathBuf,
}

impl FileSink {
    pub fn create(csv: &Path, jsonl: &Path) -> Result<Self> {
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
        let mut s = Self {
            csv: open(csv)?,
            jsonl: open(jsonl)?,
            csv_path: csv.to_path_buf(),
        };
        writeln!(s.csv, "{CSV_HEADER}").map_err(|e| Error::io(csv, e))?;
        Ok(s)
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        self.jsonl.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

impl MetricsSink for FileSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        let p = self.csv_path.clone();
        writeln!(self.csv, "{}", row.csv_line()).map_err(|e| Error::io(&p, e))?;
        writeln!(self.jsonl, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(&p, e))
    }
}

/// Parse a metrics CSV written by [`FileSink`].
pub fn read_csv(text: &str) -> std::result::Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("unexpected header".into());
    }
    let num = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|e| format!("{s}: {e}"))
        }
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(format!("expected 11 fields in `{line}`"));
            }
            let req = |s: &str| num(s)?.ok_or_else(|| format!("missing value in `{line}`"));
            Ok(MetricsRow {
                step: f[0].parse().map_err(|e| format!("{e}"))?,
                task_loss: num(f[1])?,
                q: req(f[2])?,
                total_bits: req(f[3])?,
                live_channels: f[4].parse().map_err(|e| format!("{e}"))?,
                flops: f[5].parse().map_err(|e| format!("{e}"))?,
                train_acc: num(f[6])?,
                eval_acc: num(f[7])?,
                step_ms: num(f[8])?,
                lr_w: req(f[9])?,
                lr_q: req(f[10])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let row = MetricsRow {
            step: 3,
            task_loss: Some(1.25),
            q: 7.5,
            total_bits: 1024.0,
            live_channels: 40,
            flops: 99,
            train_acc: Some(0.5),
            eval_acc: None,
            step_ms: None,
            lr_w: 1e-3,
            lr_q: 0.5,
        };
        let text = format!("{CSV_HEADER}\n{}\n", row.csv_line());
        assert_eq!(read_csv(&text).unwrap(), vec![row.clone()]);
        assert_eq!(row.csv_line(), "3,1.25,7.5,1024,40,99,0.5,,,0.001,0.5");
    }
}
