use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "step",
    "loss_total",
    "loss_invariance",
    "loss_redundancy",
    "lr",
    "mean_abs_offdiag",
    "mean_diag",
    "min_feature_std",
    "entropy_proxy",
    "conditional_logdet",
    "probe_top1",
    "wall_clock_s",
];

/// One row per epoch; `step` counts optimizer steps taken so far.
/// Loss columns are means over the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_invariance: f64,
    pub loss_redundancy: f64,
    pub lr: f64,
    pub mean_abs_offdiag: f64,
    pub mean_diag: f64,
    pub min_feature_std: f64,
    pub entropy_proxy: f64,
    pub conditional_logdet: Option<f64>,
    pub probe_top1: Option<f64>,
    pub wall_clock_s: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_header() -> String {
        METRICS_COLUMNS.join(",")
    }

    /// Shortest round-trip formatting, so parsing recovers the exact values.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_invariance,
            self.loss_redundancy,
            self.lr,
            self.mean_abs_offdiag,
            self.mean_diag,
            self.min_feature_std,
            self.entropy_proxy,
            opt(self.conditional_logdet),
            opt(self.probe_top1),
            opt(self.wall_clock_s),
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != METRICS_COLUMNS.len() {
            return Err(Error::Format(format!(
                "metrics row has {} cells, expected {}",
                cells.len(),
                METRICS_COLUMNS.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i].parse().map_err(|_| {
                Error::Format(format!("bad {} value `{}`", METRICS_COLUMNS[i], cells[i]))
            })
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if cells[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(MetricsRecord {
            epoch: num(0)? as usize,
            step: num(1)? as usize,
            loss_total: num(2)?,
            loss_invariance: num(3)?,
            loss_redundancy: num(4)?,
            lr: num(5)?,
            mean_abs_offdiag: num(6)?,
            mean_diag: num(7)?,
            min_feature_std: num(8)?,
            entropy_proxy: num(9)?,
            conditional_logdet: opt(10)?,
            probe_top1: opt(11)?,
            wall_clock_s: opt(12)?,
        })
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = MetricsRecord::csv_header();
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("no data: empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let missing: Vec<&str> = METRICS_COLUMNS
        .iter()
        .copied()
        .filter(|c| !cols.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "metrics file is missing columns: {}",
            missing.join(", ")
        )));
    }
    if cols != METRICS_COLUMNS {
        return Err(Error::Format("metrics columns are out of order".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRecord::parse_row)
        .collect()
}
