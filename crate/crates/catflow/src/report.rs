//! Metric CSV files and pmf grids (CSV and binary PGM).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use catflow_core::train::PmfGrid;

use crate::error::{io_err, Result};

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow<'a> {
    pub epoch: usize,
    pub split: &'a str,
    pub metric: &'a str,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow<'_>]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{:?}\n", r.epoch, r.split, r.metric, r.value));
    }
    s
}

/// Append rows, writing the header if the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricRow<'_>]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let text = metrics_csv(rows);
    let body = if fresh { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
    file.write_all(body.as_bytes()).map_err(io_err(path))
}

/// `x0,x1,prob` lines.
pub fn pmf_csv(pmf: &PmfGrid) -> String {
    let k = pmf.classes;
    let mut s = String::from("x0,x1,prob\n");
    for a in 0..k {
        for b in 0..k {
            s.push_str(&format!("{a},{b},{:?}\n", pmf.get(a, b)));
        }
    }
    s
}

/// Binary graymap (P5). `x0` runs left to right, `x1` bottom to top; each
/// cell is a `scale x scale` block with brightness proportional to its mass.
pub fn pmf_pgm(pmf: &PmfGrid, scale: usize) -> Vec<u8> {
    let k = pmf.classes;
    let scale = scale.max(1);
    let side = k * scale;
    let max = pmf.probs.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for row in 0..side {
        let x1 = k - 1 - row / scale;
        for col in 0..side {
            let p = pmf.get(col / scale, x1);
            let level = if max > 0.0 { (255.0 * p / max).round() } else { 0.0 };
            out.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_pmf(prefix: &Path, pmf: &PmfGrid, scale: usize) -> Result<()> {
    let csv = prefix.with_extension("csv");
    fs::write(&csv, pmf_csv(pmf)).map_err(io_err(&csv))?;
    let pgm = prefix.with_extension("pgm");
    fs::write(&pgm, pmf_pgm(pmf, scale)).map_err(io_err(&pgm))
}
