//! Desk-scale experiments: residual versus plain training speed, and the
//! residual-scale sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run, ReportRow, RunConfig, TrainError};
use crate::zoo::Variant;

pub const PLAIN_CSV: &str = "plain.csv";
pub const RESIDUAL_CSV: &str = "residual.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "residual_scale,width,dead_network,final_loss,top1_error,status";

/// First step at which the trailing mean of the batch top-1 error over
/// `window` rows is at or below `threshold`.
pub fn steps_to_threshold(rows: &[ReportRow], threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut sum = 0.0;
    for (i, r) in rows.iter().enumerate() {
        sum += r.top1;
        if i >= window {
            sum -= rows[i - window].top1;
        }
        let n = (i + 1).min(window);
        if i + 1 >= window && sum / n as f64 <= threshold {
            return Some(r.step);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub name: String,
    pub steps: usize,
    pub steps_to_threshold: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_top1_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVsPlain {
    pub threshold: f64,
    pub window: usize,
    pub plain: CurveSummary,
    pub residual: CurveSummary,
    /// `"residual"`, `"plain"`, `"tie"` or `"undetermined"` (neither reached
    /// the threshold). Recorded, not asserted.
    pub faster: String,
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

/// Trains the pure Inception-v4 layout and its residualized twin (same
/// widths, seeds and data) and writes `plain.csv`, `residual.csv` and
/// `summary.json` into `out`.
pub fn residual_vs_plain(base: &RunConfig, threshold: f64, window: usize, out: &Path) -> Result<ResidualVsPlain, TrainError> {
    fs::create_dir_all(out).map_err(|e| TrainError::Io(format!("{}: {e}", out.display())))?;
    let mut summaries = Vec::new();
    for (name, residualize, file) in [("plain", false, PLAIN_CSV), ("residual", true, RESIDUAL_CSV)] {
        let mut config = base.clone();
        config.arch.variant = Variant::InceptionV4;
        config.arch.residualize = residualize;
        let (_, output) = run(&config)?;
        let report = output.report();
        write(&out.join(file), &report.to_csv())?;
        summaries.push(CurveSummary {
            name: name.to_string(),
            steps: report.rows.len(),
            steps_to_threshold: steps_to_threshold(&report.rows, threshold, window),
            final_loss: report.final_loss(),
            final_top1_error: report.final_eval.top1_error,
        });
    }
    let residual = summaries.pop().expect("two runs");
    let plain = summaries.pop().expect("two runs");
    let faster = match (plain.steps_to_threshold, residual.steps_to_threshold) {
        (Some(p), Some(r)) if r < p => "residual",
        (Some(p), Some(r)) if p < r => "plain",
        (Some(_), Some(_)) => "tie",
        (None, Some(_)) => "residual",
        (Some(_), None) => "plain",
        (None, None) => "undetermined",
    }
    .to_string();
    let summary = ResidualVsPlain {
        threshold,
        window,
        plain,
        residual,
        faster,
    };
    write(
        &out.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub residual_scale: f64,
    pub width: f64,
    pub dead_network: bool,
    pub final_loss: Option<f64>,
    pub top1_error: Option<f64>,
    /// `ok`, or the error that stopped the run (e.g. a non-finite loss).
    pub status: String,
}

/// Trains the residual architecture of `base` at every `(scale, width)` pair
/// and records the dead-network flag and final loss of each run. Runs that
/// diverge are recorded with their error instead of aborting the sweep.
pub fn scaling_sweep(base: &RunConfig, scales: &[f64], widths: &[f64], out: &Path) -> Result<Vec<SweepRow>, TrainError> {
    let curves = out.join("curves");
    fs::create_dir_all(&curves).map_err(|e| TrainError::Io(format!("{}: {e}", curves.display())))?;
    let mut rows = Vec::new();
    for &width in widths {
        for &scale in scales {
            let mut config = base.clone();
            config.arch.width_multiplier = width;
            config.arch.residual_scale = scale;
            config.train.residual_scale = None;
            if !config.arch.variant.is_residual() {
                config.arch.residualize = true;
            }
            let row = match run(&config) {
                Ok((_, output)) => {
                    let report = output.report();
                    write(&curves.join(format!("scale{scale}_width{width}.csv")), &report.to_csv())?;
                    SweepRow {
                        residual_scale: scale,
                        width,
                        dead_network: report.dead_network,
                        final_loss: report.final_loss(),
                        top1_error: Some(report.final_eval.top1_error),
                        status: "ok".into(),
                    }
                }
                Err(e @ TrainError::NonFinite { .. }) => SweepRow {
                    residual_scale: scale,
                    width,
                    dead_network: false,
                    final_loss: None,
                    top1_error: None,
                    status: e.to_string(),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.residual_scale,
            r.width,
            r.dead_network,
            opt(r.final_loss),
            opt(r.top1_error),
            r.status.replace(',', ";")
        );
    }
    write(&out.join(SWEEP_CSV), &csv)?;
    write(
        &out.join("sweep.json"),
        &serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    Ok(rows)
}
