//! End-to-end experiment runners behind the CLI subcommands.
//!
//! Each experiment has a JSON-deserializable configuration with defaults for
//! every field, a `run` that returns in-memory results, and a writer that
//! emits the CSV and JSON artifacts.

pub mod bound_report;
pub mod cartpole;
pub mod config;
pub mod nh_sweep;
pub mod quad;
pub mod simple_ntvs;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use config::{check_batch_size, ExperimentConfig, LayerWidth, NetSpec};

use crate::bounds::ErrorBoundReport;
use crate::error::Result;
use crate::io::{write_json, write_table};

/// Estimated states next to the observed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateTrace {
    /// n x (N + 1); column k estimates x_k.
    pub estimates: DMatrix<f64>,
    /// `||x_hat_k - x_k||` for every k; zero where nothing was estimated.
    pub errors: Vec<f64>,
    /// Samples `1..=covered` carry an estimate.
    pub covered: usize,
}

impl EstimateTrace {
    pub fn new(estimates: DMatrix<f64>, states: &DMatrix<f64>, covered: usize) -> Self {
        let errors = (0..states.ncols())
            .map(|k| (estimates.column(k) - states.column(k)).norm())
            .collect();
        Self {
            estimates,
            errors,
            covered,
        }
    }

    /// Mean error over the estimated samples `1..=covered`.
    pub fn mean_error(&self) -> f64 {
        if self.covered == 0 {
            return 0.0;
        }
        self.errors[1..=self.covered].iter().sum::<f64>() / self.covered as f64
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().cloned().fold(0.0, f64::max)
    }
}

pub(crate) fn fmt_tag(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

/// `k, t, <name>...`, one row per sample.
pub(crate) fn write_error_table(path: &Path, times: &[f64], traces: &[(&str, &EstimateTrace)]) -> Result<()> {
    let mut headers = vec!["k".to_string(), "t".to_string()];
    headers.extend(traces.iter().map(|(n, _)| n.to_string()));
    let rows: Vec<Vec<Option<f64>>> = (0..times.len())
        .map(|k| {
            let mut row = vec![Some(k as f64), Some(times[k])];
            row.extend(traces.iter().map(|(_, t)| t.errors.get(k).copied()));
            row
        })
        .collect();
    write_table(path, &headers, &rows)
}

/// `bounds.csv` with `(tau, k, e_norm, total_bound)` rows and the full
/// reports in `bounds.json`.
pub(crate) fn write_bound_reports(dir: &Path, reports: &[ErrorBoundReport]) -> Result<()> {
    let headers: Vec<String> = ["tau", "k", "e_norm", "total_bound"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<Option<f64>>> = reports
        .iter()
        .flat_map(|r| {
            r.observed_errors
                .iter()
                .map(move |e| vec![Some(r.tau as f64), Some(e.k as f64), Some(e.norm), Some(r.total_bound)])
        })
        .collect();
    write_table(&dir.join("bounds.csv"), &headers, &rows)?;
    write_json(&dir.join("bounds.json"), reports)
}
