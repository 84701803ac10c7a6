use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetSpec;
use super::quad::QuadExperiment;
use super::simple_ntvs::dktv_estimates;
use super::{write_bound_reports, write_error_table, EstimateTrace};
use crate::bounds::{analyze_run, ErrorBoundReport};
use crate::error::{DktvError, Result};
use crate::io::{matrix_hash, write_json, write_table};
use crate::linalg::{vstack, MatrixNorm};
use crate::net::Activation;
use crate::par::{self, Exec};
use crate::pipeline::{partition_stream, run_online, TrainConfig};
use crate::systems::SampledTrajectory;

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
/// Quadcopter defaults with an 8-wide lift, so that the narrowest hidden
/// layer can still give the lifted batch full row rank.
fn default_base() -> QuadExperiment {
    let mut base = QuadExperiment::default();
    base.net = NetSpec::new(&[(64, Activation::Gaussian), (8, Activation::Relu)]);
    base
}
fn default_true() -> bool {
    true
}

/// DKTV on one quadcopter flight with the last hidden layer resized to each
/// width in `widths`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NhSweepExperiment {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Seed of the flight and of every network initialization.
    #[serde(default)]
    pub seed: u64,
    /// Flight, batching and training settings. Only the hidden widths of
    /// `base.net` are overridden; `base.seeds` is ignored.
    #[serde(default = "default_base")]
    pub base: QuadExperiment,
    #[serde(default = "default_true")]
    pub bound_reports: bool,
    #[serde(default)]
    pub norm: MatrixNorm,
}

impl Default for NhSweepExperiment {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl NhSweepExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(DktvError::InvalidConfig("widths must be a non-empty list of positive sizes".into()));
        }
        if self.base.net.layers.len() < 2 {
            return Err(DktvError::InvalidConfig("the swept network needs a hidden layer".into()));
        }
        let r = self.base.net.lifted_dim(12);
        if let Some(w) = self.widths.iter().find(|&&w| w < r) {
            log::warn!("hidden width {w} is below the lifted dimension {r}; the rank condition will likely fail");
        }
        self.base.validate()
    }

    /// Runs every width on the same flight. Each replica hashes the data it
    /// trained on and the hashes are compared after the join.
    pub fn run(&self, exec: Exec) -> Result<NhSweepRun> {
        self.validate()?;
        let traj = self.base.sample(self.seed)?;
        let expected = stream_hash(&traj);
        let points: Vec<WidthResult> = par::map(exec, &self.widths, |&w| self.run_width(w, &traj))
            .into_iter()
            .collect::<Result<_>>()?;
        if let Some(p) = points.iter().find(|p| p.data_hash != expected) {
            return Err(DktvError::InvalidConfig(format!("width {} trained on different data", p.width)));
        }
        Ok(NhSweepRun {
            data_hash: expected,
            trajectory: traj,
            points,
        })
    }

    fn run_width(&self, width: usize, traj: &SampledTrajectory) -> Result<WidthResult> {
        let local = traj.clone();
        let batches = partition_stream(&local.states, &local.inputs, &self.base.beta)?;
        let net = self.base.net.with_hidden_width(width);
        let train = TrainConfig {
            seed: self.seed,
            ..self.base.train.clone()
        };
        let snapshots = run_online(&batches, net.build(local.states.nrows()), &train)?;
        let trace = dktv_estimates(&snapshots, &batches, &local.states)?;
        let reports = if self.bound_reports {
            analyze_run(&snapshots, &batches, &local.states, &local.inputs, self.norm, Exec::Sequential)?
        } else {
            Vec::new()
        };
        Ok(WidthResult {
            width,
            data_hash: stream_hash(&local),
            diverged_batches: snapshots.iter().filter(|s| s.diverged).count(),
            trace,
            reports,
        })
    }
}

/// SHA-256 of the stacked states and zero-padded inputs.
pub fn stream_hash(traj: &SampledTrajectory) -> String {
    let n = traj.states.ncols();
    let mut u = nalgebra::DMatrix::zeros(traj.inputs.nrows(), n);
    u.columns_mut(0, traj.inputs.ncols()).copy_from(&traj.inputs);
    matrix_hash(&vstack(&traj.states, &u))
}

#[derive(Clone, Debug)]
pub struct WidthResult {
    pub width: usize,
    pub data_hash: String,
    pub diverged_batches: usize,
    pub trace: EstimateTrace,
    pub reports: Vec<ErrorBoundReport>,
}

#[derive(Clone, Debug)]
pub struct NhSweepRun {
    pub data_hash: String,
    pub trajectory: SampledTrajectory,
    pub points: Vec<WidthResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NhSweepSummary {
    pub data_hash: String,
    pub widths: Vec<usize>,
    pub mean_errors: Vec<f64>,
    /// Mean error at the largest width is below the one at the smallest.
    pub endpoint_decrease: bool,
}

impl NhSweepRun {
    pub fn mean_error(&self, width: usize) -> Option<f64> {
        self.points.iter().find(|p| p.width == width).map(|p| p.trace.mean_error())
    }

    pub fn summary(&self) -> NhSweepSummary {
        let mut pts: Vec<&WidthResult> = self.points.iter().collect();
        pts.sort_by_key(|p| p.width);
        let mean_errors: Vec<f64> = pts.iter().map(|p| p.trace.mean_error()).collect();
        let endpoint_decrease = match (mean_errors.first(), mean_errors.last()) {
            (Some(a), Some(b)) if mean_errors.len() > 1 => b < a,
            _ => false,
        };
        NhSweepSummary {
            data_hash: self.data_hash.clone(),
            widths: pts.iter().map(|p| p.width).collect(),
            mean_errors,
            endpoint_decrease,
        }
    }

    /// `nh_sweep.csv` (`n_h, mean_error, max_error, diverged_batches,
    /// bound_violations`), `errors.csv` with one column per width, per-width
    /// bound reports under `nh<w>/` and `summary.json`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let headers: Vec<String> = ["n_h", "mean_error", "max_error", "diverged_batches", "bound_violations"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<Option<f64>>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    Some(p.width as f64),
                    Some(p.trace.mean_error()),
                    Some(p.trace.max_error()),
                    Some(p.diverged_batches as f64),
                    Some(p.reports.iter().filter(|r| r.violated).count() as f64),
                ]
            })
            .collect();
        write_table(&dir.join("nh_sweep.csv"), &headers, &rows)?;
        let names: Vec<String> = self.points.iter().map(|p| format!("e_nh{}", p.width)).collect();
        let cols: Vec<(&str, &EstimateTrace)> = names.iter().zip(&self.points).map(|(n, p)| (n.as_str(), &p.trace)).collect();
        write_error_table(&dir.join("errors.csv"), &self.trajectory.times, &cols)?;
        for p in &self.points {
            if !p.reports.is_empty() {
                write_bound_reports(&dir.join(format!("nh{}", p.width)), &p.reports)?;
            }
        }
        write_json(&dir.join("summary.json"), &self.summary())
    }
}
