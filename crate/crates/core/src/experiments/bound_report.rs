use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::write_bound_reports;
use crate::bounds::{analyze_run, ErrorBoundReport};
use crate::error::{DktvError, Result};
use crate::io::{load_run, read_trajectory_csv, write_json};
use crate::linalg::MatrixNorm;
use crate::par::Exec;
use crate::pipeline::{DataBatch, DkrSnapshot};

fn default_run_dir() -> PathBuf {
    PathBuf::from("out/simple_ntvs/g0p8_s0")
}

/// Error-bound reports for a finished run read back from disk. The run
/// directory holds `trajectory.csv` and `snapshots/snapshot_NNNN/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundReportExperiment {
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub norm: MatrixNorm,
}

impl Default for BoundReportExperiment {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Per-run outcome written to `verdict.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundVerdict {
    pub batches: usize,
    /// Some batch has an observed error above its bound.
    pub violated: bool,
    pub violations: usize,
    /// Violations on batches without any flagged assumption breach.
    pub unexplained_violations: usize,
    pub breached_batches: usize,
}

impl BoundVerdict {
    pub fn from_reports(reports: &[ErrorBoundReport]) -> Self {
        Self {
            batches: reports.len(),
            violated: reports.iter().any(|r| r.violated),
            violations: reports.iter().filter(|r| r.violated).count(),
            unexplained_violations: reports.iter().filter(|r| r.violated && !r.breaches.any()).count(),
            breached_batches: reports.iter().filter(|r| r.breaches.any()).count(),
        }
    }
}

impl BoundReportExperiment {
    pub fn validate(&self) -> Result<()> {
        Ok(())
    }

    pub fn run(&self, exec: Exec) -> Result<Vec<ErrorBoundReport>> {
        let snapshots = load_run(&self.run_dir.join("snapshots"))?;
        let (_, states, inputs) = read_trajectory_csv(&self.run_dir.join("trajectory.csv"))?;
        let inputs = if inputs.nrows() == 0 {
            DMatrix::zeros(snapshots[0].m(), inputs.ncols())
        } else {
            inputs
        };
        let batches = batches_from_snapshots(&snapshots, &states, &inputs)?;
        analyze_run(&snapshots, &batches, &states, &inputs, self.norm, exec)
    }

    /// `bounds.csv`, `bounds.json` and `verdict.json` under `dir`.
    pub fn write_artifacts(dir: &Path, reports: &[ErrorBoundReport]) -> Result<BoundVerdict> {
        write_bound_reports(dir, reports)?;
        let verdict = BoundVerdict::from_reports(reports);
        write_json(&dir.join("verdict.json"), &verdict)?;
        Ok(verdict)
    }
}

/// Rebuilds the batch of every snapshot from its recorded start and size.
pub fn batches_from_snapshots(snapshots: &[DkrSnapshot], states: &DMatrix<f64>, inputs: &DMatrix<f64>) -> Result<Vec<DataBatch>> {
    snapshots
        .iter()
        .map(|s| {
            let end = s.k_start + s.beta;
            if end >= states.ncols() || end > inputs.ncols() {
                return Err(DktvError::NotEnoughSamples {
                    have: states.ncols(),
                    need: end + 1,
                });
            }
            DataBatch::new(
                s.tau,
                s.k_start,
                states.columns(s.k_start, s.beta).into_owned(),
                states.columns(s.k_start + 1, s.beta).into_owned(),
                inputs.columns(s.k_start, s.beta).into_owned(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::simple_ntvs::NtvsExperiment;

    fn small_run() -> (tempfile::TempDir, super::super::simple_ntvs::NtvsRun) {
        let mut e = NtvsExperiment::default();
        e.gammas = vec![0.8];
        e.seeds = vec![0];
        e.duration = 6.0;
        e.train.epochs = 20;
        e.train.initial_epochs = 20;
        e.bound_reports = true;
        let run = e.run(Exec::Sequential).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        run.write_artifacts(dir.path()).unwrap();
        (dir, run)
    }

    #[test]
    fn reports_from_disk_match_in_memory() {
        let (dir, run) = small_run();
        let cfg = BoundReportExperiment {
            run_dir: dir.path().join(run.tag()),
            norm: MatrixNorm::default(),
        };
        let reports = cfg.run(Exec::Sequential).unwrap();
        assert_eq!(reports.len(), run.reports.len());
        for (a, b) in reports.iter().zip(&run.reports) {
            assert!((a.total_bound - b.total_bound).abs() <= 1e-12 * b.total_bound.abs().max(1.0));
            assert!((a.max_observed() - b.max_observed()).abs() <= 1e-12);
        }
    }

    #[test]
    fn missing_snapshots_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BoundReportExperiment {
            run_dir: dir.path().to_path_buf(),
            norm: MatrixNorm::default(),
        };
        assert!(matches!(cfg.run(Exec::Sequential), Err(DktvError::MissingSnapshots(_))));
    }

    #[test]
    fn injected_expansive_a_is_flagged() {
        let (dir, run) = small_run();
        let root = dir.path().join(run.tag());
        let mut snapshots = load_run(&root.join("snapshots")).unwrap();
        let r = snapshots[1].r();
        snapshots[1].matrices.a = DMatrix::identity(r, r) * 2.0;
        crate::io::save_run(&root.join("snapshots"), &snapshots).unwrap();
        let cfg = BoundReportExperiment {
            run_dir: root,
            norm: MatrixNorm::Spectral,
        };
        let reports = cfg.run(Exec::Sequential).unwrap();
        assert!((reports[1].breaches.a_norm - 2.0).abs() < 1e-12);
        assert!(reports[1].breaches.a_not_contractive);
        assert!(BoundVerdict::from_reports(&reports).breached_batches >= 1);
    }
}
