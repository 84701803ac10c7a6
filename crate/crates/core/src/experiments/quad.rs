use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{check_batch_size, NetSpec};
use super::simple_ntvs::dktv_estimates;
use super::{write_error_table, EstimateTrace};
use crate::baselines::{single_dnn_predict, single_dnn_train, SingleDnnModel};
use crate::error::{DktvError, Result};
use crate::io::{save_run, write_json, write_table, write_trajectory_csv};
use crate::net::Activation;
use crate::par::{self, Exec};
use crate::pipeline::{partition_stream, run_online, BetaSchedule, DataBatch, DkrSnapshot, TrainConfig};
use crate::systems::{sample_trajectory, QuadConfig, QuadController, Quadcopter, SampleOptions, SampledTrajectory};

fn default_duration() -> f64 {
    21.0
}
fn default_beta() -> BetaSchedule {
    BetaSchedule::Constant(30)
}
fn default_net() -> NetSpec {
    NetSpec::new(&[(64, Activation::Gaussian), (16, Activation::Relu)])
}
fn default_dnn_output() -> Activation {
    Activation::Identity
}
/// Yaw sweep plus thrust and torque dither so that all four inputs excite
/// the batches.
fn default_controller() -> QuadController {
    QuadController::default().with_excitation(0.2, [0.5, 0.01, 0.01, 0.01])
}
fn default_train() -> TrainConfig {
    TrainConfig {
        initial_epochs: 200,
        ..TrainConfig::default()
    }
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadExperiment {
    #[serde(default)]
    pub quad: QuadConfig,
    #[serde(default = "default_controller")]
    pub controller: QuadController,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_beta")]
    pub beta: BetaSchedule,
    /// Observable layers. The single network reuses the hidden layers and
    /// ends in a state-sized layer with `dnn_output` activation.
    #[serde(default = "default_net")]
    pub net: NetSpec,
    #[serde(default = "default_dnn_output")]
    pub dnn_output: Activation,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for QuadExperiment {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl QuadExperiment {
    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        check_batch_size(&self.beta, self.net.lifted_dim(12), 4)?;
        if self.seeds.is_empty() {
            return Err(DktvError::InvalidConfig("need at least one seed".into()));
        }
        Ok(())
    }

    /// Disturbed flight for `seed`; the disturbance stream is seeded with
    /// `disturbance_seed + seed`.
    pub fn sample(&self, seed: u64) -> Result<SampledTrajectory> {
        let sys = Quadcopter::new(self.quad.clone());
        let mut ctrl = self.controller.clone().for_model(&self.quad);
        let mut opts = SampleOptions::new((self.duration / 0.1).round() as usize, self.quad.disturbance_seed.wrapping_add(seed));
        opts.disturbance_scale = self.quad.disturbance_scale;
        let traj = sample_trajectory(&sys, &mut ctrl, &DVector::zeros(12), &opts)?;
        if traj.truncated {
            return Err(DktvError::NonFinite("quadcopter flight".into()));
        }
        Ok(traj)
    }

    pub fn run(&self, exec: Exec) -> Result<Vec<QuadRun>> {
        self.validate()?;
        par::map(exec, &self.seeds, |&s| self.run_one(s)).into_iter().collect()
    }

    pub fn run_one(&self, seed: u64) -> Result<QuadRun> {
        let traj = self.sample(seed)?;
        let batches = partition_stream(&traj.states, &traj.inputs, &self.beta)?;
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let snapshots = run_online(&batches, self.net.build(12), &train)?;
        let hidden: Vec<(usize, Activation)> = self.net.layers[..self.net.layers.len() - 1]
            .iter()
            .map(|l| (l.width, l.activation))
            .collect();
        let mut dnn = SingleDnnModel::new(12, 4, &hidden, self.dnn_output, seed)?;
        let mut dnn_traces = Vec::with_capacity(batches.len());
        let mut dnn_models = Vec::with_capacity(batches.len());
        let mut dnn_diverged = 0;
        for (i, b) in batches.iter().enumerate() {
            let cfg = TrainConfig {
                epochs: if i == 0 { train.initial_epochs } else { train.epochs },
                ..train.clone()
            };
            let res = single_dnn_train(&mut dnn, b, &cfg)?;
            dnn_diverged += usize::from(res.diverged);
            dnn_traces.push(res.loss_trace);
            dnn_models.push(dnn.clone());
        }
        let dktv = dktv_estimates(&snapshots, &batches, &traj.states)?;
        let single = dnn_estimates(&dnn_models, &batches, &traj.states)?;
        Ok(QuadRun {
            seed,
            trajectory: traj,
            batches,
            snapshots,
            dnn_traces,
            dnn_diverged,
            dktv,
            single,
        })
    }
}

/// Rollouts of the per-batch single-network models, anchored like
/// [`dktv_estimates`].
pub fn dnn_estimates(models: &[SingleDnnModel], batches: &[DataBatch], states: &DMatrix<f64>) -> Result<EstimateTrace> {
    let mut est = states.clone();
    let mut covered = 0;
    for (m, b) in models.iter().zip(batches) {
        let mut x = states.column(b.k_start).into_owned();
        for j in 1..=b.beta() {
            x = single_dnn_predict(m, &x, &b.u.column(j - 1).into_owned())?;
            est.set_column(b.k_start + j, &x);
        }
        covered = b.k_end();
    }
    Ok(EstimateTrace::new(est, states, covered))
}

#[derive(Clone, Debug)]
pub struct QuadRun {
    pub seed: u64,
    pub trajectory: SampledTrajectory,
    pub batches: Vec<DataBatch>,
    pub snapshots: Vec<DkrSnapshot>,
    /// Per batch: loss at the start of every epoch plus the final value.
    pub dnn_traces: Vec<Vec<f64>>,
    pub dnn_diverged: usize,
    pub dktv: EstimateTrace,
    pub single: EstimateTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSummary {
    pub seed: u64,
    pub batches: usize,
    pub dktv_final_loss: f64,
    pub dnn_final_loss: f64,
    pub dktv_mean_error: f64,
    pub dnn_mean_error: f64,
    pub dktv_diverged: usize,
    pub dnn_diverged: usize,
}

impl QuadRun {
    /// Final objective value on the last batch.
    pub fn dktv_final_loss(&self) -> f64 {
        self.snapshots.last().and_then(|s| s.final_loss()).unwrap_or(f64::NAN)
    }

    pub fn dnn_final_loss(&self) -> f64 {
        self.dnn_traces.last().and_then(|t| t.last().copied()).unwrap_or(f64::NAN)
    }

    pub fn summary(&self) -> QuadSummary {
        QuadSummary {
            seed: self.seed,
            batches: self.batches.len(),
            dktv_final_loss: self.dktv_final_loss(),
            dnn_final_loss: self.dnn_final_loss(),
            dktv_mean_error: self.dktv.mean_error(),
            dnn_mean_error: self.single.mean_error(),
            dktv_diverged: self.snapshots.iter().filter(|s| s.diverged).count(),
            dnn_diverged: self.dnn_diverged,
        }
    }

    /// `trajectory.csv`, `loss.csv` (`tau, epoch, dktv, dnn`), `errors.csv`
    /// and `summary.json` under `dir/s<seed>/`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let d = dir.join(format!("s{}", self.seed));
        let t = &self.trajectory;
        write_trajectory_csv(&d.join("trajectory.csv"), &t.times, &t.states, &t.inputs)?;
        let headers: Vec<String> = ["tau", "epoch", "dktv_loss", "dnn_loss"].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (tau, (s, dnn)) in self.snapshots.iter().zip(&self.dnn_traces).enumerate() {
            for e in 0..s.train_stats.len().max(dnn.len()) {
                rows.push(vec![
                    Some(tau as f64),
                    Some(e as f64),
                    s.train_stats.get(e).map(|l| l.total),
                    dnn.get(e).copied(),
                ]);
            }
        }
        write_table(&d.join("loss.csv"), &headers, &rows)?;
        write_error_table(&d.join("errors.csv"), &t.times, &[("e_dktv", &self.dktv), ("e_dnn", &self.single)])?;
        save_run(&d.join("snapshots"), &self.snapshots)?;
        write_json(&d.join("summary.json"), &self.summary())
    }
}
