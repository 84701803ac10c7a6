use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{check_batch_size, NetSpec};
use crate::error::{DktvError, Result};
use crate::io::{write_json, write_table};
use crate::mpc::{receding_horizon_run, ClosedLoopOptions, ClosedLoopResult, MpcProblem, PENALTY_WEIGHT};
use crate::net::Activation;
use crate::par::{self, Exec};
use crate::pipeline::{partition_stream, BetaSchedule, OnlineLearner, TrainConfig};
use crate::systems::{sample_trajectory, Cartpole, CartpoleConfig, SampleOptions, SampledTrajectory};

/// The state plus two learned observables, a 4 -> 6 lift.
fn default_net() -> NetSpec {
    NetSpec::new(&[(32, Activation::Gaussian), (2, Activation::Identity)]).with_passthrough(true)
}
fn default_beta() -> usize {
    12
}
fn default_duration() -> f64 {
    75.0
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_train() -> TrainConfig {
    TrainConfig {
        initial_epochs: 500,
        ..TrainConfig::default()
    }
}
fn default_theta0() -> f64 {
    0.05
}
fn default_excitation() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_limit() -> f64 {
    0.2
}

/// Stabilizing state feedback plus Gaussian dither, used to record the
/// pretraining flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub duration: f64,
    /// Gains on `(x, x', theta, theta')`; the force is `gains . x`.
    pub gains: [f64; 4],
    pub dither: f64,
    /// Initial pole angle of the pretraining flight.
    pub theta0: f64,
    /// Hold the cart friction at its initial value during pretraining, so
    /// that the model starts from the regime the closed loop starts in.
    pub freeze_friction: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            duration: 12.0,
            gains: [1.0, 2.5, 40.0, 8.0],
            dither: 2.0,
            theta0: 0.05,
            freeze_friction: true,
        }
    }
}

/// Weights and limits of the horizon problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcWeights {
    pub q_diag: [f64; 4],
    pub r: f64,
    pub horizon: usize,
    pub terminal_weight: f64,
    pub force_limit: f64,
    /// Optional `[min, max]` per state component.
    pub state_box: Option<[[f64; 2]; 4]>,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            q_diag: [1.0, 0.1, 10.0, 0.1],
            r: 1e-4,
            horizon: 10,
            terminal_weight: 1.0,
            force_limit: 50.0,
            state_box: None,
        }
    }
}

impl MpcWeights {
    pub fn problem(&self) -> MpcProblem {
        let mut p = MpcProblem::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag)),
            DMatrix::from_element(1, 1, self.r),
            self.horizon,
            DVector::zeros(4),
        )
        .with_input_box(vec![[-self.force_limit, self.force_limit]]);
        p.terminal_weight = self.terminal_weight;
        p.state_box = self.state_box.map(|b| b.to_vec());
        p.penalty_weight = PENALTY_WEIGHT;
        p
    }
}

/// Balancing the time-varying cartpole with MPC on the DKTV model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcExperiment {
    #[serde(default)]
    pub cartpole: CartpoleConfig,
    #[serde(default = "default_net")]
    pub net: NetSpec,
    #[serde(default = "default_beta")]
    pub beta: usize,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub mpc: MpcWeights,
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Largest initial pole angle of the closed loop; the actual angle is
    /// drawn uniformly from `[-theta0, theta0]` with the run seed.
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    /// Balance is kept while `|theta| <= balance_limit`.
    #[serde(default = "default_limit")]
    pub balance_limit: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Refresh the model from closed-loop batches.
    #[serde(default = "default_true")]
    pub adapt: bool,
    /// Dither on the applied force, seeded with the run seed.
    #[serde(default = "default_excitation")]
    pub excitation: f64,
}

impl Default for MpcExperiment {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl MpcExperiment {
    pub fn validate(&self) -> Result<()> {
        self.cartpole.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        check_batch_size(&BetaSchedule::Constant(self.beta), self.net.lifted_dim(4), 1)?;
        if self.mpc.horizon > self.beta {
            return Err(DktvError::HorizonTooLong {
                horizon: self.mpc.horizon,
                beta: self.beta,
            });
        }
        self.mpc.problem().validate()?;
        if self.seeds.is_empty() {
            return Err(DktvError::InvalidConfig("need at least one seed".into()));
        }
        Ok(())
    }

    /// Pretraining flight under dithered state feedback.
    pub fn pretrain_flight(&self, seed: u64) -> Result<SampledTrajectory> {
        let p = &self.pretrain;
        let mut cfg = self.cartpole.clone();
        if p.freeze_friction {
            cfg.friction_rate = 0.0;
        }
        let sys = Cartpole::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = |_k: usize, _t: f64, x: &DVector<f64>| {
            let fb: f64 = p.gains.iter().zip(x.iter()).map(|(g, v)| g * v).sum();
            let z: f64 = StandardNormal.sample(&mut rng);
            let f = (fb + p.dither * z).clamp(-self.mpc.force_limit, self.mpc.force_limit);
            DVector::from_element(1, f)
        };
        let x0 = DVector::from_column_slice(&[0.0, 0.0, p.theta0, 0.0]);
        let opts = SampleOptions::new((p.duration / 0.1).round() as usize, seed);
        let traj = sample_trajectory(&sys, &mut input, &x0, &opts)?;
        if traj.truncated || traj.states.row(2).amax() > std::f64::consts::FRAC_PI_2 {
            return Err(DktvError::InvalidConfig("pretraining controller lost the pole".into()));
        }
        Ok(traj)
    }

    /// Online learner after the pretraining flight.
    pub fn pretrain(&self, seed: u64) -> Result<OnlineLearner> {
        let traj = self.pretrain_flight(seed)?;
        let batches = partition_stream(&traj.states, &traj.inputs, &BetaSchedule::Constant(self.beta))?;
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let mut learner = OnlineLearner::new(&batches[0], self.net.build(4), train)?;
        for b in &batches[1..] {
            learner.step(b)?;
        }
        Ok(learner)
    }

    pub fn initial_state(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let th = if self.theta0 > 0.0 {
            rng.random_range(-self.theta0..=self.theta0)
        } else {
            0.0
        };
        DVector::from_column_slice(&[0.0, 0.0, th, 0.0])
    }

    pub fn run(&self, exec: Exec) -> Result<Vec<MpcRun>> {
        self.validate()?;
        par::map(exec, &self.seeds, |&s| self.run_one(s)).into_iter().collect()
    }

    pub fn run_one(&self, seed: u64) -> Result<MpcRun> {
        let learner = self.pretrain(seed)?;
        let sys = Cartpole::new(self.cartpole.clone());
        let opts = ClosedLoopOptions {
            n_steps: (self.duration / 0.1).round() as usize,
            adapt: self.adapt,
            excitation: self.excitation,
            seed,
            ..ClosedLoopOptions::default()
        };
        let result = receding_horizon_run(&sys, learner, &self.initial_state(seed), &self.mpc.problem(), &opts)?;
        Ok(MpcRun {
            seed,
            balance_limit: self.balance_limit,
            result,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MpcRun {
    pub seed: u64,
    pub balance_limit: f64,
    pub result: ClosedLoopResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub seed: u64,
    pub balanced: bool,
    pub failed_at: Option<f64>,
    pub max_abs_theta: f64,
    pub final_mu_c: f64,
    pub model_updates: usize,
    pub update_failures: usize,
    pub unconverged_solves: usize,
}

impl MpcRun {
    /// The pole stayed up for the whole run and within the balance limit.
    pub fn balanced(&self) -> bool {
        !self.result.failed() && self.result.max_abs_theta() <= self.balance_limit
    }

    pub fn summary(&self) -> MpcSummary {
        MpcSummary {
            seed: self.seed,
            balanced: self.balanced(),
            failed_at: self.result.failed_at,
            max_abs_theta: self.result.max_abs_theta(),
            final_mu_c: self.result.rows.last().map_or(f64::NAN, |r| r.mu_c),
            model_updates: self.result.model_updates,
            update_failures: self.result.update_failures,
            unconverged_solves: self.result.unconverged_solves,
        }
    }

    /// `closed_loop.csv` and `summary.json` under `dir/s<seed>/`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let d = dir.join(format!("s{}", self.seed));
        let headers: Vec<String> = ["t", "x", "xdot", "theta", "thetadot", "F", "mu_c", "solve_iters", "cost"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<Option<f64>>> = self
            .result
            .rows
            .iter()
            .map(|r| {
                vec![
                    Some(r.t),
                    Some(r.x),
                    Some(r.xdot),
                    Some(r.theta),
                    Some(r.thetadot),
                    r.force,
                    Some(r.mu_c),
                    Some(r.solve_iters as f64),
                    r.cost,
                ]
            })
            .collect();
        write_table(&d.join("closed_loop.csv"), &headers, &rows)?;
        write_json(&d.join("summary.json"), &self.summary())
    }
}
