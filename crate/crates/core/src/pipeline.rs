//! Stream batching and the online learning loop.
//!
//! A stream of states `x_0..x_N` with inputs `u_0..u_{N-1}` is cut into
//! batches that share one boundary sample: batch `tau` spans global indices
//! `k_tau..=k_tau + beta_tau` and `k_{tau+1} = k_tau + beta_tau`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};
use crate::linalg::{numerical_rank, pinv};
use crate::net::{loss_gradient, AdamState, LossBreakdown, NetArch, ObjectiveWeights, ObservableNet, PriorMoments};
use crate::regression::{check_rank, fit_batch, recursive_update, KoopmanMatrices, RecursiveCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub tau: usize,
    pub k_start: usize,
    /// n x beta, columns `x_{k_tau} .. x_{k_tau + beta - 1}`.
    pub x: DMatrix<f64>,
    /// n x beta, the successors of `x`.
    pub x_bar: DMatrix<f64>,
    /// m x beta; zero rows for an autonomous system.
    pub u: DMatrix<f64>,
}

impl DataBatch {
    pub fn new(tau: usize, k_start: usize, x: DMatrix<f64>, x_bar: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        if x.shape() != x_bar.shape() {
            return Err(DktvError::dims("successor columns", x.ncols(), x_bar.ncols()));
        }
        if u.ncols() != x.ncols() {
            return Err(DktvError::dims("input columns", x.ncols(), u.ncols()));
        }
        Ok(Self {
            tau,
            k_start,
            x,
            x_bar,
            u,
        })
    }

    pub fn beta(&self) -> usize {
        self.x.ncols()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    /// Index one past the batch's last successor state.
    pub fn k_end(&self) -> usize {
        self.k_start + self.beta()
    }

    /// All `beta + 1` states of the batch in order.
    pub fn states(&self) -> DMatrix<f64> {
        let b = self.beta();
        let mut out = DMatrix::zeros(self.n(), b + 1);
        if b > 0 {
            out.columns_mut(0, b).copy_from(&self.x);
            out.set_column(b, &self.x_bar.column(b - 1));
        }
        out
    }
}

/// Batch sizes: one constant or an explicit list (the last entry repeats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSchedule {
    Constant(usize),
    List(Vec<usize>),
}

impl BetaSchedule {
    pub fn beta(&self, tau: usize) -> usize {
        match self {
            BetaSchedule::Constant(b) => *b,
            BetaSchedule::List(v) => v.get(tau).or(v.last()).copied().unwrap_or(0),
        }
    }

    pub fn min(&self) -> usize {
        match self {
            BetaSchedule::Constant(b) => *b,
            BetaSchedule::List(v) => v.iter().copied().min().unwrap_or(0),
        }
    }
}

/// Splits a stream into overlapping batches. `states` holds `x_0..x_N` as
/// columns and `inputs` at least `N` columns. A trailing partial batch is
/// dropped.
pub fn partition_stream(states: &DMatrix<f64>, inputs: &DMatrix<f64>, schedule: &BetaSchedule) -> Result<Vec<DataBatch>> {
    let total = states.ncols();
    let first = schedule.beta(0);
    if schedule.min() == 0 {
        return Err(DktvError::InvalidConfig("batch size must be positive".into()));
    }
    if total < first + 1 {
        return Err(DktvError::NotEnoughSamples {
            have: total,
            need: first + 1,
        });
    }
    if inputs.ncols() + 1 < total {
        return Err(DktvError::dims("input columns", total - 1, inputs.ncols()));
    }
    let mut out = Vec::new();
    let mut k = 0;
    let mut tau = 0;
    loop {
        let beta = schedule.beta(tau);
        if k + beta >= total {
            break;
        }
        let x = states.columns(k, beta).into_owned();
        let x_bar = states.columns(k + 1, beta).into_owned();
        let u = inputs.columns(k, beta).into_owned();
        out.push(DataBatch::new(tau, k, x, x_bar, u)?);
        k += beta;
        tau += 1;
    }
    Ok(out)
}

/// Batch label of sample `k` under a constant schedule after a first batch of
/// `beta0`: `ceil((k - beta0) / beta)`, clamped at zero.
pub fn tau_of_sample(k: usize, beta0: usize, beta: usize) -> usize {
    if k <= beta0 {
        0
    } else {
        (k - beta0).div_ceil(beta)
    }
}

fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}
fn default_w() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_converge_tol() -> f64 {
    1e-20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs spent on the first batch right after initialization.
    #[serde(default)]
    pub initial_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default)]
    pub lambda_a: f64,
    #[serde(default)]
    pub seed: u64,
    /// Re-lift every absorbed batch with the current parameters before each
    /// step instead of keeping the stale moments.
    #[serde(default)]
    pub relift_history: bool,
    /// Accumulate moments across batches. When off every batch is fit alone.
    #[serde(default = "default_true")]
    pub accumulate: bool,
    /// Training on a batch stops once the objective falls to this value.
    #[serde(default = "default_converge_tol")]
    pub converge_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            initial_epochs: 0,
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            w: default_w(),
            lambda_a: 0.0,
            seed: 0,
            relift_history: false,
            accumulate: true,
            converge_tol: default_converge_tol(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(DktvError::InvalidConfig(format!("loss weight w = {} is outside [0, 1]", self.w)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.lambda_a < 0.0 {
            return Err(DktvError::InvalidConfig(
                "learning rate must be positive, weight decay and lambda_a non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            w: self.w,
            lambda_a: self.lambda_a,
        }
    }
}

/// A trained model `{g(., theta), A, B, C}` for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DkrSnapshot {
    pub net: ObservableNet,
    pub matrices: KoopmanMatrices,
    pub tau: usize,
    pub k_start: usize,
    pub beta: usize,
    /// Objective at the start of every epoch plus the final value.
    pub train_stats: Vec<LossBreakdown>,
    /// Training was abandoned; parameters are the ones before this step.
    pub diverged: bool,
}

impl DkrSnapshot {
    pub fn n(&self) -> usize {
        self.matrices.n()
    }

    pub fn m(&self) -> usize {
        self.matrices.m()
    }

    pub fn r(&self) -> usize {
        self.matrices.r()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.train_stats.last().map(|l| l.total)
    }
}

/// Lifts both halves of a batch.
pub fn lift(net: &ObservableNet, batch: &DataBatch) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((net.forward_batch(&batch.x)?, net.forward_batch(&batch.x_bar)?))
}

fn absorb(
    prior: &RecursiveCache,
    net: &ObservableNet,
    batch: &DataBatch,
    batch_rank: bool,
) -> Result<(KoopmanMatrices, RecursiveCache)> {
    let (g, gb) = lift(net, batch)?;
    if batch_rank {
        let report = check_rank(&g, &batch.u);
        if !report.satisfied {
            return Err(DktvError::RankDeficient(report));
        }
    }
    if prior.batches_absorbed == 0 {
        let mats = fit_batch(&g, &gb, &batch.u, &batch.x)?;
        let (_, cache) = RecursiveCache::from_batch(&g, &gb, &batch.u, &batch.x)?;
        return Ok((mats, cache));
    }
    recursive_update(prior, &prior.solution(), &g, &gb, &batch.u, &batch.x)
}

/// Consecutive rank-breaking steps, each retried at half the learning rate,
/// after which training on the batch stops.
pub const MAX_REJECTED_STEPS: usize = 8;

struct Trained {
    net: ObservableNet,
    matrices: KoopmanMatrices,
    cache: RecursiveCache,
    trace: Vec<LossBreakdown>,
}

/// Coordinate descent on one batch: gradient with the model fixed, Adam step,
/// then refit of the model from `prior` plus the re-lifted batch.
fn optimize(
    net: &ObservableNet,
    prior: &RecursiveCache,
    start: (KoopmanMatrices, RecursiveCache),
    batch: &DataBatch,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Trained> {
    let weights = config.weights();
    let mut net = net.clone();
    let (mut mats, mut cache) = start;
    let mut adam = AdamState::new(net.param_count(), config.learning_rate, config.weight_decay);
    let mut trace = Vec::with_capacity(epochs + 1);
    let mut rejected = 0;
    // keep the batch's own lift at full row rank if it starts there
    let batch_rank = check_rank(&net.forward_batch(&batch.x)?, &batch.u).satisfied;
    let moments = Some(PriorMoments {
        cross: &prior.v_ab,
        gram: &prior.g_ab,
    });
    for epoch in 0..epochs {
        let (loss, grad) = loss_gradient(&net, batch, &mats, &weights, moments.as_ref()).map_err(|e| match e {
            DktvError::NonFinite(_) | DktvError::Singular(_) => {
                log::debug!("epoch {epoch}: {e}");
                DktvError::Diverged { epoch }
            }
            other => other,
        })?;
        trace.push(loss);
        if loss.total <= config.converge_tol {
            return Ok(Trained {
                net,
                matrices: mats,
                cache,
                trace,
            });
        }
        let before = net.params().to_vec();
        let adam_before = adam.clone();
        adam.step(net.params_mut(), &grad);
        if net.params().iter().any(|v| !v.is_finite()) {
            return Err(DktvError::Diverged { epoch });
        }
        match absorb(prior, &net, batch, batch_rank) {
            Ok(next) => {
                (mats, cache) = next;
                rejected = 0;
            }
            Err(DktvError::RankDeficient(_)) | Err(DktvError::InsufficientColumns { .. }) => {
                // the step would break the rank condition; retry it shorter
                net.set_params(&before)?;
                let lr = adam.learning_rate * 0.5;
                adam = adam_before;
                adam.learning_rate = lr;
                rejected += 1;
                log::debug!("epoch {epoch}: step rejected, lifted batch lost full row rank; learning rate now {lr:e}");
                if rejected >= MAX_REJECTED_STEPS {
                    break;
                }
            }
            Err(e) => {
                log::debug!("refit after epoch {epoch}: {e}");
                return Err(DktvError::Diverged { epoch });
            }
        }
    }
    let final_loss = crate::net::loss_value(&net, batch, &mats, &weights, moments.as_ref())
        .map_err(|_| DktvError::Diverged { epoch: epochs })?;
    trace.push(final_loss);
    Ok(Trained {
        net,
        matrices: mats,
        cache,
        trace,
    })
}

/// Random draws tried by [`initialize`] before giving up on the rank check.
pub const MAX_INIT_DRAWS: usize = 100;

/// Redraws of output units that are inactive on the whole first batch,
/// tried within each draw.
pub const MAX_UNIT_REDRAWS: usize = 50;

/// Draws the observable from `layers` with the configured seed and fits the
/// first batch. Output units that are zero on every sample are redrawn;
/// draws whose lifted batch is still rank deficient are discarded and the
/// next draw from the same generator is tried, so the result is still a
/// pure function of the seed.
pub fn initialize(batch0: &DataBatch, arch: impl Into<NetArch>, config: &TrainConfig) -> Result<(DkrSnapshot, RecursiveCache)> {
    let arch = arch.into();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last = None;
    for draw in 0..MAX_INIT_DRAWS {
        let mut net = ObservableNet::random_arch(&arch, &mut rng)?;
        let mut g = lift(&net, batch0)?.0;
        for _ in 0..MAX_UNIT_REDRAWS {
            let min_active = g.ncols().div_ceil(4);
            let dead: Vec<usize> = (0..g.nrows())
                .filter(|&i| g.row(i).iter().filter(|v| **v != 0.0).count() < min_active)
                .collect();
            if dead.is_empty() {
                break;
            }
            for i in dead {
                net.redraw_output_unit(i, &mut rng);
            }
            g = lift(&net, batch0)?.0;
        }
        let report = check_rank(&g, &batch0.u);
        if report.satisfied {
            if draw > 0 {
                log::debug!("initial draw {draw} satisfied the rank condition");
            }
            return initialize_with(batch0, net, config);
        }
        last = Some(report);
    }
    match last {
        Some(report) if report.columns >= report.required_chi => Err(DktvError::RankDeficient(report)),
        _ => Err(DktvError::InsufficientColumns {
            columns: batch0.beta(),
            required: arch.lifted_dim() + batch0.m(),
        }),
    }
}

/// As [`initialize`] with a caller-supplied network.
pub fn initialize_with(batch0: &DataBatch, net: ObservableNet, config: &TrainConfig) -> Result<(DkrSnapshot, RecursiveCache)> {
    config.validate()?;
    if net.input_dim() != batch0.n() {
        return Err(DktvError::dims("network input", batch0.n(), net.input_dim()));
    }
    let required = net.output_dim() + batch0.m();
    if batch0.beta() < required {
        return Err(DktvError::InsufficientColumns {
            columns: batch0.beta(),
            required,
        });
    }
    let empty = RecursiveCache::empty(batch0.n(), batch0.m(), net.output_dim());
    let start = absorb(&empty, &net, batch0, false)?;
    let trained = optimize(&net, &empty, start, batch0, config, config.initial_epochs)?;
    let snapshot = DkrSnapshot {
        net: trained.net,
        matrices: trained.matrices,
        tau: batch0.tau,
        k_start: batch0.k_start,
        beta: batch0.beta(),
        train_stats: if config.initial_epochs > 0 { trained.trace } else { Vec::new() },
        diverged: false,
    };
    Ok((snapshot, trained.cache))
}

/// One online step: absorb `batch` under the current parameters, then
/// retrain the observable on it for `config.epochs` epochs.
pub fn step(
    snapshot: &DkrSnapshot,
    cache: &RecursiveCache,
    batch: &DataBatch,
    config: &TrainConfig,
) -> Result<(DkrSnapshot, RecursiveCache)> {
    if snapshot.tau + 1 != batch.tau {
        return Err(DktvError::BatchOrder {
            snapshot: snapshot.tau,
            batch: batch.tau,
        });
    }
    let prior = if config.accumulate {
        cache.clone()
    } else {
        RecursiveCache::empty(batch.n(), batch.m(), snapshot.r())
    };
    let start = if prior.batches_absorbed == 0 {
        absorb(&prior, &snapshot.net, batch, false)?
    } else {
        let (g, gb) = lift(&snapshot.net, batch)?;
        recursive_update(&prior, &snapshot.matrices, &g, &gb, &batch.u, &batch.x)?
    };
    let base = DkrSnapshot {
        net: snapshot.net.clone(),
        matrices: start.0.clone(),
        tau: batch.tau,
        k_start: batch.k_start,
        beta: batch.beta(),
        train_stats: Vec::new(),
        diverged: false,
    };
    if config.epochs == 0 {
        return Ok((base, start.1));
    }
    let fallback_cache = start.1.clone();
    match optimize(&snapshot.net, &prior, start, batch, config, config.epochs) {
        Ok(t) => Ok((
            DkrSnapshot {
                net: t.net,
                matrices: t.matrices,
                train_stats: t.trace,
                ..base
            },
            t.cache,
        )),
        Err(DktvError::Diverged { epoch }) => {
            log::warn!("training diverged at epoch {epoch} on batch {}; keeping previous parameters", batch.tau);
            Ok((DkrSnapshot { diverged: true, ..base }, fallback_cache))
        }
        Err(e) => Err(e),
    }
}

/// Rebuilds the cache from raw batches lifted under `net`.
pub fn relift_cache(net: &ObservableNet, history: &[DataBatch]) -> Result<(KoopmanMatrices, RecursiveCache)> {
    let first = history.first().ok_or(DktvError::EmptyHistory)?;
    let mut cache = RecursiveCache::empty(first.n(), first.m(), net.output_dim());
    let mut mats = KoopmanMatrices::zeros(first.n(), first.m(), net.output_dim());
    for b in history {
        let (g, gb) = lift(net, b)?;
        (mats, cache) = cache.absorb_direct(&g, &gb, &b.u, &b.x)?;
    }
    Ok((mats, cache))
}

/// Owns the evolving state of one online run.
#[derive(Clone, Debug)]
pub struct OnlineLearner {
    pub config: TrainConfig,
    pub snapshot: DkrSnapshot,
    pub cache: RecursiveCache,
    history: Vec<DataBatch>,
}

impl OnlineLearner {
    pub fn new(batch0: &DataBatch, arch: impl Into<NetArch>, config: TrainConfig) -> Result<Self> {
        let (snapshot, cache) = initialize(batch0, arch, &config)?;
        Ok(Self::from_parts(batch0, snapshot, cache, config))
    }

    pub fn with_net(batch0: &DataBatch, net: ObservableNet, config: TrainConfig) -> Result<Self> {
        let (snapshot, cache) = initialize_with(batch0, net, &config)?;
        Ok(Self::from_parts(batch0, snapshot, cache, config))
    }

    fn from_parts(batch0: &DataBatch, snapshot: DkrSnapshot, cache: RecursiveCache, config: TrainConfig) -> Self {
        let history = if config.relift_history { vec![batch0.clone()] } else { Vec::new() };
        Self {
            config,
            snapshot,
            cache,
            history,
        }
    }

    pub fn step(&mut self, batch: &DataBatch) -> Result<&DkrSnapshot> {
        if self.config.relift_history && self.config.accumulate {
            let (mats, cache) = relift_cache(&self.snapshot.net, &self.history)?;
            self.snapshot.matrices = mats;
            self.cache = cache;
        }
        let (snap, cache) = step(&self.snapshot, &self.cache, batch, &self.config)?;
        self.snapshot = snap;
        self.cache = cache;
        if self.config.relift_history {
            self.history.push(batch.clone());
        }
        Ok(&self.snapshot)
    }
}

/// Runs the whole online loop over `batches` and returns one snapshot per
/// batch.
pub fn run_online(batches: &[DataBatch], arch: impl Into<NetArch>, config: &TrainConfig) -> Result<Vec<DkrSnapshot>> {
    let first = batches.first().ok_or(DktvError::EmptyHistory)?;
    let mut learner = OnlineLearner::new(first, arch, config.clone())?;
    let mut out = vec![learner.snapshot.clone()];
    for b in &batches[1..] {
        out.push(learner.step(b)?.clone());
    }
    Ok(out)
}

/// `x_hat = C (A g(x) + B u)`.
pub fn predict_one(snapshot: &DkrSnapshot, x_prev: &DVector<f64>, u_prev: &DVector<f64>) -> Result<DVector<f64>> {
    if u_prev.len() != snapshot.m() {
        return Err(DktvError::dims("input", snapshot.m(), u_prev.len()));
    }
    let z = snapshot.net.forward(x_prev)?;
    let mut next = &snapshot.matrices.a * z;
    if snapshot.m() > 0 {
        next += &snapshot.matrices.b * u_prev;
    }
    Ok(&snapshot.matrices.c * next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// n x (steps + 1), starting with `x_init`.
    pub states: DMatrix<f64>,
    /// The rollout hit a non-finite state and stopped early.
    pub truncated: bool,
}

/// Repeated [`predict_one`] from `x_init`, re-lifting every predicted state.
/// `u_seq` is m x L; for m = 0 pass a 0 x L matrix.
pub fn rollout(snapshot: &DkrSnapshot, x_init: &DVector<f64>, u_seq: &DMatrix<f64>) -> Result<Rollout> {
    let steps = u_seq.ncols();
    let mut states = vec![x_init.clone()];
    let mut truncated = false;
    for k in 0..steps {
        let u = u_seq.column(k).into_owned();
        let next = predict_one(snapshot, states.last().expect("non-empty"), &u)?;
        if next.iter().any(|v| !v.is_finite()) {
            truncated = true;
            break;
        }
        states.push(next);
    }
    Ok(Rollout {
        states: DMatrix::from_columns(&states),
        truncated,
    })
}

/// Reduced state-space model `A_hat = C A C^+`, `B_hat = C B`.
pub fn reduced_system(snapshot: &DkrSnapshot) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let c = &snapshot.matrices.c;
    if numerical_rank(c) < c.nrows() {
        return Err(DktvError::Singular("projection C is not of full row rank".into()));
    }
    let a_hat = c * &snapshot.matrices.a * pinv(c);
    let b_hat = c * &snapshot.matrices.b;
    Ok((a_hat, b_hat))
}
