//! Reference simulators and fixed-interval trajectory sampling.

mod cartpole;
mod ntvs;
mod quad;

pub use cartpole::{Cartpole, CartpoleConfig, FrictionLaw};
pub use ntvs::{SimpleNtvs, SimpleNtvsConfig};
pub use quad::{QuadConfig, QuadController, Quadcopter};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};

/// Sampling interval used by every experiment.
pub const DEFAULT_DT: f64 = 0.1;
/// RK4 substeps per sampling interval.
pub const DEFAULT_SUBSTEPS: usize = 10;

/// Continuous-time dynamics `x' = f(x, u, t, w)`.
pub trait System: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Length of the disturbance vector `w`; zero for undisturbed systems.
    fn disturbance_dim(&self) -> usize {
        0
    }
    fn deriv(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64, w: &DVector<f64>) -> Result<DVector<f64>>;
}

/// One classical Runge-Kutta step of `x' = f(t, x)`.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) {
        return Err(DktvError::InvalidConfig(format!("step size {dt} must be positive")));
    }
    let half = 0.5 * dt;
    let k1 = f(t, x)?;
    let k2 = f(t + half, &(x + &k1 * half))?;
    let k3 = f(t + half, &(x + &k2 * half))?;
    let k4 = f(t + dt, &(x + &k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(DktvError::NonFinite(format!("integrated state at t = {t}")));
    }
    Ok(next)
}

/// Integrates one sampling interval with `u` and `w` held constant.
pub fn advance<S: System + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    t: f64,
    dt: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let h = dt / substeps.max(1) as f64;
    let mut state = x.clone();
    for i in 0..substeps.max(1) {
        state = rk4_step(|tt, xx| sys.deriv(xx, u, tt, w), &state, t + i as f64 * h, h)?;
    }
    Ok(state)
}

/// Supplies the input applied over sample interval `k`.
pub trait InputSource {
    fn input(&mut self, k: usize, t: f64, x: &DVector<f64>) -> DVector<f64>;
}

impl<F> InputSource for F
where
    F: FnMut(usize, f64, &DVector<f64>) -> DVector<f64>,
{
    fn input(&mut self, k: usize, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self(k, t, x)
    }
}

/// Always returns the zero input of the given dimension.
pub struct ZeroInput(pub usize);

impl InputSource for ZeroInput {
    fn input(&mut self, _k: usize, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub dt: f64,
    pub n_steps: usize,
    pub substeps: usize,
    pub seed: u64,
    /// Standard deviation of the per-sample disturbance draw.
    pub disturbance_scale: f64,
    pub t0: f64,
}

impl SampleOptions {
    pub fn new(n_steps: usize, seed: u64) -> Self {
        Self {
            dt: DEFAULT_DT,
            n_steps,
            substeps: DEFAULT_SUBSTEPS,
            seed,
            disturbance_scale: 1.0,
            t0: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    pub times: Vec<f64>,
    /// n x (N + 1).
    pub states: DMatrix<f64>,
    /// m x N; column k is applied between samples k and k + 1.
    pub inputs: DMatrix<f64>,
    /// d x N disturbance draws, empty for undisturbed systems.
    pub disturbances: DMatrix<f64>,
    pub dt: f64,
    /// The integration blew up and the trajectory stops early.
    pub truncated: bool,
}

impl SampledTrajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }
}

/// Simulates `sys` from `x0`, recording every `opts.dt`.
pub fn sample_trajectory<S: System + ?Sized, I: InputSource + ?Sized>(
    sys: &S,
    inputs: &mut I,
    x0: &DVector<f64>,
    opts: &SampleOptions,
) -> Result<SampledTrajectory> {
    if x0.len() != sys.state_dim() {
        return Err(DktvError::dims("initial state", sys.state_dim(), x0.len()));
    }
    let d = sys.disturbance_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut states = vec![x0.clone()];
    let mut us = Vec::with_capacity(opts.n_steps);
    let mut ws = Vec::with_capacity(opts.n_steps);
    let mut truncated = false;
    for k in 0..opts.n_steps {
        let t = opts.t0 + k as f64 * opts.dt;
        let x = states.last().expect("non-empty");
        let u = inputs.input(k, t, x);
        if u.len() != sys.input_dim() {
            return Err(DktvError::dims("input", sys.input_dim(), u.len()));
        }
        let w = DVector::from_fn(d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * opts.disturbance_scale
        });
        match advance(sys, x, &u, &w, t, opts.dt, opts.substeps) {
            Ok(next) => {
                states.push(next);
                us.push(u);
                ws.push(w);
            }
            Err(e) => {
                log::warn!("simulation stopped at sample {k}: {e}");
                truncated = true;
                break;
            }
        }
    }
    let steps = us.len();
    let m = sys.input_dim();
    Ok(SampledTrajectory {
        times: (0..=steps).map(|k| opts.t0 + k as f64 * opts.dt).collect(),
        states: DMatrix::from_columns(&states),
        inputs: if steps == 0 { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&us) },
        disturbances: if steps == 0 || d == 0 { DMatrix::zeros(d, steps) } else { DMatrix::from_columns(&ws) },
        dt: opts.dt,
        truncated,
    })
}
