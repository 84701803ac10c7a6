//! Receding-horizon control on the lifted linear model.
//!
//! The lifted dynamics `z' = A z + B u` are condensed over the horizon into
//! a dense quadratic in the stacked inputs. Tracking is expressed in the
//! lifted space through the shift `g(x) - g(x*)`, with stage weight
//! `C^T Q C`. Box constraints on the inputs are enforced by projection;
//! state boxes enter as quadratic penalties on the reconstructed states.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};
use crate::linalg::{spectral_norm, symmetrize};
use crate::pipeline::{DataBatch, DkrSnapshot, OnlineLearner};
use crate::systems::{advance, Cartpole, System};

/// Iteration cap of the projected-gradient refinement.
pub const MAX_PG_ITERS: usize = 200;
/// Stopping threshold on the projected-gradient norm.
pub const PG_TOL: f64 = 1e-8;
/// Weight of the soft state-box penalty.
pub const PENALTY_WEIGHT: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct MpcProblem {
    /// n x n state weight.
    pub q: DMatrix<f64>,
    /// m x m input weight.
    pub r: DMatrix<f64>,
    /// Lifted terminal weight; `None` uses the stage weight `C^T Q C`.
    pub q_terminal: Option<DMatrix<f64>>,
    /// Multiplies the terminal weight.
    pub terminal_weight: f64,
    pub horizon: usize,
    pub goal: DVector<f64>,
    /// `[min, max]` for every input component.
    pub input_box: Vec<[f64; 2]>,
    /// `[min, max]` for every state component of the predicted states.
    pub state_box: Option<Vec<[f64; 2]>>,
    pub penalty_weight: f64,
}

impl MpcProblem {
    /// Unconstrained inputs, no state box, unit terminal weight.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize, goal: DVector<f64>) -> Self {
        let m = r.nrows();
        Self {
            q,
            r,
            q_terminal: None,
            terminal_weight: 1.0,
            horizon,
            goal,
            input_box: vec![[f64::NEG_INFINITY, f64::INFINITY]; m],
            state_box: None,
            penalty_weight: PENALTY_WEIGHT,
        }
    }

    pub fn with_input_box(mut self, input_box: Vec<[f64; 2]>) -> Self {
        self.input_box = input_box;
        self
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    /// Shape checks plus positive definiteness of `Q` and `R` by Cholesky.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if !self.q.is_square() || !self.r.is_square() {
            return Err(DktvError::InvalidConfig("Q and R must be square".into()));
        }
        if self.goal.len() != n {
            return Err(DktvError::dims("goal state", n, self.goal.len()));
        }
        if self.input_box.len() != m {
            return Err(DktvError::dims("input box", m, self.input_box.len()));
        }
        if self.input_box.iter().any(|b| !(b[0] <= b[1])) {
            return Err(DktvError::InvalidConfig("input box has min > max".into()));
        }
        if let Some(sb) = &self.state_box {
            if sb.len() != n {
                return Err(DktvError::dims("state box", n, sb.len()));
            }
            if sb.iter().any(|b| !(b[0] <= b[1])) {
                return Err(DktvError::InvalidConfig("state box has min > max".into()));
            }
        }
        if self.horizon == 0 {
            return Err(DktvError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.terminal_weight >= 0.0) || !(self.penalty_weight >= 0.0) {
            return Err(DktvError::InvalidConfig("weights must be non-negative".into()));
        }
        if symmetrize(&self.q).cholesky().is_none() {
            return Err(DktvError::Singular("Q is not positive definite".into()));
        }
        if symmetrize(&self.r).cholesky().is_none() {
            return Err(DktvError::Singular("R is not positive definite".into()));
        }
        Ok(())
    }
}

/// The horizon problem `J(U) = U^T H U / 2 + f^T U + c` in the stacked
/// inputs `U = [u_0; ...; u_{l-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedQp {
    /// Stage weight `C^T Q C`.
    pub q_tilde: DMatrix<f64>,
    /// Terminal weight after scaling.
    pub q_terminal: DMatrix<f64>,
    /// Terminal weight before scaling by `terminal_weight`.
    pub terminal_base: DMatrix<f64>,
    /// `g(x_now)`.
    pub z0: DVector<f64>,
    /// `g(x*)`.
    pub z_goal: DVector<f64>,
    /// Free response: block `i` is `A^{i+1}`, so `Z = psi z0 + gamma U`.
    pub psi: DMatrix<f64>,
    /// Forced response: block `(i, j)` is `A^{i-j} B` for `j <= i`.
    pub gamma: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    /// Reconstructed predicted states `X = x_free + x_map U`, or empty
    /// without a state box.
    pub x_free: DVector<f64>,
    pub x_map: DMatrix<f64>,
    pub horizon: usize,
    pub m: usize,
}

impl LiftedQp {
    /// Quadratic cost without penalties.
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u) + self.constant
    }

    /// Lifted states `z_1 .. z_l` stacked.
    pub fn predicted(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.psi * &self.z0 + &self.gamma * u
    }

    /// Deviation of the terminal lifted state from `g(x*)`, measured in the
    /// unscaled terminal weight.
    pub fn terminal_deviation(&self, u: &DVector<f64>) -> f64 {
        let r = self.z0.len();
        let z = self.predicted(u);
        let dz = z.rows((self.horizon - 1) * r, r) - &self.z_goal;
        dz.dot(&(&self.terminal_base * &dz)).max(0.0).sqrt()
    }
}

/// Condenses the lifted dynamics of `snapshot` over the horizon from the
/// current state `x_now`.
pub fn build_lifted_qp(snapshot: &DkrSnapshot, x_now: &DVector<f64>, problem: &MpcProblem) -> Result<LiftedQp> {
    problem.validate()?;
    let l = problem.horizon;
    if l > snapshot.beta {
        return Err(DktvError::HorizonTooLong {
            horizon: l,
            beta: snapshot.beta,
        });
    }
    let (n, m, r) = (snapshot.n(), snapshot.m(), snapshot.r());
    if problem.n() != n || problem.m() != m {
        return Err(DktvError::dims("MPC weights", n + m, problem.n() + problem.m()));
    }
    if x_now.iter().any(|v| !v.is_finite()) {
        return Err(DktvError::NonFinite("MPC initial state".into()));
    }
    let mats = &snapshot.matrices;
    let z0 = snapshot.net.forward(x_now)?;
    let z_goal = snapshot.net.forward(&problem.goal)?;
    let q_tilde = symmetrize(&(mats.c.transpose() * &problem.q * &mats.c));
    let terminal_base = symmetrize(&problem.q_terminal.clone().unwrap_or_else(|| q_tilde.clone()));
    let q_terminal = &terminal_base * problem.terminal_weight;
    if q_terminal.shape() != (r, r) {
        return Err(DktvError::dims("terminal weight", r, q_terminal.nrows()));
    }

    // powers A^0 .. A^l and the blocks A^k B
    let mut powers = Vec::with_capacity(l + 1);
    powers.push(DMatrix::identity(r, r));
    for k in 1..=l {
        powers.push(&mats.a * &powers[k - 1]);
    }
    let mut psi = DMatrix::zeros(l * r, r);
    let mut gamma = DMatrix::zeros(l * r, l * m);
    for i in 0..l {
        psi.view_mut((i * r, 0), (r, r)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            gamma.view_mut((i * r, j * m), (r, m)).copy_from(&(&powers[i - j] * &mats.b));
        }
    }
    let mut q_bar = DMatrix::zeros(l * r, l * r);
    for i in 0..l {
        let w = if i + 1 == l { &q_terminal } else { &q_tilde };
        q_bar.view_mut((i * r, i * r), (r, r)).copy_from(w);
    }
    let mut r_bar = DMatrix::zeros(l * m, l * m);
    for i in 0..l {
        r_bar.view_mut((i * m, i * m), (m, m)).copy_from(&problem.r);
    }
    let mut z_star = DVector::zeros(l * r);
    for i in 0..l {
        z_star.rows_mut(i * r, r).copy_from(&z_goal);
    }
    let d = &psi * &z0 - &z_star;
    let gq = gamma.transpose() * &q_bar;
    let hessian = symmetrize(&((&gq * &gamma + &r_bar) * 2.0));
    let linear = (&gq * &d) * 2.0;
    let dz0 = &z0 - &z_goal;
    let constant = d.dot(&(&q_bar * &d)) + dz0.dot(&(&q_tilde * &dz0));

    let (x_free, x_map) = if problem.state_box.is_some() {
        let mut c_bar = DMatrix::zeros(l * n, l * r);
        for i in 0..l {
            c_bar.view_mut((i * n, i * r), (n, r)).copy_from(&mats.c);
        }
        (&c_bar * &psi * &z0, &c_bar * &gamma)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, l * m))
    };

    Ok(LiftedQp {
        q_tilde,
        q_terminal,
        terminal_base,
        z0,
        z_goal,
        psi,
        gamma,
        hessian,
        linear,
        constant,
        x_free,
        x_map,
        horizon: l,
        m,
    })
}

/// The horizon cost evaluated by an explicit lifted rollout, without the
/// condensed matrices.
pub fn rollout_cost(snapshot: &DkrSnapshot, x_now: &DVector<f64>, problem: &MpcProblem, inputs: &DMatrix<f64>) -> Result<f64> {
    let mats = &snapshot.matrices;
    let q_tilde = mats.c.transpose() * &problem.q * &mats.c;
    let q_terminal = problem.q_terminal.clone().unwrap_or_else(|| q_tilde.clone()) * problem.terminal_weight;
    let z_goal = snapshot.net.forward(&problem.goal)?;
    let mut z = snapshot.net.forward(x_now)?;
    let mut cost = 0.0;
    for i in 0..problem.horizon {
        let u = inputs.column(i);
        let dz = &z - &z_goal;
        cost += dz.dot(&(&q_tilde * &dz)) + u.dot(&(&problem.r * u));
        z = &mats.a * &z + &mats.b * u;
    }
    let dz = &z - &z_goal;
    Ok(cost + dz.dot(&(&q_terminal * &dz)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// m x l input sequence.
    pub inputs: DMatrix<f64>,
    /// Projected-gradient iterations; zero for an interior solution.
    pub iterations: usize,
    pub converged: bool,
    /// Objective including penalties.
    pub cost: f64,
}

impl MpcSolution {
    pub fn first(&self) -> DVector<f64> {
        self.inputs.column(0).into_owned()
    }
}

struct Objective<'a> {
    qp: &'a LiftedQp,
    lo: DVector<f64>,
    hi: DVector<f64>,
    state_lo: DVector<f64>,
    state_hi: DVector<f64>,
    weight: f64,
}

impl Objective<'_> {
    fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lo[i], self.hi[i]))
    }

    /// Box excess of the predicted states, zero inside.
    fn excess(&self, u: &DVector<f64>) -> DVector<f64> {
        if self.state_lo.is_empty() {
            return DVector::zeros(0);
        }
        let x = &self.qp.x_free + &self.qp.x_map * u;
        DVector::from_fn(x.len(), |i, _| {
            if x[i] > self.state_hi[i] {
                x[i] - self.state_hi[i]
            } else if x[i] < self.state_lo[i] {
                x[i] - self.state_lo[i]
            } else {
                0.0
            }
        })
    }

    fn value(&self, u: &DVector<f64>) -> f64 {
        let e = self.excess(u);
        self.qp.cost(u) + self.weight * e.norm_squared()
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.qp.hessian * u + &self.qp.linear;
        let e = self.excess(u);
        if !e.is_empty() {
            g += self.qp.x_map.transpose() * e * (2.0 * self.weight);
        }
        g
    }
}

/// Minimizes the horizon problem. The unconstrained minimizer comes from a
/// Cholesky solve; if it leaves the input box or violates the state box,
/// accelerated projected gradient refines it. Hitting the iteration cap
/// returns the best iterate with `converged = false`.
pub fn solve_horizon(qp: &LiftedQp, problem: &MpcProblem) -> Result<MpcSolution> {
    let (l, m) = (qp.horizon, qp.m);
    let dim = l * m;
    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| DktvError::Singular("condensed MPC Hessian".into()))?;
    let unconstrained = chol.solve(&(-&qp.linear));
    let lo = DVector::from_fn(dim, |i, _| problem.input_box[i % m][0]);
    let hi = DVector::from_fn(dim, |i, _| problem.input_box[i % m][1]);
    let (state_lo, state_hi) = match &problem.state_box {
        Some(sb) => {
            let n = sb.len();
            (
                DVector::from_fn(l * n, |i, _| sb[i % n][0]),
                DVector::from_fn(l * n, |i, _| sb[i % n][1]),
            )
        }
        None => (DVector::zeros(0), DVector::zeros(0)),
    };
    let obj = Objective {
        qp,
        lo,
        hi,
        state_lo,
        state_hi,
        weight: problem.penalty_weight,
    };
    let shape = |u: DVector<f64>| DMatrix::from_column_slice(m, l, u.as_slice());
    let inside = unconstrained.iter().enumerate().all(|(i, v)| *v >= obj.lo[i] && *v <= obj.hi[i]);
    if inside && obj.excess(&unconstrained).iter().all(|e| *e == 0.0) {
        return Ok(MpcSolution {
            cost: obj.value(&unconstrained),
            inputs: shape(unconstrained),
            iterations: 0,
            converged: true,
        });
    }

    let mut lip = spectral_norm(&qp.hessian);
    if !obj.state_lo.is_empty() {
        lip += 2.0 * obj.weight * spectral_norm(&qp.x_map).powi(2);
    }
    let step = 1.0 / lip.max(f64::MIN_POSITIVE);
    let mut u = obj.project(&unconstrained);
    let mut y = u.clone();
    let mut t = 1.0_f64;
    let mut best = (obj.value(&u), u.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_PG_ITERS {
        iterations = it;
        let next = obj.project(&(&y - obj.gradient(&y) * step));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let val = obj.value(&next);
        if val > best.0 {
            // restart the momentum when the objective goes up
            y = best.1.clone();
            t = 1.0;
            u = best.1.clone();
            continue;
        }
        y = &next + (&next - &u) * ((t - 1.0) / t_next);
        t = t_next;
        u = next;
        best = (val, u.clone());
        let pg = (&u - obj.project(&(&u - obj.gradient(&u) * step))) / step;
        if pg.norm() < PG_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("projected gradient stopped after {iterations} iterations");
    }
    Ok(MpcSolution {
        cost: best.0,
        inputs: shape(best.1),
        iterations,
        converged,
    })
}

/// One row of the closed-loop log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRow {
    pub t: f64,
    pub x: f64,
    pub xdot: f64,
    pub theta: f64,
    pub thetadot: f64,
    /// Applied force; `None` on the final row.
    pub force: Option<f64>,
    pub mu_c: f64,
    pub solve_iters: usize,
    pub cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopOptions {
    pub n_steps: usize,
    pub dt: f64,
    pub substeps: usize,
    /// Pole angle beyond which the run is declared a failure.
    pub fail_angle: f64,
    /// Refresh the model with `step()` every `beta` samples.
    pub adapt: bool,
    /// Standard deviation of Gaussian dither added to the applied input.
    /// Without it closed-loop inputs are a function of the state and the
    /// batches lose rank in the input direction.
    pub excitation: f64,
    pub seed: u64,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self {
            n_steps: 750,
            dt: 0.1,
            substeps: 10,
            fail_angle: std::f64::consts::FRAC_PI_2,
            adapt: true,
            excitation: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClosedLoopResult {
    pub rows: Vec<ClosedLoopRow>,
    /// Time at which the pole fell, if it did.
    pub failed_at: Option<f64>,
    pub model_updates: usize,
    /// Updates that raised an error; the previous model was kept.
    pub update_failures: usize,
    pub unconverged_solves: usize,
    pub learner: OnlineLearner,
}

impl ClosedLoopResult {
    pub fn max_abs_theta(&self) -> f64 {
        self.rows.iter().map(|r| r.theta.abs()).fold(0.0, f64::max)
    }

    pub fn failed(&self) -> bool {
        self.failed_at.is_some()
    }
}

/// Runs the cartpole under receding-horizon control from `x0` at time 0.
/// Every `beta` closed-loop transitions form a batch (consecutive batches
/// share one sample) that is handed to the learner.
pub fn receding_horizon_run(
    system: &Cartpole,
    mut learner: OnlineLearner,
    x0: &DVector<f64>,
    problem: &MpcProblem,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopResult> {
    let beta = learner.snapshot.beta;
    let none = DVector::zeros(0);
    let mut states = vec![x0.clone()];
    let mut inputs: Vec<DVector<f64>> = Vec::new();
    let mut rows = Vec::with_capacity(opts.n_steps + 1);
    let mut batch_start = 0;
    let mut k_offset = learner.snapshot.k_start + learner.snapshot.beta;
    let mut model_updates = 0;
    let mut update_failures = 0;
    let mut unconverged = 0;
    let mut failed_at = None;
    let mut x = x0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for k in 0..opts.n_steps {
        let t = k as f64 * opts.dt;
        let qp = build_lifted_qp(&learner.snapshot, &x, problem)?;
        let sol = solve_horizon(&qp, problem)?;
        unconverged += usize::from(!sol.converged);
        let mut u = sol.first();
        if opts.excitation > 0.0 {
            for (i, v) in u.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + opts.excitation * z).clamp(problem.input_box[i][0], problem.input_box[i][1]);
            }
        }
        rows.push(row(t, &x, Some(u[0]), system.friction(t), sol.iterations, Some(sol.cost)));
        x = advance(system, &x, &u, &none, t, opts.dt, opts.substeps)?;
        inputs.push(u);
        states.push(x.clone());
        if x[2].abs() > opts.fail_angle {
            failed_at = Some((k + 1) as f64 * opts.dt);
            break;
        }
        if opts.adapt && states.len() - 1 - batch_start == beta {
            let batch = DataBatch::new(
                learner.snapshot.tau + 1,
                k_offset,
                columns(&states[batch_start..batch_start + beta]),
                columns(&states[batch_start + 1..=batch_start + beta]),
                columns(&inputs[batch_start..batch_start + beta]),
            )?;
            let previous = learner.clone();
            let outcome = learner
                .step(&batch)
                .map(|_| ())
                .and_then(|_| usable_model(&learner.snapshot, &x, problem));
            match outcome {
                Ok(()) => model_updates += 1,
                Err(e) => {
                    update_failures += 1;
                    learner = previous;
                    log::warn!("model update at t = {:.1} s rejected: {e}", (k + 1) as f64 * opts.dt);
                }
            }
            k_offset += beta;
            batch_start += beta;
        }
    }
    if failed_at.is_none() {
        let t = opts.n_steps as f64 * opts.dt;
        rows.push(row(t, &x, None, system.friction(t), 0, None));
    }
    Ok(ClosedLoopResult {
        rows,
        failed_at,
        model_updates,
        update_failures,
        unconverged_solves: unconverged,
        learner,
    })
}

/// A refreshed model is kept only if its matrices are finite and the
/// horizon problem at the current state can still be built and solved.
fn usable_model(snapshot: &DkrSnapshot, x: &DVector<f64>, problem: &MpcProblem) -> Result<()> {
    let m = &snapshot.matrices;
    if m.a.iter().chain(m.b.iter()).chain(m.c.iter()).any(|v| !v.is_finite()) {
        return Err(DktvError::NonFinite("refreshed model matrices".into()));
    }
    let qp = build_lifted_qp(snapshot, x, problem)?;
    let sol = solve_horizon(&qp, problem)?;
    if !sol.cost.is_finite() {
        return Err(DktvError::NonFinite("horizon cost".into()));
    }
    Ok(())
}

fn row(t: f64, x: &DVector<f64>, force: Option<f64>, mu_c: f64, solve_iters: usize, cost: Option<f64>) -> ClosedLoopRow {
    ClosedLoopRow {
        t,
        x: x[0],
        xdot: x[1],
        theta: x[2],
        thetadot: x[3],
        force,
        mu_c,
        solve_iters,
        cost,
    }
}

fn columns(v: &[DVector<f64>]) -> DMatrix<f64> {
    let n = v.first().map_or(0, |c| c.len());
    DMatrix::from_fn(n, v.len(), |i, j| v[j][i])
}

/// Dimension check used by callers that assemble problems for a system.
pub fn check_problem_for<S: System>(system: &S, problem: &MpcProblem) -> Result<()> {
    if problem.n() != system.state_dim() || problem.m() != system.input_dim() {
        return Err(DktvError::dims(
            "MPC problem size",
            system.state_dim() + system.input_dim(),
            problem.n() + problem.m(),
        ));
    }
    problem.validate()
}
