//! One-step prediction error bounds for a trained snapshot.
//!
//! For a prediction `x_hat_k = C (A g(x_{k-1}) + B u_{k-1})` made with the
//! snapshot of batch `tau`, the error is bounded by `L_a + L_b + L_c`:
//!
//! * `L_a = ||C A|| mu_g mu_x + ||C B|| mu_u`
//! * `L_b = ||C S|| L1`, where `S` accumulates powers of the batch matrices
//!   `A_0..A_tau` along the stream
//! * `L_c = mu_x + L2`
//!
//! `L1` and `L2` are the largest lifted and reconstruction residuals in the
//! batch, `mu_x` and `mu_u` the largest consecutive increments, and `mu_g`
//! a Lipschitz estimate of the observable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};
use crate::linalg::{matrix_power, MatrixNorm};
use crate::net::lipschitz_exhaustive;
use crate::par::Exec;
use crate::pipeline::{lift, predict_one, DataBatch, DkrSnapshot};
use crate::regression::check_rank;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Increments {
    pub mu_x: f64,
    pub mu_u: f64,
}

/// Largest consecutive-column step of `states` and `inputs`.
pub fn increments(states: &DMatrix<f64>, inputs: &DMatrix<f64>) -> Increments {
    let step = |m: &DMatrix<f64>| {
        (1..m.ncols())
            .map(|i| (m.column(i) - m.column(i - 1)).norm())
            .fold(0.0, f64::max)
    };
    Increments {
        mu_x: step(states),
        mu_u: if inputs.nrows() == 0 { 0.0 } else { step(inputs) },
    }
}

/// [`increments`] over the `beta + 1` states and `beta` inputs of a batch.
pub fn empirical_increments(batch: &DataBatch) -> Increments {
    increments(&batch.states(), &batch.u)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_s ||g(x_{s+1}) - A g(x_s) - B u_s||`.
    pub l1: f64,
    /// `max_x ||x - C g(x)||` over every state of the batch.
    pub l2: f64,
}

pub fn residual_maxima(batch: &DataBatch, snapshot: &DkrSnapshot) -> Result<Residuals> {
    let (g, gb) = lift(&snapshot.net, batch)?;
    let mats = &snapshot.matrices;
    let mut r1 = gb - &mats.a * &g;
    if batch.m() > 0 {
        r1 -= &mats.b * &batch.u;
    }
    let states = batch.states();
    let r2 = &states - &mats.c * snapshot.net.forward_batch(&states)?;
    let colmax = |m: &DMatrix<f64>| m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    Ok(Residuals {
        l1: colmax(&r1),
        l2: colmax(&r2),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    /// True when every pair of the relevant states was examined. A sampled
    /// estimate can undershoot the pairs the bound actually uses.
    pub exhaustive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub tau: usize,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub beta: usize,
}

/// The per-batch matrices needed to accumulate `L_b`, ordered by `tau`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchHistory {
    records: Vec<BatchRecord>,
}

impl BatchHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshots<'a, I: IntoIterator<Item = &'a DkrSnapshot>>(snapshots: I) -> Result<Self> {
        let mut h = Self::new();
        for s in snapshots {
            h.push_snapshot(s)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, record: BatchRecord) -> Result<()> {
        let expected = self.records.len();
        if record.tau != expected {
            return Err(DktvError::BatchOrder {
                snapshot: expected,
                batch: record.tau,
            });
        }
        if let Some(prev) = self.records.last() {
            if prev.a.shape() != record.a.shape() {
                return Err(DktvError::dims("lifted dimension", prev.a.nrows(), record.a.nrows()));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_snapshot(&mut self, s: &DkrSnapshot) -> Result<()> {
        self.push(BatchRecord {
            tau: s.tau,
            a: s.matrices.a.clone(),
            c: s.matrices.c.clone(),
            beta: s.beta,
        })
    }

    pub fn records(&self) -> &[BatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// History truncated to batches `0..=tau`.
    pub fn up_to(&self, tau: usize) -> Self {
        Self {
            records: self.records[..(tau + 1).min(self.records.len())].to_vec(),
        }
    }
}

/// `sum_{m=1}^{count} a^m`.
fn power_sum_from_one(a: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let r = a.nrows();
    let mut acc = DMatrix::zeros(r, r);
    let mut p = DMatrix::identity(r, r);
    for _ in 0..count {
        p = &p * a;
        acc += &p;
    }
    acc
}

/// Contribution of the earlier batches, carried into batch `tau` (the last
/// record):
/// `sum_{j=1}^{beta_{tau-1}} A_{tau-1}^j
///  + sum_{l=1}^{tau-1} sum_{m=1}^{beta_{l-1}} (A_{tau-1}^{beta_{tau-1}} ... A_l^{beta_l}) A_{l-1}^m`.
/// Zero for `tau = 0`.
pub fn carried_term(history: &BatchHistory) -> Result<DMatrix<f64>> {
    let recs = history.records();
    let last = recs.last().ok_or(DktvError::EmptyHistory)?;
    let r = last.a.nrows();
    let tau = last.tau;
    if tau == 0 {
        return Ok(DMatrix::zeros(r, r));
    }
    let prev = &recs[tau - 1];
    let mut total = power_sum_from_one(&prev.a, prev.beta);
    let mut product = DMatrix::<f64>::identity(r, r);
    for l in (1..tau).rev() {
        product *= matrix_power(&recs[l].a, recs[l].beta);
        total += &product * power_sum_from_one(&recs[l - 1].a, recs[l - 1].beta);
    }
    Ok(total)
}

/// The accumulation matrix for a step `h = k - k_tau` into the last batch:
/// `sum_{i=0}^{h-2} A_tau^i + A_tau^{h-2} T`, with `T` from [`carried_term`].
/// Valid for `2 <= h <= beta_tau + 1`.
pub fn accumulation_matrix(history: &BatchHistory, h: usize) -> Result<DMatrix<f64>> {
    let last = history.records().last().ok_or(DktvError::EmptyHistory)?;
    if h < 2 || h > last.beta + 1 {
        return Err(DktvError::HorizonTooLong {
            horizon: h,
            beta: last.beta,
        });
    }
    let carried = carried_term(history)?;
    Ok(accumulation_with(&last.a, &carried, h))
}

fn accumulation_with(a: &DMatrix<f64>, carried: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let r = a.nrows();
    let mut sum = DMatrix::zeros(r, r);
    let mut p = DMatrix::identity(r, r);
    for i in 0..=(h - 2) {
        if i > 0 {
            p = &p * a;
        }
        sum += &p;
    }
    sum + p * carried
}

/// Which hypotheses behind the bound fail for this batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionBreaches {
    /// `||A_tau||` in the report norm.
    pub a_norm: f64,
    /// `||A_tau|| >= 1`.
    pub a_not_contractive: bool,
    /// The lifted batch does not have the required full row rank.
    pub rank_deficient: bool,
    /// `mu_g` came from sampled pairs.
    pub mu_g_sampled: bool,
    /// Training diverged and the snapshot fell back to earlier parameters.
    pub diverged: bool,
}

impl AssumptionBreaches {
    pub fn any(&self) -> bool {
        self.a_not_contractive || self.rank_deficient || self.mu_g_sampled || self.diverged
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedError {
    /// Global sample index of the predicted state.
    pub k: usize,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub tau: usize,
    pub norm: MatrixNorm,
    pub mu_x: f64,
    pub mu_u: f64,
    pub mu_g: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total_bound: f64,
    /// `(||C A|| mu_g + 1) mu_x + ||C B|| mu_u + L2`, the limit with `L1 = 0`.
    pub asymptotic_bound: f64,
    pub observed_errors: Vec<ObservedError>,
    pub violated: bool,
    /// First sample index whose error exceeds the bound.
    pub violation_k: Option<usize>,
    pub breaches: AssumptionBreaches,
}

impl ErrorBoundReport {
    /// Records `errors` and sets the violation flag.
    pub fn validate(mut self, errors: Vec<ObservedError>) -> Self {
        self.violation_k = errors.iter().find(|e| !(e.norm <= self.total_bound)).map(|e| e.k);
        self.violated = self.violation_k.is_some();
        self.observed_errors = errors;
        self
    }

    pub fn max_observed(&self) -> f64 {
        self.observed_errors.iter().map(|e| e.norm).fold(0.0, f64::max)
    }
}

/// Assembles the bound for the last batch in `history`, whose matrices must
/// be those of `snapshot`. `L_b` takes the largest accumulation over every
/// step `h = 2..=beta_tau + 1` of the batch.
pub fn bound_components(
    history: &BatchHistory,
    snapshot: &DkrSnapshot,
    inc: Increments,
    mu_g: LipschitzEstimate,
    res: Residuals,
    norm: MatrixNorm,
) -> Result<ErrorBoundReport> {
    let last = history.records().last().ok_or(DktvError::EmptyHistory)?;
    if last.tau != snapshot.tau {
        return Err(DktvError::BatchOrder {
            snapshot: snapshot.tau,
            batch: last.tau,
        });
    }
    let mats = &snapshot.matrices;
    let c = &mats.c;
    let ca = norm.eval(&(c * &mats.a));
    let cb = if mats.m() == 0 { 0.0 } else { norm.eval(&(c * &mats.b)) };
    let l_a = ca * mu_g.value * inc.mu_x + cb * inc.mu_u;
    let carried = carried_term(history)?;
    let mut coef: f64 = 0.0;
    for h in 2..=last.beta.max(1) + 1 {
        coef = coef.max(norm.eval(&(c * accumulation_with(&last.a, &carried, h))));
    }
    let l_b = coef * res.l1;
    let l_c = inc.mu_x + res.l2;
    let a_norm = norm.eval(&mats.a);
    Ok(ErrorBoundReport {
        tau: snapshot.tau,
        norm,
        mu_x: inc.mu_x,
        mu_u: inc.mu_u,
        mu_g: mu_g.value,
        l1: res.l1,
        l2: res.l2,
        l_a,
        l_b,
        l_c,
        total_bound: l_a + l_b + l_c,
        asymptotic_bound: (ca * mu_g.value + 1.0) * inc.mu_x + cb * inc.mu_u + res.l2,
        observed_errors: Vec::new(),
        violated: false,
        violation_k: None,
        breaches: AssumptionBreaches {
            a_norm,
            a_not_contractive: a_norm >= 1.0,
            mu_g_sampled: !mu_g.exhaustive,
            diverged: snapshot.diverged,
            ..AssumptionBreaches::default()
        },
    })
}

/// The sample right after a batch: the input applied at the batch's last
/// state and the state it leads to.
#[derive(Clone, Debug, PartialEq)]
pub struct NextSample {
    pub u: DVector<f64>,
    pub x: DVector<f64>,
}

/// Full report for one batch: increments, residuals, an exhaustive Lipschitz
/// scan of the batch states, the bound, and the one-step errors it covers.
///
/// The errors are predictions of `x_{k_tau + j}` from the observed
/// `x_{k_tau + j - 1}` for `j = 2..=beta`, plus `j = beta + 1` when `next`
/// is supplied.
pub fn analyze_batch(
    history: &BatchHistory,
    snapshot: &DkrSnapshot,
    batch: &DataBatch,
    next: Option<&NextSample>,
    norm: MatrixNorm,
    exec: Exec,
) -> Result<ErrorBoundReport> {
    if batch.tau != snapshot.tau {
        return Err(DktvError::BatchOrder {
            snapshot: snapshot.tau,
            batch: batch.tau,
        });
    }
    let mut states = batch.states();
    let mut inputs = batch.u.clone();
    if let Some(nx) = next {
        let cols = states.ncols();
        states = states.insert_column(cols, 0.0);
        let last = states.ncols() - 1;
        states.set_column(last, &nx.x);
        if batch.m() > 0 {
            let cols = inputs.ncols();
            inputs = inputs.insert_column(cols, 0.0);
            let lu = inputs.ncols() - 1;
            inputs.set_column(lu, &nx.u);
        }
    }
    let inc = increments(&states, &inputs);
    let batch_states = batch.states();
    let mu_g = match lipschitz_exhaustive(&snapshot.net, &batch_states, exec) {
        Ok(v) => v,
        Err(DktvError::IdenticalSamples) => 0.0,
        Err(e) => return Err(e),
    };
    let res = residual_maxima(batch, snapshot)?;
    let mut report = bound_components(
        history,
        snapshot,
        inc,
        LipschitzEstimate {
            value: mu_g,
            exhaustive: true,
        },
        res,
        norm,
    )?;
    let (g, _) = lift(&snapshot.net, batch)?;
    report.breaches.rank_deficient = !check_rank(&g, &batch.u).satisfied;

    let beta = batch.beta();
    let stop = if next.is_some() { beta + 1 } else { beta };
    let mut errors = Vec::new();
    for j in 2..=stop {
        let prev = states.column(j - 1).into_owned();
        let u = if batch.m() == 0 {
            DVector::zeros(0)
        } else {
            inputs.column(j - 1).into_owned()
        };
        let pred = predict_one(snapshot, &prev, &u)?;
        errors.push(ObservedError {
            k: batch.k_start + j,
            norm: (pred - states.column(j)).norm(),
        });
    }
    Ok(report.validate(errors))
}

/// Reports for every snapshot of an online run, in batch order. `stream`
/// holds all states and `inputs` all inputs of the run; the first sample
/// after each batch is included when the stream has it.
pub fn analyze_run(
    snapshots: &[DkrSnapshot],
    batches: &[DataBatch],
    stream: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    norm: MatrixNorm,
    exec: Exec,
) -> Result<Vec<ErrorBoundReport>> {
    if snapshots.len() != batches.len() {
        return Err(DktvError::dims("snapshots per batch", batches.len(), snapshots.len()));
    }
    let history = BatchHistory::from_snapshots(snapshots)?;
    let mut out = Vec::with_capacity(snapshots.len());
    for (s, b) in snapshots.iter().zip(batches) {
        let k = b.k_end();
        let has_input = b.m() == 0 || k < inputs.ncols();
        let next = (k + 1 < stream.ncols() && has_input).then(|| NextSample {
            u: if b.m() == 0 { DVector::zeros(0) } else { inputs.column(k).into_owned() },
            x: stream.column(k + 1).into_owned(),
        });
        out.push(analyze_batch(&history.up_to(s.tau), s, b, next.as_ref(), norm, exec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ObservableNet;
    use crate::regression::KoopmanMatrices;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn snapshot(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, tau: usize, beta: usize) -> DkrSnapshot {
        let n = c.nrows();
        DkrSnapshot {
            net: ObservableNet::identity(n),
            matrices: KoopmanMatrices { a, b, c },
            tau,
            k_start: tau * beta,
            beta,
            train_stats: Vec::new(),
            diverged: false,
        }
    }

    fn record(tau: usize, a: &DMatrix<f64>, c: &DMatrix<f64>, beta: usize) -> BatchRecord {
        BatchRecord {
            tau,
            a: a.clone(),
            c: c.clone(),
            beta,
        }
    }

    #[test]
    fn increments_trivial_cases() {
        let flat = DMatrix::from_element(2, 5, 0.7);
        let inc = increments(&flat, &DMatrix::zeros(0, 4));
        assert_eq!((inc.mu_x, inc.mu_u), (0.0, 0.0));
        let alt = DMatrix::from_fn(2, 6, |i, j| if j % 2 == 0 { 0.0 } else if i == 0 { 3.0 } else { 4.0 });
        assert!((increments(&alt, &DMatrix::zeros(0, 5)).mu_x - 5.0).abs() < 1e-15);
    }

    #[test]
    fn residual_maxima_match_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, beta) = (3, 1, 7);
        let x = rand_mat(n, beta + 1, 1.0, &mut rng);
        let u = rand_mat(m, beta, 1.0, &mut rng);
        let batch = DataBatch::new(0, 0, x.columns(0, beta).into(), x.columns(1, beta).into(), u.clone()).unwrap();
        let snap = snapshot(rand_mat(n, n, 1.0, &mut rng), rand_mat(n, m, 1.0, &mut rng), rand_mat(n, n, 1.0, &mut rng), 0, beta);
        let res = residual_maxima(&batch, &snap).unwrap();
        let mats = &snap.matrices;
        let mut l1: f64 = 0.0;
        let mut l2: f64 = 0.0;
        for s in 0..beta {
            let xs = x.column(s);
            let r = x.column(s + 1) - &mats.a * xs - &mats.b * u.column(s);
            l1 = l1.max(r.norm());
        }
        for s in 0..=beta {
            l2 = l2.max((x.column(s) - &mats.c * x.column(s)).norm());
        }
        assert!((res.l1 - l1).abs() < 1e-14);
        assert!((res.l2 - l2).abs() < 1e-14);
    }

    #[test]
    fn nilpotent_history_collapses_to_c_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = 4;
        let z = DMatrix::zeros(r, r);
        let c = rand_mat(2, r, 1.0, &mut rng);
        let mut h = BatchHistory::new();
        for tau in 0..4 {
            h.push(record(tau, &z, &c, 6)).unwrap();
        }
        let snap = snapshot(z.clone(), DMatrix::zeros(r, 0), c.clone(), 3, 6);
        let rep = bound_components(
            &h,
            &snap,
            Increments { mu_x: 0.1, mu_u: 0.0 },
            LipschitzEstimate { value: 2.0, exhaustive: true },
            Residuals { l1: 0.3, l2: 0.05 },
            MatrixNorm::Spectral,
        )
        .unwrap();
        let c_norm = c.clone().svd(false, false).singular_values.max();
        // A^0 = I in the leading sum; A^0 T with T = 0 for h = 2
        assert!((rep.l_b - c_norm * 0.3).abs() < 1e-12);
        assert!(rep.l_a == 0.0);
        assert!((rep.total_bound - (rep.l_b + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn two_and_three_batch_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = 3;
        let a0 = rand_mat(r, r, 0.6, &mut rng);
        let a1 = rand_mat(r, r, 0.6, &mut rng);
        let a2 = rand_mat(r, r, 0.6, &mut rng);
        let c = rand_mat(2, r, 1.0, &mut rng);
        let i = DMatrix::<f64>::identity(r, r);
        let mut h = BatchHistory::new();
        h.push(record(0, &a0, &c, 3)).unwrap();
        // tau = 0 keeps only the leading sum
        assert_eq!(accumulation_matrix(&h, 2).unwrap(), i);
        let s3 = accumulation_matrix(&h, 3).unwrap();
        assert!((s3 - (&i + &a0)).amax() < 1e-15);

        h.push(record(1, &a1, &c, 2)).unwrap();
        let a0_sum = &a0 + &a0 * &a0 + &a0 * &a0 * &a0;
        // h = 2: I + (A0 + A0^2 + A0^3)
        let s = accumulation_matrix(&h, 2).unwrap();
        assert!((s - (&i + &a0_sum)).amax() < 1e-14);
        // h = 3: I + A1 + A1 (A0 + A0^2 + A0^3)
        let s = accumulation_matrix(&h, 3).unwrap();
        assert!((s - (&i + &a1 + &a1 * &a0_sum)).amax() < 1e-14);
        assert!(accumulation_matrix(&h, 4).is_err());

        h.push(record(2, &a2, &c, 2)).unwrap();
        // T = A1 + A1^2 + A1^2 (A0 + A0^2 + A0^3)
        let t = &a1 + &a1 * &a1 + &a1 * &a1 * &a0_sum;
        let s = accumulation_matrix(&h, 3).unwrap();
        assert!((s - (&i + &a2 + &a2 * &t)).amax() < 1e-14);
    }

    #[test]
    fn zero_l1_gives_the_limit_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = 3;
        let a = rand_mat(r, r, 0.4, &mut rng);
        let b = rand_mat(r, 1, 1.0, &mut rng);
        let c = rand_mat(2, r, 1.0, &mut rng);
        let mut h = BatchHistory::new();
        h.push(record(0, &a, &c, 5)).unwrap();
        let snap = snapshot(a.clone(), b.clone(), c.clone(), 0, 5);
        let rep = bound_components(
            &h,
            &snap,
            Increments { mu_x: 0.2, mu_u: 0.3 },
            LipschitzEstimate { value: 1.5, exhaustive: true },
            Residuals { l1: 0.0, l2: 0.01 },
            MatrixNorm::Spectral,
        )
        .unwrap();
        assert_eq!(rep.l_b, 0.0);
        assert!((rep.total_bound - (rep.l_a + 0.2 + 0.01)).abs() < 1e-15);
        assert!((rep.total_bound - rep.asymptotic_bound).abs() < 1e-14);
        let ca = MatrixNorm::Spectral.eval(&(&c * &a));
        let cb = MatrixNorm::Spectral.eval(&(&c * &b));
        assert!((rep.l_a - (ca * 1.5 * 0.2 + cb * 0.3)).abs() < 1e-14);
    }

    #[test]
    fn l_b_grows_with_l1_and_a_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = 3;
        let a = rand_mat(r, r, 0.5, &mut rng).map(|v| v.abs());
        let c = rand_mat(2, r, 1.0, &mut rng).map(|v| v.abs());
        let build = |scale: f64, l1: f64| {
            let mut h = BatchHistory::new();
            for tau in 0..3 {
                h.push(record(tau, &(&a * scale), &c, 4)).unwrap();
            }
            let snap = snapshot(&a * scale, DMatrix::zeros(r, 0), c.clone(), 2, 4);
            bound_components(
                &h,
                &snap,
                Increments::default(),
                LipschitzEstimate { value: 1.0, exhaustive: true },
                Residuals { l1, l2: 0.0 },
                MatrixNorm::Spectral,
            )
            .unwrap()
            .l_b
        };
        let mut prev = 0.0;
        for s in [0.5, 0.8, 1.0, 1.1] {
            let v = build(s, 0.1);
            assert!(v >= prev);
            prev = v;
        }
        assert!(build(1.0, 0.2) >= build(1.0, 0.1));
    }

    #[test]
    fn validate_flags_the_first_excess() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(2, 2, 0.3, &mut rng);
        let c = DMatrix::identity(2, 2);
        let mut h = BatchHistory::new();
        h.push(record(0, &a, &c, 3)).unwrap();
        let snap = snapshot(a, DMatrix::zeros(2, 0), c, 0, 3);
        let rep = bound_components(
            &h,
            &snap,
            Increments { mu_x: 0.1, mu_u: 0.0 },
            LipschitzEstimate { value: 1.0, exhaustive: true },
            Residuals { l1: 0.0, l2: 0.0 },
            MatrixNorm::Spectral,
        )
        .unwrap();
        let zeros = vec![ObservedError { k: 2, norm: 0.0 }, ObservedError { k: 3, norm: 0.0 }];
        assert!(!rep.clone().validate(zeros).violated);
        let bad = vec![
            ObservedError { k: 2, norm: 0.0 },
            ObservedError { k: 3, norm: rep.total_bound * 2.0 },
            ObservedError { k: 4, norm: rep.total_bound * 3.0 },
        ];
        let v = rep.validate(bad);
        assert!(v.violated);
        assert_eq!(v.violation_k, Some(3));
    }

    #[test]
    fn breach_flags_and_errors() {
        let a = DMatrix::identity(2, 2) * 2.0;
        let c = DMatrix::identity(2, 2);
        let mut h = BatchHistory::new();
        assert!(matches!(
            bound_components(
                &h,
                &snapshot(a.clone(), DMatrix::zeros(2, 0), c.clone(), 0, 3),
                Increments::default(),
                LipschitzEstimate { value: 1.0, exhaustive: false },
                Residuals::default(),
                MatrixNorm::Spectral
            ),
            Err(DktvError::EmptyHistory)
        ));
        assert!(h.push(record(1, &a, &c, 3)).is_err());
        h.push(record(0, &a, &c, 3)).unwrap();
        let rep = bound_components(
            &h,
            &snapshot(a, DMatrix::zeros(2, 0), c, 0, 3),
            Increments::default(),
            LipschitzEstimate { value: 1.0, exhaustive: false },
            Residuals::default(),
            MatrixNorm::Spectral,
        )
        .unwrap();
        assert!(rep.breaches.a_not_contractive && rep.breaches.mu_g_sampled && rep.breaches.any());
        assert!((rep.breaches.a_norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_identity_batch_is_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_mat(2, 2, 0.5, &mut rng);
        let b = rand_mat(2, 1, 1.0, &mut rng);
        let steps = 12;
        let mut x = DMatrix::zeros(2, steps + 1);
        x.set_column(0, &DVector::from_vec(vec![1.0, -0.5]));
        let u = rand_mat(1, steps, 1.0, &mut rng);
        for k in 0..steps {
            let next = &a * x.column(k) + &b * u.column(k) + rand_mat(2, 1, 0.01, &mut rng);
            x.set_column(k + 1, &next);
        }
        let beta = 10;
        let batch = DataBatch::new(0, 0, x.columns(0, beta).into(), x.columns(1, beta).into(), u.columns(0, beta).into()).unwrap();
        let snap = snapshot(a, b, DMatrix::identity(2, 2), 0, beta);
        let h = BatchHistory::from_snapshots([&snap]).unwrap();
        let next = NextSample {
            u: u.column(beta).into_owned(),
            x: x.column(beta + 1).into_owned(),
        };
        let rep = analyze_batch(&h, &snap, &batch, Some(&next), MatrixNorm::Spectral, Exec::Sequential).unwrap();
        assert_eq!(rep.observed_errors.len(), beta);
        assert_eq!(rep.observed_errors.last().unwrap().k, beta + 1);
        assert!((rep.mu_g - 1.0).abs() < 1e-12);
        assert!(!rep.violated, "{rep:?}");
        assert!(rep.l2 < 1e-15);
    }
}
