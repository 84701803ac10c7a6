//! Least-squares fits of the lifted model and their recursive update.
//!
//! For lifted states `G`, successors `Gb`, inputs `U` and raw states `X`:
//!
//! ```text
//! [A, B] = Gb [G; U]^+        C = X G^+
//! ```
//!
//! [`RecursiveCache`] keeps the accumulated moments `V = sum Gb chi^T`,
//! `Gram = sum chi chi^T` (with `chi = [G; U]`) and their analogues for `C`,
//! so that absorbing a new batch only needs one `beta x beta` inverse.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};
use crate::linalg::{all_finite, inverse_residual, numerical_rank, pinv, spd_inverse, vstack};

/// Gram inverses are accepted when `||Gram * inv - I||_F` is below this.
pub const INVERSE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanMatrices {
    /// r x r lifted transition.
    pub a: DMatrix<f64>,
    /// r x m input matrix; zero columns for an autonomous system.
    pub b: DMatrix<f64>,
    /// n x r projection back to the state.
    pub c: DMatrix<f64>,
}

impl KoopmanMatrices {
    pub fn zeros(n: usize, m: usize, r: usize) -> Self {
        Self {
            a: DMatrix::zeros(r, r),
            b: DMatrix::zeros(r, m),
            c: DMatrix::zeros(n, r),
        }
    }

    pub fn r(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.a) && all_finite(&self.b) && all_finite(&self.c)
    }

    /// `[A, B]` as one r x (r + m) block.
    pub fn ab(&self) -> DMatrix<f64> {
        crate::linalg::hstack(&self.a, &self.b)
    }

    fn from_blocks(ab: &DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let r = ab.nrows();
        Self {
            a: ab.columns(0, r).into_owned(),
            b: ab.columns(r, ab.ncols() - r).into_owned(),
            c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank_g: usize,
    pub rank_chi: usize,
    pub required_g: usize,
    pub required_chi: usize,
    pub columns: usize,
    pub satisfied: bool,
}

/// Full-row-rank check for `G` (r x beta) and `[G; U]` ((r + m) x beta).
pub fn check_rank(g: &DMatrix<f64>, u: &DMatrix<f64>) -> RankReport {
    let r = g.nrows();
    let m = u.nrows();
    let chi = vstack(g, u);
    let rank_g = numerical_rank(g);
    let rank_chi = numerical_rank(&chi);
    RankReport {
        rank_g,
        rank_chi,
        required_g: r,
        required_chi: r + m,
        columns: g.ncols(),
        satisfied: rank_g == r && rank_chi == r + m,
    }
}

fn check_shapes(g: &DMatrix<f64>, gb: &DMatrix<f64>, u: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    let beta = g.ncols();
    if gb.shape() != g.shape() {
        return Err(DktvError::dims("lifted successor columns", beta, gb.ncols()));
    }
    if u.ncols() != beta {
        return Err(DktvError::dims("input columns", beta, u.ncols()));
    }
    if x.ncols() != beta {
        return Err(DktvError::dims("state columns", beta, x.ncols()));
    }
    Ok(())
}

/// Minimum-norm least-squares fit without rank or size checks.
pub fn fit_min_norm(g: &DMatrix<f64>, gb: &DMatrix<f64>, u: &DMatrix<f64>, x: &DMatrix<f64>) -> KoopmanMatrices {
    let chi = vstack(g, u);
    let ab = gb * pinv(&chi);
    let c = x * pinv(g);
    KoopmanMatrices::from_blocks(&ab, c)
}

/// Closed-form fit of one batch, after checking size and rank.
pub fn fit_batch(g: &DMatrix<f64>, gb: &DMatrix<f64>, u: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<KoopmanMatrices> {
    check_shapes(g, gb, u, x)?;
    let required = g.nrows() + u.nrows();
    if g.ncols() < required {
        return Err(DktvError::InsufficientColumns {
            columns: g.ncols(),
            required,
        });
    }
    let report = check_rank(g, u);
    if !report.satisfied {
        return Err(DktvError::RankDeficient(report));
    }
    let mats = fit_min_norm(g, gb, u, x);
    if !mats.is_finite() {
        return Err(DktvError::NonFinite("fitted matrices".into()));
    }
    Ok(mats)
}

/// `(L1, L2)`: mean squared lifted and reconstruction residuals.
pub fn component_losses(
    g: &DMatrix<f64>,
    gb: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x: &DMatrix<f64>,
    mats: &KoopmanMatrices,
) -> (f64, f64) {
    let beta = g.ncols().max(1) as f64;
    let mut r1 = gb - &mats.a * g;
    if u.nrows() > 0 {
        r1 -= &mats.b * u;
    }
    let r2 = x - &mats.c * g;
    (r1.norm_squared() / beta, r2.norm_squared() / beta)
}

/// Accumulated moments for the two least-squares problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursiveCache {
    pub v_ab: DMatrix<f64>,
    pub g_ab: DMatrix<f64>,
    pub g_ab_inv: DMatrix<f64>,
    pub v_c: DMatrix<f64>,
    pub g_c: DMatrix<f64>,
    pub g_c_inv: DMatrix<f64>,
    pub batches_absorbed: usize,
    /// Updates where the block inverse failed and moments were refit directly.
    pub fallbacks: usize,
    /// Updates where an inverse drifted past [`INVERSE_TOL`] and was rebuilt.
    pub rebuilds: usize,
}

fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    spd_inverse(m).ok_or_else(|| DktvError::Singular(what.into()))
}

impl RecursiveCache {
    /// Seeds the cache with one batch and returns the matching fit.
    pub fn from_batch(
        g: &DMatrix<f64>,
        gb: &DMatrix<f64>,
        u: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> Result<(KoopmanMatrices, Self)> {
        let r = g.nrows();
        let m = u.nrows();
        let n = x.nrows();
        let empty = Self::empty(n, m, r);
        // rank is checked so that the seeded Gram matrices are invertible
        fit_batch(g, gb, u, x)?;
        empty.absorb_direct(g, gb, u, x)
    }

    /// Cache with no data absorbed yet.
    pub fn empty(n: usize, m: usize, r: usize) -> Self {
        Self {
            v_ab: DMatrix::zeros(r, r + m),
            g_ab: DMatrix::zeros(r + m, r + m),
            g_ab_inv: DMatrix::zeros(r + m, r + m),
            v_c: DMatrix::zeros(n, r),
            g_c: DMatrix::zeros(r, r),
            g_c_inv: DMatrix::zeros(r, r),
            batches_absorbed: 0,
            fallbacks: 0,
            rebuilds: 0,
        }
    }

    pub fn r(&self) -> usize {
        self.g_c.nrows()
    }

    pub fn m(&self) -> usize {
        self.g_ab.nrows() - self.g_c.nrows()
    }

    pub fn n(&self) -> usize {
        self.v_c.nrows()
    }

    /// Solution of the accumulated normal equations.
    pub fn solution(&self) -> KoopmanMatrices {
        let ab = &self.v_ab * &self.g_ab_inv;
        let c = &self.v_c * &self.g_c_inv;
        KoopmanMatrices::from_blocks(&ab, c)
    }

    /// Adds a batch by forming fresh inverses of the summed moments.
    pub fn absorb_direct(
        &self,
        g: &DMatrix<f64>,
        gb: &DMatrix<f64>,
        u: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> Result<(KoopmanMatrices, Self)> {
        self.check_batch(g, gb, u, x)?;
        let chi = vstack(g, u);
        let mut next = self.clone();
        next.v_ab += gb * chi.transpose();
        next.g_ab += &chi * chi.transpose();
        next.v_c += x * g.transpose();
        next.g_c += g * g.transpose();
        next.g_ab_inv = checked_inverse(&next.g_ab, "accumulated [G; U] Gram")?;
        next.g_c_inv = checked_inverse(&next.g_c, "accumulated G Gram")?;
        next.batches_absorbed += 1;
        let mats = next.solution();
        if !mats.is_finite() {
            return Err(DktvError::NonFinite("refit matrices".into()));
        }
        Ok((mats, next))
    }

    fn check_batch(&self, g: &DMatrix<f64>, gb: &DMatrix<f64>, u: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
        check_shapes(g, gb, u, x)?;
        if g.nrows() != self.r() {
            return Err(DktvError::dims("lifted dimension", self.r(), g.nrows()));
        }
        if u.nrows() != self.m() {
            return Err(DktvError::dims("input dimension", self.m(), u.nrows()));
        }
        if x.nrows() != self.n() {
            return Err(DktvError::dims("state dimension", self.n(), x.nrows()));
        }
        Ok(())
    }

    /// Rebuilds whichever inverse no longer satisfies [`INVERSE_TOL`].
    fn verify_inverses(&mut self) -> Result<()> {
        let mut rebuilt = false;
        if inverse_residual(&self.g_ab, &self.g_ab_inv) >= INVERSE_TOL {
            self.g_ab_inv = checked_inverse(&self.g_ab, "accumulated [G; U] Gram")?;
            rebuilt = true;
        }
        if inverse_residual(&self.g_c, &self.g_c_inv) >= INVERSE_TOL {
            self.g_c_inv = checked_inverse(&self.g_c, "accumulated G Gram")?;
            rebuilt = true;
        }
        if rebuilt {
            self.rebuilds += 1;
        }
        Ok(())
    }
}

/// One block (Woodbury) step for `M Phi ~ Y` given `M = V P` with
/// `P = Gram^-1`: returns the updated `(M, P)` or `None` when the
/// `beta x beta` capacitance matrix is singular.
fn woodbury(
    m: &DMatrix<f64>,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let beta = phi.ncols();
    let p_phi = p * phi;
    let cap = DMatrix::<f64>::identity(beta, beta) + phi.transpose() * &p_phi;
    let lambda = spd_inverse(&cap)?;
    let gain = &p_phi * &lambda;
    let m_next = m + (y - m * phi) * gain.transpose();
    let p_next = crate::linalg::symmetrize(&(p - &gain * p_phi.transpose()));
    if all_finite(&m_next) && all_finite(&p_next) {
        Some((m_next, p_next))
    } else {
        None
    }
}

/// Absorbs a new batch into `cache`, updating `current` by the block
/// inversion identity. `current` must be the cache's own solution.
pub fn recursive_update(
    cache: &RecursiveCache,
    current: &KoopmanMatrices,
    g: &DMatrix<f64>,
    gb: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<(KoopmanMatrices, RecursiveCache)> {
    cache.check_batch(g, gb, u, x)?;
    let chi = vstack(g, u);
    let ab = woodbury(&current.ab(), &cache.g_ab_inv, &chi, gb);
    let c = woodbury(&current.c, &cache.g_c_inv, g, x);
    match (ab, c) {
        (Some((ab, p_ab)), Some((c, p_c))) => {
            let mut next = cache.clone();
            next.v_ab += gb * chi.transpose();
            next.g_ab += &chi * chi.transpose();
            next.v_c += x * g.transpose();
            next.g_c += g * g.transpose();
            next.g_ab_inv = p_ab;
            next.g_c_inv = p_c;
            next.batches_absorbed += 1;
            let before = next.rebuilds;
            next.verify_inverses()?;
            let mats = if next.rebuilds != before {
                next.solution()
            } else {
                KoopmanMatrices::from_blocks(&ab, c)
            };
            Ok((mats, next))
        }
        _ => {
            log::warn!("block inverse failed; refitting from accumulated moments");
            let (mats, mut next) = cache.absorb_direct(g, gb, u, x)?;
            next.fallbacks += 1;
            Ok((mats, next))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hstack;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn exact_linear_lift_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, m, n, beta) = (4, 2, 3, 12);
        let a0 = rand_mat(r, r, &mut rng);
        let b0 = rand_mat(r, m, &mut rng);
        let c0 = rand_mat(n, r, &mut rng);
        let g = rand_mat(r, beta, &mut rng);
        let u = rand_mat(m, beta, &mut rng);
        let gb = &a0 * &g + &b0 * &u;
        let x = &c0 * &g;
        let fit = fit_batch(&g, &gb, &u, &x).unwrap();
        assert!((&fit.a - &a0).amax() < 1e-10);
        assert!((&fit.b - &b0).amax() < 1e-10);
        assert!((&fit.c - &c0).amax() < 1e-10);
    }

    #[test]
    fn noisy_fit_satisfies_orthogonality_and_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, m, n, beta) = (5, 1, 2, 15);
        let g = rand_mat(r, beta, &mut rng);
        let gb = rand_mat(r, beta, &mut rng);
        let u = rand_mat(m, beta, &mut rng);
        let x = rand_mat(n, beta, &mut rng);
        let fit = fit_batch(&g, &gb, &u, &x).unwrap();
        let chi = vstack(&g, &u);
        let ortho = (&gb - fit.ab() * &chi) * chi.transpose();
        assert!(ortho.amax() < 1e-8);
        // dense normal-equation oracle via LU
        let oracle = &gb * chi.transpose() * (&chi * chi.transpose()).try_inverse().unwrap();
        assert!(rel(&fit.ab(), &oracle) < 1e-9);
    }

    #[test]
    fn rank_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = rand_mat(4, 10, &mut rng);
        let row = g.row(0).into_owned();
        g.set_row(3, &row);
        let u = DMatrix::zeros(0, 10);
        let rep = check_rank(&g, &u);
        assert!(rep.rank_g < 4 && !rep.satisfied);
        let short = rand_mat(4, 5, &mut rng);
        let rep = check_rank(&short, &rand_mat(2, 5, &mut rng));
        assert!(!rep.satisfied);
        assert!(matches!(
            fit_batch(&short, &short, &rand_mat(2, 5, &mut rng), &short),
            Err(DktvError::InsufficientColumns { columns: 5, required: 6 })
        ));
        let good = rand_mat(4, 9, &mut rng);
        assert!(check_rank(&good, &rand_mat(2, 9, &mut rng)).satisfied);
        assert!(matches!(fit_batch(&g, &g, &u, &g), Err(DktvError::RankDeficient(_))));
    }

    #[test]
    fn component_losses_match_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, m, n, beta) = (3, 1, 2, 7);
        let g = rand_mat(r, beta, &mut rng);
        let gb = rand_mat(r, beta, &mut rng);
        let u = rand_mat(m, beta, &mut rng);
        let x = rand_mat(n, beta, &mut rng);
        let mats = KoopmanMatrices {
            a: rand_mat(r, r, &mut rng),
            b: rand_mat(r, m, &mut rng),
            c: rand_mat(n, r, &mut rng),
        };
        let (l1, l2) = component_losses(&g, &gb, &u, &x, &mats);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..beta {
            for i in 0..r {
                let mut pred = mats.b[(i, 0)] * u[(0, j)];
                for k in 0..r {
                    pred += mats.a[(i, k)] * g[(k, j)];
                }
                s1 += (gb[(i, j)] - pred).powi(2);
            }
            for i in 0..n {
                let mut pred = 0.0;
                for k in 0..r {
                    pred += mats.c[(i, k)] * g[(k, j)];
                }
                s2 += (x[(i, j)] - pred).powi(2);
            }
        }
        assert!((l1 - s1 / beta as f64).abs() < 1e-12);
        assert!((l2 - s2 / beta as f64).abs() < 1e-12);
        let zero = KoopmanMatrices::zeros(n, m, r);
        let (z1, z2) = component_losses(&g, &gb, &u, &x, &zero);
        assert!((z1 - gb.norm_squared() / beta as f64).abs() < 1e-12);
        assert!((z2 - x.norm_squared() / beta as f64).abs() < 1e-12);
    }

    #[test]
    fn recursive_update_equals_concatenated_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(r, m) in &[(4, 0), (4, 2), (6, 0), (6, 2)] {
            let n = 3;
            let beta = r + m + 5;
            let batches: Vec<_> = (0..4)
                .map(|_| {
                    (
                        rand_mat(r, beta, &mut rng),
                        rand_mat(r, beta, &mut rng),
                        rand_mat(m, beta, &mut rng),
                        rand_mat(n, beta, &mut rng),
                    )
                })
                .collect();
            let (g0, gb0, u0, x0) = &batches[0];
            let (mut mats, mut cache) = RecursiveCache::from_batch(g0, gb0, u0, x0).unwrap();
            let (mut gs, mut gbs, mut us, mut xs) = (g0.clone(), gb0.clone(), u0.clone(), x0.clone());
            for (g, gb, u, x) in &batches[1..] {
                (mats, cache) = recursive_update(&cache, &mats, g, gb, u, x).unwrap();
                gs = hstack(&gs, g);
                gbs = hstack(&gbs, gb);
                us = hstack(&us, u);
                xs = hstack(&xs, x);
                let oracle = fit_batch(&gs, &gbs, &us, &xs).unwrap();
                assert!(rel(&mats.ab(), &oracle.ab()) < 1e-8);
                assert!(rel(&mats.c, &oracle.c) < 1e-8);
                assert!(inverse_residual(&cache.g_ab, &cache.g_ab_inv) < INVERSE_TOL);
            }
            assert_eq!(cache.batches_absorbed, 4);
            assert_eq!(cache.fallbacks, 0);
        }
    }

    #[test]
    fn min_norm_on_rank_deficient_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // rank-2 G in R^4
        let basis = rand_mat(4, 2, &mut rng);
        let g = &basis * rand_mat(2, 9, &mut rng);
        let gb = rand_mat(4, 9, &mut rng);
        let u = DMatrix::zeros(0, 9);
        let x = rand_mat(2, 9, &mut rng);
        let fit = fit_min_norm(&g, &gb, &u, &x);
        // any other normal-equation solution adds a null-space term
        let null = DMatrix::from_fn(4, 1, |_, _| 1.0);
        let proj = &null - &basis * pinv(&basis) * &null;
        let alt = &fit.a + rand_mat(4, 1, &mut rng) * proj.transpose();
        let res_fit = (&gb - &fit.a * &g).norm();
        let res_alt = (&gb - &alt * &g).norm();
        assert!((res_fit - res_alt).abs() < 1e-9);
        assert!(fit.a.norm() < alt.norm());
    }
}
