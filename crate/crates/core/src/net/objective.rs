//! Batch objective for the observable and its exact gradient.
//!
//! With lifted batch `G = g(X)`, `Gb = g(Xb)` and fixed model matrices,
//!
//! ```text
//! L1 = ||Gb - A G - B U||_F^2 / beta
//! L2 = ||X - C G||_F^2 / beta
//! L  = 2 (w L1 + (1 - w) L2) + lambda_A * max(0, ||A||_F - 1)^2
//! ```
//!
//! At `w = 0.5` the residual part is the plain stacked form `L1 + L2`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ObservableNet;
use crate::error::{DktvError, Result};
use crate::linalg::{hstack, spd_inverse, vstack};
use crate::pipeline::DataBatch;
use crate::regression::KoopmanMatrices;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Weight of the lifted-dynamics residual; `1 - w` goes to reconstruction.
    pub w: f64,
    /// Weight of the `||A||_F <= 1` hinge penalty.
    pub lambda_a: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { w: 0.5, lambda_a: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub penalty: f64,
}

/// Moments accumulated before the current batch.
///
/// When supplied, the penalty term sees `[A, B]` as the refit
/// `(V + Gb chi^T)(Gram + chi chi^T)^-1` with `chi = [G; U]`, so its gradient
/// reaches theta through the current batch. Without it `A` is a constant and
/// the penalty contributes no gradient.
#[derive(Clone, Copy, Debug)]
pub struct PriorMoments<'a> {
    pub cross: &'a DMatrix<f64>,
    pub gram: &'a DMatrix<f64>,
}

fn penalty_value(a: &DMatrix<f64>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let excess = (a.norm() - 1.0).max(0.0);
    lambda * excess * excess
}

/// `dP/dA`.
fn penalty_grad(a: &DMatrix<f64>, lambda: f64) -> Option<DMatrix<f64>> {
    let nf = a.norm();
    if lambda == 0.0 || nf <= 1.0 {
        return None;
    }
    Some(a * (2.0 * lambda * (nf - 1.0) / nf))
}

fn check_dims(net: &ObservableNet, batch: &DataBatch, mats: &KoopmanMatrices) -> Result<()> {
    let r = net.output_dim();
    if mats.a.shape() != (r, r) {
        return Err(DktvError::dims("A rows", r, mats.a.nrows()));
    }
    if mats.c.ncols() != r || mats.c.nrows() != batch.x.nrows() {
        return Err(DktvError::dims("C shape", batch.x.nrows() * r, mats.c.len()));
    }
    if mats.b.nrows() != r || mats.b.ncols() != batch.u.nrows() {
        return Err(DktvError::dims("B columns", batch.u.nrows(), mats.b.ncols()));
    }
    Ok(())
}

struct Residuals {
    r1: DMatrix<f64>,
    r2: DMatrix<f64>,
}

fn residuals(g: &DMatrix<f64>, gb: &DMatrix<f64>, batch: &DataBatch, mats: &KoopmanMatrices) -> Residuals {
    let mut r1 = gb - &mats.a * g;
    if mats.b.ncols() > 0 {
        r1 -= &mats.b * &batch.u;
    }
    let r2 = &batch.x - &mats.c * g;
    Residuals { r1, r2 }
}

fn refit_a(
    prior: &PriorMoments<'_>,
    g: &DMatrix<f64>,
    gb: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let chi = vstack(g, u);
    let cross = prior.cross + gb * chi.transpose();
    let gram = prior.gram + &chi * chi.transpose();
    let gram_inv = spd_inverse(&gram).ok_or_else(|| DktvError::Singular("refit Gram".into()))?;
    let m = &cross * &gram_inv;
    Ok((m, gram_inv, chi, cross))
}

fn assemble(
    l1: f64,
    l2: f64,
    penalty: f64,
    weights: &ObjectiveWeights,
) -> Result<LossBreakdown> {
    let total = 2.0 * (weights.w * l1 + (1.0 - weights.w) * l2) + penalty;
    if !total.is_finite() {
        return Err(DktvError::NonFinite("objective value".into()));
    }
    Ok(LossBreakdown {
        total,
        l1,
        l2,
        penalty,
    })
}

/// Objective value only.
pub fn loss_value(
    net: &ObservableNet,
    batch: &DataBatch,
    mats: &KoopmanMatrices,
    weights: &ObjectiveWeights,
    prior: Option<&PriorMoments<'_>>,
) -> Result<LossBreakdown> {
    check_dims(net, batch, mats)?;
    let beta = batch.beta() as f64;
    let g = net.forward_batch(&batch.x)?;
    let gb = net.forward_batch(&batch.x_bar)?;
    let res = residuals(&g, &gb, batch, mats);
    let penalty = match prior {
        Some(p) if weights.lambda_a != 0.0 => {
            let (m, ..) = refit_a(p, &g, &gb, &batch.u)?;
            let r = g.nrows();
            penalty_value(&m.columns(0, r).into_owned(), weights.lambda_a)
        }
        _ => penalty_value(&mats.a, weights.lambda_a),
    };
    assemble(
        res.r1.norm_squared() / beta,
        res.r2.norm_squared() / beta,
        penalty,
        weights,
    )
}

/// Objective value and its gradient with respect to the network parameters.
pub fn loss_gradient(
    net: &ObservableNet,
    batch: &DataBatch,
    mats: &KoopmanMatrices,
    weights: &ObjectiveWeights,
    prior: Option<&PriorMoments<'_>>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_dims(net, batch, mats)?;
    let beta_n = batch.beta();
    let beta = beta_n as f64;
    let stacked = hstack(&batch.x, &batch.x_bar);
    let trace = net.forward_trace(&stacked)?;
    let lifted = trace.output();
    let g = lifted.columns(0, beta_n).into_owned();
    let gb = lifted.columns(beta_n, beta_n).into_owned();
    let res = residuals(&g, &gb, batch, mats);
    let l1 = res.r1.norm_squared() / beta;
    let l2 = res.r2.norm_squared() / beta;

    // dL/dG and dL/dGb from the two residual blocks
    let c1 = 2.0 * weights.w * 2.0 / beta;
    let c2 = 2.0 * (1.0 - weights.w) * 2.0 / beta;
    let mut d_g = -(mats.a.transpose() * &res.r1) * c1 - (mats.c.transpose() * &res.r2) * c2;
    let mut d_gb = &res.r1 * c1;

    let r = g.nrows();
    let penalty = match prior {
        Some(p) if weights.lambda_a != 0.0 => {
            let (m, gram_inv, chi, _) = refit_a(p, &g, &gb, &batch.u)?;
            let a_fit = m.columns(0, r).into_owned();
            if let Some(w_a) = penalty_grad(&a_fit, weights.lambda_a) {
                let mut w_full = DMatrix::zeros(r, chi.nrows());
                w_full.columns_mut(0, r).copy_from(&w_a);
                let z = &w_full * &gram_inv;
                let s = m.transpose() * &z;
                d_gb += &z * &chi;
                let d_chi = z.transpose() * &gb - (&s + s.transpose()) * &chi;
                d_g += d_chi.rows(0, r);
            }
            penalty_value(&a_fit, weights.lambda_a)
        }
        _ => penalty_value(&mats.a, weights.lambda_a),
    };

    let loss = assemble(l1, l2, penalty, weights)?;
    let d_out = hstack(&d_g, &d_gb);
    let grad = net.backward(&trace, &d_out);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(DktvError::NonFinite("objective gradient".into()));
    }
    Ok((loss, grad))
}
