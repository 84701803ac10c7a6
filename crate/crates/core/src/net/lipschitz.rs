//! Empirical Lipschitz estimates `max ||g(x) - g(y)|| / ||x - y||`.
//!
//! Every estimate here is a lower bound on the true constant, since it only
//! looks at finitely many pairs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::ObservableNet;
use crate::error::{DktvError, Result};
use crate::par::{self, Exec};

fn ratio(gx: &DVector<f64>, gy: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
    let d = (x - y).norm();
    if d == 0.0 {
        None
    } else {
        Some((gx - gy).norm() / d)
    }
}

/// Max ratio over explicitly supplied pairs.
pub fn estimate_lipschitz(
    net: &ObservableNet,
    pairs: &[(DVector<f64>, DVector<f64>)],
    exec: Exec,
) -> Result<f64> {
    let vals = par::map(exec, pairs, |(x, y)| -> Result<Option<f64>> {
        let gx = net.forward(x)?;
        let gy = net.forward(y)?;
        Ok(ratio(&gx, &gy, x, y))
    });
    let mut best: Option<f64> = None;
    for v in vals {
        if let Some(r) = v? {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    best.ok_or(DktvError::IdenticalSamples)
}

/// Max ratio over every unordered pair of columns of `states`.
pub fn lipschitz_exhaustive(net: &ObservableNet, states: &DMatrix<f64>, exec: Exec) -> Result<f64> {
    let n = states.ncols();
    let lifted = net.forward_batch(states)?;
    let best = par::max_range(exec, n, |i| {
        let mut m = f64::NEG_INFINITY;
        for j in (i + 1)..n {
            let d = (states.column(i) - states.column(j)).norm();
            if d > 0.0 {
                m = m.max((lifted.column(i) - lifted.column(j)).norm() / d);
            }
        }
        m
    });
    if best == f64::NEG_INFINITY {
        Err(DktvError::IdenticalSamples)
    } else {
        Ok(best)
    }
}

/// Draws `count` random column pairs (with replacement) from `states`.
pub fn lipschitz_pairs_from_states<R: Rng + ?Sized>(
    states: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let n = states.ncols();
    if n < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (states.column(i).into_owned(), states.column(j).into_owned())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;
    use crate::net::{chain_layers, Activation, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_net(w: &DMatrix<f64>) -> ObservableNet {
        let layer = LayerSpec::new(w.ncols(), w.nrows(), Activation::Identity);
        let mut theta = w.as_slice().to_vec();
        theta.extend(std::iter::repeat_n(0.0, w.nrows()));
        ObservableNet::new(vec![layer], theta).unwrap()
    }

    #[test]
    fn linear_map_bounded_by_spectral_norm_and_attains_it() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let net = linear_net(&w);
        let s = spectral_norm(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = DMatrix::from_fn(2, 30, |_, _| rng.random_range(-1.0..1.0));
        let est = lipschitz_exhaustive(&net, &states, Exec::Sequential).unwrap();
        assert!(est <= s + 1e-12);
        let v = w.clone().svd(false, true).v_t.unwrap().row(0).transpose();
        let pair = vec![(DVector::zeros(2), v)];
        let top = estimate_lipschitz(&net, &pair, Exec::Sequential).unwrap();
        assert!((top - s).abs() < 1e-12);
    }

    #[test]
    fn constant_network_is_zero() {
        let layers = chain_layers(3, &[(4, Activation::Relu)]);
        let net = ObservableNet::zeros(layers).unwrap();
        let states = DMatrix::from_fn(3, 5, |i, j| (i * j) as f64);
        assert_eq!(lipschitz_exhaustive(&net, &states, Exec::Sequential).unwrap(), 0.0);
    }

    #[test]
    fn identical_samples_are_rejected() {
        let net = ObservableNet::identity(2);
        let states = DMatrix::from_element(2, 4, 1.5);
        assert!(matches!(
            lipschitz_exhaustive(&net, &states, Exec::Sequential),
            Err(DktvError::IdenticalSamples)
        ));
    }

    #[test]
    fn dense_sampling_close_to_exhaustive() {
        let layers = chain_layers(2, &[(32, Activation::Relu), (6, Activation::Relu)]);
        let net = ObservableNet::seeded(layers, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states = DMatrix::from_fn(2, 40, |_, _| rng.random_range(-2.0..2.0));
        let full = lipschitz_exhaustive(&net, &states, Exec::Parallel).unwrap();
        let pairs = lipschitz_pairs_from_states(&states, 4000, &mut rng);
        let sampled = estimate_lipschitz(&net, &pairs, Exec::Parallel).unwrap();
        assert!(sampled <= full + 1e-12);
        assert!(sampled >= 0.9 * full, "sampled {sampled} vs exhaustive {full}");
        assert_eq!(full, lipschitz_exhaustive(&net, &states, Exec::Sequential).unwrap());
    }
}
