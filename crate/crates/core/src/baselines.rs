//! Comparison predictors: time-varying DMD on raw states and a single
//! network trained on one-step transitions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};
use crate::linalg::vstack;
use crate::net::{chain_layers, Activation, AdamState, ObservableNet};
use crate::pipeline::{DataBatch, TrainConfig};
use crate::regression::{fit_batch, recursive_update, RecursiveCache};

/// Linear model `x_{k+1} = A x_k + B u_k` refit from raw states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdmdModel {
    pub a_lin: DMatrix<f64>,
    /// n x m, zero columns for an autonomous system.
    pub b_lin: DMatrix<f64>,
    pub window: usize,
}

/// `[A, B] = X_bar [X; U]^+` on a single batch.
pub fn tvdmd_fit(batch: &DataBatch) -> Result<TvdmdModel> {
    let mats = fit_batch(&batch.x, &batch.x_bar, &batch.u, &batch.x)?;
    Ok(TvdmdModel {
        a_lin: mats.a,
        b_lin: mats.b,
        window: batch.beta(),
    })
}

pub fn tvdmd_predict(model: &TvdmdModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.a_lin.ncols() {
        return Err(DktvError::dims("state", model.a_lin.ncols(), x.len()));
    }
    if u.len() != model.b_lin.ncols() {
        return Err(DktvError::dims("input", model.b_lin.ncols(), u.len()));
    }
    let mut next = &model.a_lin * x;
    if !u.is_empty() {
        next += &model.b_lin * u;
    }
    Ok(next)
}

/// Runs TVDMD over a batch stream. With `accumulate` the least-squares
/// moments carry over between batches, otherwise each batch is fit alone.
#[derive(Clone, Debug)]
pub struct TvdmdLearner {
    pub accumulate: bool,
    cache: Option<RecursiveCache>,
    model: Option<TvdmdModel>,
}

impl TvdmdLearner {
    pub fn new(accumulate: bool) -> Self {
        Self {
            accumulate,
            cache: None,
            model: None,
        }
    }

    pub fn model(&self) -> Option<&TvdmdModel> {
        self.model.as_ref()
    }

    pub fn step(&mut self, batch: &DataBatch) -> Result<&TvdmdModel> {
        let model = match (&self.cache, self.accumulate) {
            (Some(cache), true) => {
                let (mats, next) = recursive_update(cache, &cache.solution(), &batch.x, &batch.x_bar, &batch.u, &batch.x)?;
                self.cache = Some(next);
                TvdmdModel {
                    a_lin: mats.a,
                    b_lin: mats.b,
                    window: batch.beta(),
                }
            }
            _ => {
                let model = tvdmd_fit(batch)?;
                if self.accumulate {
                    self.cache = Some(RecursiveCache::from_batch(&batch.x, &batch.x_bar, &batch.u, &batch.x)?.1);
                }
                model
            }
        };
        Ok(self.model.insert(model))
    }
}

/// One network `N(x, u)` predicting the next state directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleDnnModel {
    pub net: ObservableNet,
    pub n: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnnTrainResult {
    /// Mean squared one-step error at the start of every epoch, then the
    /// final value.
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

impl SingleDnnModel {
    /// Network `R^{n+m} -> R^n` with the given hidden layers and an output
    /// layer of width `n` using `output`.
    pub fn new(n: usize, m: usize, hidden: &[(usize, Activation)], output: Activation, seed: u64) -> Result<Self> {
        let mut widths = hidden.to_vec();
        widths.push((n, output));
        let net = ObservableNet::seeded(chain_layers(n + m, &widths), seed)?;
        Ok(Self { net, n, m })
    }

    pub fn from_net(net: ObservableNet, m: usize) -> Result<Self> {
        let n = net.output_dim();
        if net.input_dim() != n + m {
            return Err(DktvError::dims("predictor input", n + m, net.input_dim()));
        }
        Ok(Self { net, n, m })
    }

    fn inputs(&self, batch: &DataBatch) -> Result<DMatrix<f64>> {
        if batch.n() != self.n || batch.m() != self.m {
            return Err(DktvError::dims("batch state and input rows", self.n + self.m, batch.n() + batch.m()));
        }
        Ok(vstack(&batch.x, &batch.u))
    }

    /// `mean_s ||N(x_s, u_s) - x_{s+1}||^2` over the batch.
    pub fn loss(&self, batch: &DataBatch) -> Result<f64> {
        let out = self.net.forward_batch(&self.inputs(batch)?)?;
        Ok((out - &batch.x_bar).norm_squared() / batch.beta().max(1) as f64)
    }

    fn loss_and_grad(&self, input: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        let trace = self.net.forward_trace(input)?;
        let diff = trace.output() - target;
        let beta = target.ncols().max(1) as f64;
        let loss = diff.norm_squared() / beta;
        if !loss.is_finite() {
            return Err(DktvError::NonFinite("predictor loss".into()));
        }
        let grad = self.net.backward(&trace, &(diff * (2.0 / beta)));
        Ok((loss, grad))
    }
}

pub fn single_dnn_predict(model: &SingleDnnModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.n || u.len() != model.m {
        return Err(DktvError::dims("predictor input", model.n + model.m, x.len() + u.len()));
    }
    let mut input = DVector::zeros(model.n + model.m);
    input.rows_mut(0, model.n).copy_from(x);
    input.rows_mut(model.n, model.m).copy_from(u);
    model.net.forward(&input)
}

/// Adam on the batch's mean squared one-step error for `config.epochs`
/// epochs, using the same optimizer settings as the observable training.
/// On a non-finite loss the parameters are restored and `diverged` is set.
pub fn single_dnn_train(model: &mut SingleDnnModel, batch: &DataBatch, config: &TrainConfig) -> Result<DnnTrainResult> {
    config.validate()?;
    let input = model.inputs(batch)?;
    let start = model.net.params().to_vec();
    let mut adam = AdamState::new(model.net.param_count(), config.learning_rate, config.weight_decay);
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        match model.loss_and_grad(&input, &batch.x_bar) {
            Ok((loss, grad)) => {
                trace.push(loss);
                let mut theta = model.net.params().to_vec();
                adam.step(&mut theta, &grad);
                if theta.iter().any(|v| !v.is_finite()) {
                    return diverge(model, &start, trace);
                }
                model.net.set_params(&theta)?;
            }
            Err(DktvError::NonFinite(_)) => return diverge(model, &start, trace),
            Err(e) => return Err(e),
        }
    }
    let last = model.loss(batch)?;
    if !last.is_finite() {
        return diverge(model, &start, trace);
    }
    trace.push(last);
    Ok(DnnTrainResult {
        loss_trace: trace,
        diverged: false,
    })
}

fn diverge(model: &mut SingleDnnModel, start: &[f64], trace: Vec<f64>) -> Result<DnnTrainResult> {
    log::warn!("single-network training diverged after {} epochs", trace.len());
    model.net.set_params(start)?;
    Ok(DnnTrainResult {
        loss_trace: trace,
        diverged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pinv;
    use crate::pipeline::{partition_stream, step, BetaSchedule, DkrSnapshot};
    use crate::regression::KoopmanMatrices;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lti_stream(n: usize, m: usize, len: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(m, len, |_, _| rng.random_range(-1.0..1.0));
        let mut x = DMatrix::zeros(n, len + 1);
        x.set_column(0, &DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
        for k in 0..len {
            let next = &a * x.column(k) + &b * u.column(k);
            x.set_column(k + 1, &next);
        }
        (a, b, x, u)
    }

    fn single(x: &DMatrix<f64>, u: &DMatrix<f64>, beta: usize) -> DataBatch {
        DataBatch::new(0, 0, x.columns(0, beta).into(), x.columns(1, beta).into(), u.columns(0, beta).into()).unwrap()
    }

    #[test]
    fn tvdmd_recovers_lti() {
        let (a, b, x, u) = lti_stream(3, 2, 20, 1);
        let model = tvdmd_fit(&single(&x, &u, 12)).unwrap();
        assert!((model.a_lin - a).amax() < 1e-10);
        assert!((model.b_lin - b).amax() < 1e-10);
        assert_eq!(model.window, 12);
    }

    #[test]
    fn autonomous_fit_matches_pinv_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(2, 11, |_, _| rng.random_range(-1.0..1.0));
        let b = single(&x, &DMatrix::zeros(0, 10), 10);
        let model = tvdmd_fit(&b).unwrap();
        let oracle = &b.x_bar * pinv(&b.x);
        assert!((model.a_lin - oracle).amax() < 1e-12);
        assert_eq!(model.b_lin.shape(), (2, 0));
    }

    #[test]
    fn constant_trajectory_is_rank_deficient() {
        let x = DMatrix::from_element(2, 11, 0.4);
        let b = single(&x, &DMatrix::zeros(0, 10), 10);
        assert!(matches!(tvdmd_fit(&b), Err(DktvError::RankDeficient(_))));
    }

    #[test]
    fn zero_models_predict_zero() {
        let model = TvdmdModel {
            a_lin: DMatrix::zeros(2, 2),
            b_lin: DMatrix::zeros(2, 1),
            window: 5,
        };
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let u = DVector::from_vec(vec![3.0]);
        assert_eq!(tvdmd_predict(&model, &x, &u).unwrap(), DVector::zeros(2));
        let layers = chain_layers(3, &[(4, Activation::Gaussian), (2, Activation::Identity)]);
        let dnn = SingleDnnModel::from_net(ObservableNet::zeros(layers).unwrap(), 1).unwrap();
        assert_eq!(single_dnn_predict(&dnn, &x, &u).unwrap(), DVector::zeros(2));
        assert!(tvdmd_predict(&model, &u, &u).is_err());
    }

    #[test]
    fn matches_identity_lift_without_training() {
        let (_, _, x, u) = lti_stream(3, 1, 40, 8);
        let mut x_noisy = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        x_noisy.apply(|v| *v += rng.random_range(-0.05..0.05));
        let batches = partition_stream(&x_noisy, &u, &BetaSchedule::Constant(9)).unwrap();
        let config = TrainConfig {
            epochs: 0,
            accumulate: false,
            ..TrainConfig::default()
        };
        let first = tvdmd_fit(&batches[0]).unwrap();
        let mut snap = DkrSnapshot {
            net: ObservableNet::identity(3),
            matrices: KoopmanMatrices {
                a: first.a_lin.clone(),
                b: first.b_lin.clone(),
                c: DMatrix::identity(3, 3),
            },
            tau: 0,
            k_start: 0,
            beta: 9,
            train_stats: Vec::new(),
            diverged: false,
        };
        let mut cache = RecursiveCache::empty(3, 1, 3);
        let mut learner = TvdmdLearner::new(false);
        learner.step(&batches[0]).unwrap();
        for b in &batches[1..] {
            let model = learner.step(b).unwrap().clone();
            let (s, c) = step(&snap, &cache, b, &config).unwrap();
            assert_eq!(s.matrices.a, model.a_lin);
            assert_eq!(s.matrices.b, model.b_lin);
            assert!((&s.matrices.c - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
            snap = s;
            cache = c;
        }
    }

    #[test]
    fn accumulating_learner_matches_concatenated_fit() {
        let (_, _, x, u) = lti_stream(2, 1, 30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = x.map(|v| v + rng.random_range(-0.1..0.1));
        let batches = partition_stream(&x, &u, &BetaSchedule::Constant(8)).unwrap();
        let mut learner = TvdmdLearner::new(true);
        for b in &batches[..3] {
            learner.step(b).unwrap();
        }
        let cols = 24;
        let all = single(&x, &u, cols);
        let oracle = tvdmd_fit(&all).unwrap();
        let got = learner.model().unwrap();
        assert!((&got.a_lin - &oracle.a_lin).norm() / oracle.a_lin.norm() < 1e-8);
        assert!((&got.b_lin - &oracle.b_lin).norm() / oracle.b_lin.norm() < 1e-8);
    }

    #[test]
    fn dnn_memorizes_one_transition() {
        let x = DMatrix::from_column_slice(2, 2, &[0.3, -0.2, 0.5, 0.1]);
        let u = DMatrix::from_element(1, 1, 0.7);
        let b = single(&x, &u, 1);
        let mut model = SingleDnnModel::new(2, 1, &[(16, Activation::Gaussian)], Activation::Identity, 3).unwrap();
        let config = TrainConfig {
            epochs: 3000,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let res = single_dnn_train(&mut model, &b, &config).unwrap();
        assert!(!res.diverged);
        let pred = single_dnn_predict(&model, &x.column(0).into_owned(), &DVector::from_vec(vec![0.7])).unwrap();
        assert!((pred - x.column(1)).norm() < 1e-3);
    }

    #[test]
    fn dnn_training_basics() {
        let (_, _, x, u) = lti_stream(2, 1, 30, 6);
        let b = single(&x, &u, 30);
        let mut model = SingleDnnModel::new(2, 1, &[(8, Activation::Relu)], Activation::Identity, 1).unwrap();
        let before = model.clone();
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let res = single_dnn_train(&mut model, &b, &zero).unwrap();
        assert_eq!(model, before);
        assert_eq!(res.loss_trace.len(), 1);
        let config = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let mut m1 = before.clone();
        let mut m2 = before.clone();
        let r1 = single_dnn_train(&mut m1, &b, &config).unwrap();
        let r2 = single_dnn_train(&mut m2, &b, &config).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.loss_trace.last() < r1.loss_trace.first());
    }

    #[test]
    fn dnn_fits_linear_data() {
        let (_, _, x, u) = lti_stream(2, 1, 40, 12);
        let b = single(&x, &u, 40);
        // a purely linear network can represent the map exactly
        let mut model = SingleDnnModel::new(2, 1, &[], Activation::Identity, 2).unwrap();
        let config = TrainConfig {
            epochs: 4000,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let res = single_dnn_train(&mut model, &b, &config).unwrap();
        assert!(*res.loss_trace.last().unwrap() < 1e-6, "{:?}", res.loss_trace.last());
    }
}
