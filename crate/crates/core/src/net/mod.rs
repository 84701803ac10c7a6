//! Feedforward observable network `g(., theta): R^n -> R^r`.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (output x input, column-major) followed by its bias vector.

mod adam;
mod lipschitz;
mod objective;

pub use adam::AdamState;
pub use lipschitz::{estimate_lipschitz, lipschitz_exhaustive, lipschitz_pairs_from_states};
pub use objective::{loss_gradient, loss_value, LossBreakdown, ObjectiveWeights, PriorMoments};

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DktvError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `exp(-z^2)` applied elementwise to the affine pre-activation.
    Gaussian,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gaussian => (-z * z).exp(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation. ReLU uses 0 at 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gaussian => -2.0 * z * (-z * z).exp(),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.output_dim * self.input_dim + self.output_dim
    }
}

/// Builds a layer chain from an input dimension and `(width, activation)`
/// pairs.
pub fn chain_layers(input_dim: usize, widths: &[(usize, Activation)]) -> Vec<LayerSpec> {
    let mut prev = input_dim;
    widths
        .iter()
        .map(|&(w, act)| {
            let spec = LayerSpec::new(prev, w, act);
            prev = w;
            spec
        })
        .collect()
}

/// Flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetParams(pub Vec<f64>);

impl std::ops::Deref for NetParams {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for NetParams {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Layer stack of an observable. With `passthrough` the input is stacked
/// on top of the network output, `g(x) = [x; h(x)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetArch {
    pub layers: Vec<LayerSpec>,
    pub passthrough: bool,
}

impl NetArch {
    pub fn lifted_dim(&self) -> usize {
        let h = self.layers.last().map_or(0, |l| l.output_dim);
        if self.passthrough {
            h + self.layers.first().map_or(0, |l| l.input_dim)
        } else {
            h
        }
    }
}

impl From<Vec<LayerSpec>> for NetArch {
    fn from(layers: Vec<LayerSpec>) -> Self {
        Self {
            layers,
            passthrough: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableNet {
    layers: Vec<LayerSpec>,
    theta: NetParams,
    #[serde(default)]
    passthrough: bool,
}

/// Intermediate values kept by [`ObservableNet::forward_trace`] for
/// backpropagation.
pub struct ForwardTrace {
    /// activations[0] is the input, activations[l + 1] the output of layer l.
    activations: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
    /// Input stacked on the last activation, for passthrough networks.
    stacked: Option<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.stacked
            .as_ref()
            .unwrap_or_else(|| self.activations.last().expect("trace has at least the input"))
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
    out
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(DktvError::InvalidConfig("network needs at least one layer".into()));
    }
    for (i, w) in layers.windows(2).enumerate() {
        if w[0].output_dim != w[1].input_dim {
            return Err(DktvError::dims(
                format!("input of layer {}", i + 1),
                w[0].output_dim,
                w[1].input_dim,
            ));
        }
    }
    if layers.iter().any(|l| l.input_dim == 0 || l.output_dim == 0) {
        return Err(DktvError::InvalidConfig("layer dimensions must be positive".into()));
    }
    Ok(())
}

impl ObservableNet {
    pub fn new(layers: Vec<LayerSpec>, theta: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let q: usize = layers.iter().map(LayerSpec::param_count).sum();
        if theta.len() != q {
            return Err(DktvError::dims("parameter vector", q, theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(DktvError::NonFinite("network parameters".into()));
        }
        Ok(Self {
            layers,
            theta: NetParams(theta),
            passthrough: false,
        })
    }

    /// Random network for `arch`, see [`ObservableNet::random`].
    pub fn random_arch<R: Rng + ?Sized>(arch: &NetArch, rng: &mut R) -> Result<Self> {
        Ok(Self::random(arch.layers.clone(), rng)?.with_passthrough(arch.passthrough))
    }

    pub fn with_passthrough(mut self, on: bool) -> Self {
        self.passthrough = on;
        self
    }

    pub fn passthrough(&self) -> bool {
        self.passthrough
    }

    pub fn arch(&self) -> NetArch {
        NetArch {
            layers: self.layers.clone(),
            passthrough: self.passthrough,
        }
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases of each layer.
    pub fn random<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        validate_layers(&layers)?;
        let mut theta = Vec::new();
        for l in &layers {
            let bound = 1.0 / (l.input_dim as f64).sqrt();
            for _ in 0..l.param_count() {
                theta.push(rng.random_range(-bound..bound));
            }
        }
        Self::new(layers, theta)
    }

    /// Redraws the incoming weights and bias of output unit `i` from the
    /// same distribution as [`ObservableNet::random`]. Passed-through input
    /// rows are left alone.
    pub fn redraw_output_unit<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        let i = if self.passthrough {
            match i.checked_sub(self.input_dim()) {
                Some(j) => j,
                None => return,
            }
        } else {
            i
        };
        let Some((off, l)) = self.offsets().last() else {
            return;
        };
        let (rows, cols) = (l.output_dim, l.input_dim);
        if i >= rows {
            return;
        }
        let bound = 1.0 / (cols as f64).sqrt();
        for j in 0..cols {
            self.theta[off + j * rows + i] = rng.random_range(-bound..bound);
        }
        self.theta[off + rows * cols + i] = rng.random_range(-bound..bound);
    }

    pub fn seeded(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random(layers, &mut rng)
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let q = layers.iter().map(LayerSpec::param_count).sum();
        Self::new(layers, vec![0.0; q])
    }

    /// Single identity layer `g(x) = x`.
    pub fn identity(n: usize) -> Self {
        let layer = LayerSpec::new(n, n, Activation::Identity);
        let mut theta = vec![0.0; layer.param_count()];
        for i in 0..n {
            theta[i * n + i] = 1.0;
        }
        Self::new(vec![layer], theta).expect("identity layer is valid")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &NetParams {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut NetParams {
        &mut self.theta
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(DktvError::dims("parameter vector", self.theta.len(), theta.len()));
        }
        self.theta.0.copy_from_slice(theta);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        let h = self.layers.last().map(|l| l.output_dim).unwrap_or(0);
        if self.passthrough {
            h + self.input_dim()
        } else {
            h
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Width of the last hidden layer, or the input width for a single layer.
    pub fn last_hidden_width(&self) -> usize {
        self.layers.last().map(|l| l.input_dim).unwrap_or(0)
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().scan(0usize, |off, l| {
            let start = *off;
            *off += l.param_count();
            Some((start, l))
        })
    }

    fn layer_weights(&self, offset: usize, l: &LayerSpec) -> (DMatrixView<'_, f64>, DVectorView<'_, f64>) {
        let nw = l.output_dim * l.input_dim;
        let w = DMatrixView::from_slice(&self.theta[offset..offset + nw], l.output_dim, l.input_dim);
        let b = DVectorView::from_slice(&self.theta[offset + nw..offset + nw + l.output_dim], l.output_dim);
        (w, b)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(DktvError::dims("network input", self.input_dim(), x.len()));
        }
        let mut a = x.clone();
        for (off, l) in self.offsets() {
            let (w, b) = self.layer_weights(off, l);
            let mut z = w * &a + b;
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        if self.passthrough {
            return Ok(DVector::from_iterator(x.len() + a.len(), x.iter().chain(a.iter()).copied()));
        }
        Ok(a)
    }

    /// Lifts every column of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(DktvError::dims("network input rows", self.input_dim(), x.nrows()));
        }
        let mut a = x.clone();
        for (off, l) in self.offsets() {
            let (w, b) = self.layer_weights(off, l);
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += &b;
            }
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        if self.passthrough {
            return Ok(stack_rows(x, a));
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        if x.nrows() != self.input_dim() {
            return Err(DktvError::dims("network input rows", self.input_dim(), x.nrows()));
        }
        let mut activations = vec![x.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (off, l) in self.offsets() {
            let (w, b) = self.layer_weights(off, l);
            let mut z = w * activations.last().expect("non-empty");
            for mut col in z.column_iter_mut() {
                col += &b;
            }
            let a = z.map(|v| l.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        let stacked = self
            .passthrough
            .then(|| stack_rows(x, activations.last().expect("non-empty").clone()));
        Ok(ForwardTrace {
            activations,
            pre_activations,
            stacked,
        })
    }

    /// Gradient of a scalar with respect to theta, given the scalar's
    /// gradient with respect to every output column in `d_out`.
    pub fn backward(&self, trace: &ForwardTrace, d_out: &DMatrix<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        let offsets: Vec<(usize, LayerSpec)> = self.offsets().map(|(o, l)| (o, *l)).collect();
        let skip = if self.passthrough { self.input_dim() } else { 0 };
        let mut delta = d_out.rows(skip, d_out.nrows() - skip).into_owned();
        for (idx, (off, l)) in offsets.iter().enumerate().rev() {
            let z = &trace.pre_activations[idx];
            delta.zip_apply(z, |d, zv| *d *= l.activation.derivative(zv));
            let a_prev = &trace.activations[idx];
            let nw = l.output_dim * l.input_dim;
            let gw = &delta * a_prev.transpose();
            grad[*off..*off + nw].copy_from_slice(gw.as_slice());
            for (i, g) in grad[*off + nw..*off + nw + l.output_dim].iter_mut().enumerate() {
                *g = delta.row(i).sum();
            }
            if idx > 0 {
                let (w, _) = self.layer_weights(*off, l);
                delta = w.transpose() * &delta;
            }
        }
        grad
    }
}
