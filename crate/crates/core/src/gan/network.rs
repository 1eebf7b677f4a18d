//! Dense feed-forward networks with optional batch normalization and
//! hand-written backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GanError;

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.99;
/// Variance floor inside the batch-norm square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Sigmoid outputs are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Linear,
}

/// `x` for `x >= 0`, `alpha * x` otherwise.
pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { alpha } => leaky_relu(x, alpha),
            Activation::Sigmoid => sigmoid(x).clamp(PROB_EPSILON, 1.0 - PROB_EPSILON),
            Activation::Linear => x,
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                if !(PROB_EPSILON..=1.0 - PROB_EPSILON).contains(&s) {
                    0.0
                } else {
                    s * (1.0 - s)
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Running statistics in batch-norm layers.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in_dim x out_dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm>,
}

impl Dense {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            in_dim: self.weights.nrows(),
            out_dim: self.weights.ncols(),
            activation: self.activation,
            batch_norm: self.batch_norm.is_some(),
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len()
            + self.bias.len()
            + self
                .batch_norm
                .as_ref()
                .map_or(0, |bn| bn.gain.len() + bn.shift.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Per-layer intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerTrace {
    input: Array2<f64>,
    /// Activation input (after batch norm when present).
    pre_activation: Array2<f64>,
    norm: Option<NormTrace>,
}

#[derive(Debug, Clone)]
struct NormTrace {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

/// Record of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gain: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    /// Elementwise sum with `other`, which must come from the same network.
    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
            if let (Some(x), Some(y)) = (&mut a.gain, &b.gain) {
                *x += y;
            }
            if let (Some(x), Some(y)) = (&mut a.shift, &b.shift) {
                *x += y;
            }
        }
    }

    /// Gradient tensors in the order of [`Network::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.bias.as_slice().expect("standard layout"));
            if let (Some(gain), Some(shift)) = (&g.gain, &g.shift) {
                out.push(gain.as_slice().expect("standard layout"));
                out.push(shift.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

impl Network {
    /// Builds a network with weights drawn i.i.d. from `N(0, init_std^2)` and
    /// zero biases.
    pub fn new<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let weights = Array2::from_shape_simple_fn((s.in_dim, s.out_dim), || {
                    init_std * rng.sample::<f64, _>(StandardNormal)
                });
                Dense {
                    weights,
                    bias: Array1::zeros(s.out_dim),
                    activation: s.activation,
                    batch_norm: s.batch_norm.then(|| BatchNorm::new(s.out_dim)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Dense::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.nrows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.ncols())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm.is_some())
    }

    fn check_input(&self, x: &Array2<f64>, mode: Mode) -> Result<(), GanError> {
        if x.ncols() != self.in_dim() {
            return Err(GanError::DimensionMismatch {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(GanError::EmptyBatch);
        }
        if mode == Mode::Train && self.has_batch_norm() && x.nrows() < 2 {
            return Err(GanError::BatchTooSmall(x.nrows()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>, GanError> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(out, _)| out),
            Mode::Inference => {
                self.check_input(x, mode)?;
                let mut h = x.clone();
                for layer in &self.layers {
                    let mut z = h.dot(&layer.weights) + &layer.bias;
                    if let Some(bn) = &layer.batch_norm {
                        let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                        z = (z - &bn.running_mean) * &inv_std * &bn.gain + &bn.shift;
                    }
                    let act = layer.activation;
                    z.mapv_inplace(|v| act.apply(v));
                    h = z;
                }
                Ok(h)
            }
        }
    }

    /// Training-mode forward pass that keeps what [`Network::backward`] needs.
    /// Running statistics are left untouched; see
    /// [`Network::update_running_stats`].
    pub fn forward_train(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Trace), GanError> {
        self.check_input(x, Mode::Train)?;
        let n = x.nrows() as f64;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = h.dot(&layer.weights) + &layer.bias;
            let (pre, norm) = match &layer.batch_norm {
                None => (z, None),
                Some(bn) => {
                    let mean = z.sum_axis(Axis(0)) / n;
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                    let normalized = centered * &inv_std;
                    let pre = &normalized * &bn.gain + &bn.shift;
                    (
                        pre,
                        Some(NormTrace {
                            normalized,
                            inv_std,
                            batch_mean: mean,
                            batch_var: var,
                        }),
                    )
                }
            };
            let act = layer.activation;
            let out = pre.mapv(|v| act.apply(v));
            traces.push(LayerTrace {
                input: h,
                pre_activation: pre,
                norm,
            });
            h = out;
        }
        Ok((h, Trace { layers: traces }))
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates: `running = m * running + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (layer, t) in self.layers.iter_mut().zip(&trace.layers) {
            if let (Some(bn), Some(norm)) = (&mut layer.batch_norm, &t.norm) {
                bn.running_mean = &bn.running_mean * BN_MOMENTUM + &norm.batch_mean * (1.0 - BN_MOMENTUM);
                bn.running_var = &bn.running_var * BN_MOMENTUM + &norm.batch_var * (1.0 - BN_MOMENTUM);
            }
        }
    }

    /// Backpropagates `grad_out` (d loss / d output) through the pass recorded
    /// in `trace`. Returns parameter gradients and d loss / d input.
    pub fn backward(&self, trace: &Trace, grad_out: &Array2<f64>) -> (NetworkGrads, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.clone();
        for (layer, t) in self.layers.iter().zip(&trace.layers).rev() {
            let act = layer.activation;
            let mut d_pre = upstream;
            ndarray::Zip::from(&mut d_pre)
                .and(&t.pre_activation)
                .for_each(|g, &p| *g *= act.derivative(p));

            let (d_z, gain, shift) = match (&layer.batch_norm, &t.norm) {
                (Some(bn), Some(norm)) => {
                    let n = d_pre.nrows() as f64;
                    let d_gain = (&d_pre * &norm.normalized).sum_axis(Axis(0));
                    let d_shift = d_pre.sum_axis(Axis(0));
                    let d_hat = &d_pre * &bn.gain;
                    let sum_d_hat = d_hat.sum_axis(Axis(0));
                    let sum_d_hat_x = (&d_hat * &norm.normalized).sum_axis(Axis(0));
                    let d_z = (d_hat * n - &sum_d_hat - &norm.normalized * &sum_d_hat_x)
                        * &(&norm.inv_std / n);
                    (d_z, Some(d_gain), Some(d_shift))
                }
                _ => (d_pre, None, None),
            };

            grads.push(LayerGrads {
                weights: t.input.t().dot(&d_z).as_standard_layout().into_owned(),
                bias: d_z.sum_axis(Axis(0)),
                gain,
                shift,
            });
            upstream = d_z.dot(&layer.weights.t());
        }
        grads.reverse();
        (NetworkGrads { layers: grads }, upstream)
    }

    /// Mutable parameter tensors: per layer weights, bias, then batch-norm
    /// gain and shift when present.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut layer.batch_norm {
                out.push(bn.gain.as_slice_mut().expect("standard layout"));
                out.push(bn.shift.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().chain(&l.bias).all(|v| v.is_finite())
                && l.batch_norm.as_ref().is_none_or(|bn| {
                    bn.gain
                        .iter()
                        .chain(&bn.shift)
                        .chain(&bn.running_mean)
                        .chain(&bn.running_var)
                        .all(|v| v.is_finite())
                })
        })
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<(), GanError> {
    if specs.is_empty() {
        return Err(GanError::InvalidArchitecture("no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(GanError::InvalidArchitecture(format!("layer {i} has a zero dimension")));
        }
        if let Activation::LeakyRelu { alpha } = s.activation {
            if !alpha.is_finite() {
                return Err(GanError::InvalidArchitecture(format!("layer {i}: bad alpha")));
            }
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(GanError::InvalidArchitecture(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    if specs.last().is_some_and(|s| s.batch_norm) {
        return Err(GanError::InvalidArchitecture(
            "batch norm on the output layer".into(),
        ));
    }
    Ok(())
}
