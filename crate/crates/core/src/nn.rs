//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Inputs are batched row-wise: a batch of `n` vectors of width `d` is an
//! `n x d` matrix. Backward passes return gradients of `sum(output * upstream)`
//! with respect to every parameter and to the input, the latter being what
//! the critic guidance needs.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what}: expected width {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("network shapes differ")]
    ShapeMismatch,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Mish,
    Relu,
}

/// `tanh(softplus(x))` and `sigmoid(x)` from one exponential:
/// with `n = e^x (e^x + 2)`, `tanh(ln(1 + e^x)) = n / (n + 2)`.
fn mish_parts(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => x * mish_parts(x).0,
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                let (t, s) = mish_parts(x);
                t + x * (1.0 - t * t) * s
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine layer `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    /// Hidden-layer activation; the output layer is linear.
    pub activation: Activation,
}

/// Intermediate values recorded by [`DenseNet::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

/// Parameter-shaped accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|x| x * factor);
            b.mapv_inplace(|x| x * factor);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|x| *x == 0.0))
    }
}

impl DenseNet {
    /// Layer widths `sizes = [input, hidden.., output]`, weights and biases
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..=bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..=bound)),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.ncols()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Dimension {
                what: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Single-vector convenience around [`DenseNet::forward`].
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape), NnError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            if i < last {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, Tape { inputs, pre_activations }))
    }

    fn check_upstream(&self, tape: &Tape, upstream: &ArrayView2<f64>) -> Result<(), NnError> {
        if upstream.ncols() != self.output_dim() || upstream.nrows() != tape.inputs[0].nrows() {
            return Err(NnError::Dimension {
                what: "upstream gradient",
                expected: self.output_dim(),
                found: upstream.ncols(),
            });
        }
        Ok(())
    }

    /// Parameter and input gradients of `sum(output * upstream)`.
    pub fn backward_tape(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        self.check_upstream(tape, &upstream)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let dw = tape.inputs[i].t().dot(&g);
            let db = g.sum_axis(Axis(0));
            grads.push((dw, db));
            g = g.dot(&layer.weight.t());
            if i > 0 {
                self.apply_activation_grad(&mut g, &tape.pre_activations[i - 1]);
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn input_gradient_tape(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_upstream(tape, &upstream)?;
        let mut g = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            g = g.dot(&self.layers[i].weight.t());
            if i > 0 {
                self.apply_activation_grad(&mut g, &tape.pre_activations[i - 1]);
            }
        }
        Ok(g)
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        let (_, tape) = self.forward_tape(x)?;
        self.backward_tape(&tape, upstream)
    }

    fn apply_activation_grad(&self, g: &mut Array2<f64>, pre: &Array2<f64>) {
        let act = self.activation;
        Zip::from(g).and(pre).for_each(|g, &z| *g *= act.derivative(z));
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// `self <- rho * self + (1 - rho) * online`; `rho` is the retained fraction.
    pub fn soft_update(&mut self, online: &DenseNet, rho: f64) -> Result<(), NnError> {
        if !self.same_shape(online) {
            return Err(NnError::ShapeMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight)
                .and(&o.weight)
                .for_each(|t, &o| *t = rho * *t + (1.0 - rho) * o);
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|t, &o| *t = rho * *t + (1.0 - rho) * o);
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "parameter count");
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &DenseNet) -> Self {
        Self::with_constants(net, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(net: &DenseNet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn update(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let moments = self.first.layers.iter_mut().zip(self.second.layers.iter_mut());
        for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in net.layers.iter_mut().zip(&grads.layers).zip(moments) {
            let step = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            Zip::from(&mut layer.weight).and(gw).and(mw).and(vw).for_each(step);
            Zip::from(&mut layer.bias).and(gb).and(mb).and(vb).for_each(step);
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "oran-diffql-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

/// Writes `payload` as versioned JSON. Floats use shortest round-trip
/// formatting, so a reload is bit-exact.
pub fn save_checkpoint<T: Serialize>(path: &Path, payload: &T) -> Result<(), NnError> {
    let env = Envelope {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        payload,
    };
    let text = serde_json::to_string(&env).map_err(|e| NnError::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T, NnError> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(NnError::Format(format!("unexpected format tag `{}`", env.format)));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            env.version
        )));
    }
    Ok(env.payload)
}
