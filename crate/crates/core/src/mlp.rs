//! Fully connected feed-forward networks with hand-written reverse-mode
//! gradients, plus the two optimizers used to train them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// One affine layer: `y = W x + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Network parameters. Hidden layers use `activation`; the last layer is
/// always linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-layer activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace always holds the input")
    }
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::invalid(format!("layer {i}: bias length mismatch")));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::numeric(format!("layer {i}: non-finite parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::invalid(format!(
                    "layer {} emits {} values but layer {} takes {}",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// All-zero parameters for the given layer sizes.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("layer sizes need an input and an output"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation)?;
        for layer in &mut p.layers {
            let limit = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    fn layer_activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = affine(layer, &cur, self.layer_activation(i));
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = affine(layer, values.last().unwrap(), self.layer_activation(i));
            values.push(next);
        }
        Ok(Trace { values })
    }

    /// Back-propagates `d_output` (the loss adjoint at the network output)
    /// through a recorded pass, accumulating parameter gradients into `grad`
    /// and returning the adjoint at the input.
    pub fn backward_into(&self, trace: &Trace, d_output: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        debug_assert_eq!(d_output.len(), self.output_dim());
        let mut delta = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let out = &trace.values[i + 1];
            let act = self.layer_activation(i);
            if act != Activation::Identity {
                for (d, &y) in delta.iter_mut().zip(out) {
                    *d *= act.slope_from_output(y);
                }
            }
            let input = &trace.values[i];
            let gw = &mut grad.weights[i];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &xv) in gw.row_mut(r).iter_mut().zip(input) {
                    *g += d * xv;
                }
            }
            for (g, &d) in grad.biases[i].iter_mut().zip(&delta) {
                *g += d;
            }
            let mut prev = vec![0.0; layer.inputs()];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(layer.weights.row(r)) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        delta
    }

    pub fn backward(&self, trace: &Trace, d_output: &[f64]) -> (MlpGrad, Vec<f64>) {
        let mut grad = MlpGrad::zeros_like(self);
        let d_in = self.backward_into(trace, d_output, &mut grad);
        (grad, d_in)
    }

    /// Gradient of `½‖forward(x) − target‖²`; returns the loss alongside.
    pub fn squared_error_grad(&self, x: &[f64], target: &[f64]) -> Result<(f64, MlpGrad)> {
        if target.len() != self.output_dim() {
            return Err(Error::invalid(format!(
                "target has length {}, network emits {}",
                target.len(),
                self.output_dim()
            )));
        }
        let trace = self.forward_trace(x)?;
        let residual: Vec<f64> = trace
            .output()
            .iter()
            .zip(target)
            .map(|(y, t)| y - t)
            .collect();
        let loss = 0.5 * dot(&residual, &residual);
        let (grad, _) = self.backward(&trace, &residual);
        Ok((loss, grad))
    }

    /// `self − lr · g`.
    pub fn sgd_step(&self, g: &MlpGrad, lr: f64) -> Result<MlpParams> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        g.check_shape(self)?;
        if !g.is_finite() {
            return Err(Error::numeric("non-finite gradient entries"));
        }
        let mut next = self.clone();
        for (p, gs) in next.param_slices_mut().into_iter().zip(g.slices()) {
            for (v, d) in p.iter_mut().zip(gs) {
                *v -= lr * d;
            }
        }
        Ok(next)
    }

    /// Mutable views of every parameter block: per layer, weights then bias.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {}, network takes {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

#[inline]
fn affine(layer: &Layer, x: &[f64], act: Activation) -> Vec<f64> {
    (0..layer.outputs())
        .map(|r| act.apply(dot(layer.weights.row(r), x) + layer.bias[r]))
        .collect()
}

pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    p.forward(x)
}

pub fn mlp_grad(p: &MlpParams, x: &[f64], target: &[f64]) -> Result<MlpGrad> {
    p.squared_error_grad(x, target).map(|(_, g)| g)
}

pub fn sgd_step(p: &MlpParams, g: &MlpGrad, lr: f64) -> Result<MlpParams> {
    p.sgd_step(g, lr)
}

/// Gradients with the same shape as an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.outputs(), l.inputs()))
                .collect(),
            biases: p.layers.iter().map(|l| vec![0.0; l.outputs()]).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            for x in a {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_shape(&self, p: &MlpParams) -> Result<()> {
        let ok = self.weights.len() == p.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&p.layers)
                .all(|((w, b), l)| w.shape() == l.weights.shape() && b.len() == l.bias.len());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("gradient shape does not match network"))
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: MlpGrad,
    v: MlpGrad,
}

impl Adam {
    pub fn new(p: &MlpParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: MlpGrad::zeros_like(p),
            v: MlpGrad::zeros_like(p),
        }
    }

    pub fn step(&mut self, p: &mut MlpParams, g: &MlpGrad) -> Result<()> {
        g.check_shape(p)?;
        if !g.is_finite() {
            return Err(Error::numeric("non-finite gradient entries"));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let eps = self.eps;
        let params = p.param_slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in params.into_iter().zip(g.slices()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
