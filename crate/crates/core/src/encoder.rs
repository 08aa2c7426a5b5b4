//! Small feed-forward encoders with hand-written backpropagation, plus SGD
//! and Adam updates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            // zero subgradient at the kink
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths (input first) and one activation per hidden layer.
/// The output layer is always affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl EncoderSpec {
    /// A single affine layer `in_dim -> out_dim`.
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        EncoderSpec { layer_sizes: vec![in_dim, out_dim], activations: vec![] }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        let hidden = layer_sizes.len().saturating_sub(2);
        EncoderSpec { layer_sizes, activations: vec![activation; hidden] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("encoder needs at least input and output sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("encoder layer sizes must be positive".into()));
        }
        if self.activations.len() != self.layer_sizes.len() - 2 {
            return Err(Error::Config(format!(
                "{} hidden layers but {} activations",
                self.layer_sizes.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Trainable parameters of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activations: Vec<Activation>,
}

/// `∂L/∂θ`, laid out like [`EncoderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

pub fn init_params(spec: &EncoderSpec, rng: &mut SeededRng) -> Result<EncoderParams> {
    spec.validate()?;
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
            Layer { weight: Matrix::from_vec(fan_out, fan_in, data).unwrap(), bias: vec![0.0; fan_out] }
        })
        .collect();
    Ok(EncoderParams { layers, activations: spec.activations.clone() })
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn spec(&self) -> EncoderSpec {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        EncoderSpec { layer_sizes: sizes, activations: self.activations.clone() }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        self.activations.get(layer).copied().unwrap_or(Activation::None)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.mul_vec(&h)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            inputs.push(std::mem::take(&mut h));
            h = if k == last { z.clone() } else { z.iter().map(|&v| self.activation(k).apply(v)).collect() };
            pre.push(z);
        }
        Ok((h, ActivationTrace { inputs, pre }))
    }

    /// Output only, without keeping a trace.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Encodes every row of `xs`.
    pub fn embed_batch(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(xs.rows(), self.output_dim());
        for i in 0..xs.rows() {
            out.row_mut(i).copy_from_slice(&self.embed(xs.row(i))?);
        }
        Ok(out)
    }

    pub fn forward_batch(&self, xs: &Matrix) -> Result<(Matrix, Vec<ActivationTrace>)> {
        let mut out = Matrix::zeros(xs.rows(), self.output_dim());
        let mut traces = Vec::with_capacity(xs.rows());
        for i in 0..xs.rows() {
            let (y, t) = self.forward(xs.row(i))?;
            out.row_mut(i).copy_from_slice(&y);
            traces.push(t);
        }
        Ok((out, traces))
    }

    pub fn backward(&self, trace: &ActivationTrace, grad_out: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_into(trace, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates the gradient for one sample into `grads`.
    pub fn backward_into(&self, trace: &ActivationTrace, grad_out: &[f64], grads: &mut GradientSet) -> Result<()> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "trace has {} layers, encoder has {}",
                trace.pre.len(),
                self.layers.len()
            )));
        }
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: grad_out.len() });
        }
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if trace.pre[k].len() != layer.weight.rows() || trace.inputs[k].len() != layer.weight.cols() {
                return Err(Error::ShapeMismatch(format!("trace layer {k} does not match parameters")));
            }
            if k != last {
                let act = self.activation(k);
                for (gi, &z) in g.iter_mut().zip(&trace.pre[k]) {
                    *gi *= act.derivative(z);
                }
            }
            let gl = &mut grads.layers[k];
            let x = &trace.inputs[k];
            for (r, &gr) in g.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                gl.bias[r] += gr;
                for (w, &xc) in gl.weight.row_mut(r).iter_mut().zip(x) {
                    *w += gr * xc;
                }
            }
            if k > 0 {
                g = layer.weight.tr_mul_vec(&g)?;
            }
        }
        Ok(())
    }

    /// Sums per-row gradients `grad_rows[i]` through the matching traces.
    pub fn backward_batch(&self, traces: &[ActivationTrace], grad_rows: &Matrix) -> Result<GradientSet> {
        if traces.len() != grad_rows.rows() {
            return Err(Error::ShapeMismatch(format!("{} traces for {} gradient rows", traces.len(), grad_rows.rows())));
        }
        let mut grads = GradientSet::zeros_like(self);
        for (t, i) in traces.iter().zip(0..) {
            self.backward_into(t, grad_rows.row(i), &mut grads)?;
        }
        Ok(grads)
    }

    /// Parameters flattened layer by layer: weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, grads: &GradientSet) -> bool {
        self.layers.len() == grads.layers.len()
            && self
                .layers
                .iter()
                .zip(&grads.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&Checkpoint::from(self))?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.into_params()
    }
}

impl GradientSet {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Plain gradient descent: `θ ← θ − lr·∇θ`.
pub fn sgd_step(params: &EncoderParams, grads: &GradientSet, lr: f64) -> Result<EncoderParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    let mut next = params.clone();
    for (l, g) in next.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
            *w -= lr * gw;
        }
        for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates; empty before the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &EncoderParams,
    grads: &GradientSet,
    state: AdamState,
    cfg: AdamConfig,
) -> Result<(EncoderParams, AdamState)> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
    }
    let g = grads.to_flat();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    let n = g.len();
    let mut st = state;
    if st.m.is_empty() && st.v.is_empty() {
        st.m = vec![0.0; n];
        st.v = vec![0.0; n];
    } else if st.m.len() != n || st.v.len() != n {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut theta = params.to_flat();
    for k in 0..n {
        st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g[k];
        st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        let m_hat = st.m[k] / bc1;
        let v_hat = st.v[k] / bc2;
        theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    let mut next = params.clone();
    next.set_flat(&theta)?;
    Ok((next, st))
}

const CHECKPOINT_FORMAT: &str = "porank-encoder/1";

/// On-disk encoder layout: per layer its `[rows, cols]` shape, the row-major
/// weight values and the bias.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    activations: Vec<Activation>,
    layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    shape: [usize; 2],
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&EncoderParams> for Checkpoint {
    fn from(p: &EncoderParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            activations: p.activations.clone(),
            layers: p
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    shape: [l.weight.rows(), l.weight.cols()],
                    weight: l.weight.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<EncoderParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Json(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.layers.is_empty() || self.activations.len() + 1 != self.layers.len() {
            return Err(Error::ShapeMismatch("checkpoint layer/activation count".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev: Option<usize> = None;
        for l in self.layers {
            let [rows, cols] = l.shape;
            if prev.is_some_and(|p| p != cols) || l.bias.len() != rows {
                return Err(Error::ShapeMismatch("checkpoint layers are not chained".into()));
            }
            prev = Some(rows);
            layers.push(Layer { weight: Matrix::from_vec(rows, cols, l.weight)?, bias: l.bias });
        }
        let params = EncoderParams { layers, activations: self.activations };
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint"));
        }
        Ok(params)
    }
}
