//! Dense multilayer perceptrons with hand-written backpropagation and Adam.
//!
//! Every policy, encoder and critic in the crate is an [`Mlp`]: a stack of
//! affine layers with a shared hidden activation and a linear output. Weights
//! are stored row-major as `out x in` matrices.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_dim, Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(config_err("an MLP needs at least an input and an output width"));
        }
        if self.layer_widths.contains(&0) {
            return Err(config_err("MLP layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer (or a gradient / moment buffer with the same shape).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out x fan_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.fan_in == other.fan_in && self.fan_out == other.fan_out
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Gradients (or any other buffer) shaped like an [`Mlp`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_widths
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn fill_zero(&mut self) {
        self.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output_pre_activation(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest absolute pre-activation over the hidden layers; infinite for
    /// a single-layer network.
    pub fn min_hidden_pre_activation(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for a flat parameter vector. Used directly for small parameter
/// groups (the Gaussian log-std) and, per layer, inside [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Applies one bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    lr: f64,
    t: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Parameters of a dense network together with their Adam moments.
///
/// Serialises as `{spec, layers: [{weight: {shape, data}, bias: {shape, data}}],
/// adam: {m, v, step_count}}` with `m` and `v` shaped like `layers`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
    adam_m: Vec<Dense>,
    adam_v: Vec<Dense>,
    step_count: u64,
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.layers == other.layers
            && self.adam_m == other.adam_m
            && self.adam_v == other.adam_v
            && self.step_count == other.step_count
    }
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = MlpGrads::zeros_like(&spec).layers;
        Ok(Self {
            adam_m: layers.clone(),
            adam_v: layers.clone(),
            layers,
            spec,
            step_count: 0,
            generation: next_generation(),
        })
    }

    /// Scaled-uniform initialisation: hidden layers use `U(-a, a)` with
    /// `a = sqrt(3 / fan_in)` (unit gain); the output layer is scaled by
    /// `output_gain`. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let gain = if i + 1 == n { output_gain } else { 1.0 };
            let a = gain * (3.0 / layer.fan_in as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-a..=a);
            }
        }
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Dense::values).copied().collect()
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            let n = l.weight.len();
            if idx < n {
                return l.weight[idx];
            }
            idx -= n;
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        self.generation = next_generation();
        for l in &mut self.layers {
            let n = l.weight.len();
            if idx < n {
                l.weight[idx] = value;
                return;
            }
            idx -= n;
            if idx < l.bias.len() {
                l.bias[idx] = value;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Mutable access to the layer parameters. Invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        ensure_dim("mlp input", self.spec.input_dim(), input.len())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &x);
            let a = if i + 1 == n {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok((
            x,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("mlp input", self.spec.input_dim(), input.len())?;
        let n = self.layers.len();
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &x);
            if i + 1 < n {
                z.iter_mut()
                    .for_each(|v| *v = self.spec.activation.apply(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Gradients of a scalar loss given `output_grad = dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(&self.spec);
        let input_grad = self.backward_accumulate(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward`] but adds into an existing gradient buffer.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache was produced by different parameters".into(),
            ));
        }
        ensure_dim("mlp output gradient", self.spec.output_dim(), output_grad.len())?;
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| !g.same_shape(l))
        {
            return Err(Error::Contract("gradient buffer shape mismatch".into()));
        }
        let n = self.layers.len();
        let mut delta = output_grad.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if i + 1 < n {
                let z = &cache.pre[i];
                let a = &cache.inputs[i + 1];
                for ((d, &zj), &aj) in delta.iter_mut().zip(z).zip(a) {
                    *d *= self.spec.activation.derivative(zj, aj);
                }
            }
            let x = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    let row = &mut g.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (gw, &xi) in row.iter_mut().zip(x) {
                        *gw += d * xi;
                    }
                }
            }
            let mut prev = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Bias-corrected Adam step. Rejects the whole update when any gradient
    /// component is non-finite.
    pub fn adam_step(&mut self, grads: &MlpGrads, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| !g.same_shape(l))
        {
            return Err(Error::Contract("gradient shape does not match parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient component in adam_step".into()));
        }
        self.step_count += 1;
        self.generation = next_generation();
        let t = self.step_count;
        for ((layer, g), (m, v)) in self
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.adam_m.iter_mut().zip(self.adam_v.iter_mut()))
        {
            let mut mom = AdamMoments {
                m: std::mem::take(&mut m.weight),
                v: std::mem::take(&mut v.weight),
            };
            adam_update(&mut layer.weight, &g.weight, &mut mom, lr, t, cfg);
            m.weight = mom.m;
            v.weight = mom.v;
            let mut mom = AdamMoments {
                m: std::mem::take(&mut m.bias),
                v: std::mem::take(&mut v.bias),
            };
            adam_update(&mut layer.bias, &g.bias, &mut mom, lr, t, cfg);
            m.bias = mom.m;
            v.bias = mom.v;
        }
        Ok(())
    }

    pub(crate) fn adam_moments(&self) -> (&[Dense], &[Dense]) {
        (&self.adam_m, &self.adam_v)
    }

    pub(crate) fn from_parts(
        spec: MlpSpec,
        layers: Vec<Dense>,
        adam_m: Vec<Dense>,
        adam_v: Vec<Dense>,
        step_count: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let expected = MlpGrads::zeros_like(&spec).layers;
        for group in [&layers, &adam_m, &adam_v] {
            if group.len() != expected.len()
                || group.iter().zip(&expected).any(|(a, b)| {
                    !a.same_shape(b) || a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len()
                })
            {
                return Err(config_err("parameter shapes do not match the MLP spec"));
            }
        }
        Ok(Self {
            spec,
            layers,
            adam_m,
            adam_v,
            step_count,
            generation: next_generation(),
        })
    }

    /// Resets optimizer moments and the step counter, keeping parameters.
    pub fn reset_optimizer(&mut self) {
        for d in self.adam_m.iter_mut().chain(self.adam_v.iter_mut()) {
            d.weight.iter_mut().for_each(|x| *x = 0.0);
            d.bias.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step_count = 0;
    }
}

#[inline]
fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let mut z = layer.bias.clone();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
        let mut acc = 0.0;
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        *zo += acc;
    }
    z
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    weight: TensorRepr,
    bias: TensorRepr,
}

impl From<&Dense> for LayerRepr {
    fn from(d: &Dense) -> Self {
        Self {
            weight: TensorRepr {
                shape: vec![d.fan_out, d.fan_in],
                data: d.weight.clone(),
            },
            bias: TensorRepr {
                shape: vec![d.fan_out],
                data: d.bias.clone(),
            },
        }
    }
}

impl TryFrom<LayerRepr> for Dense {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        let (w, b) = (r.weight, r.bias);
        if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
            return Err(config_err("layer tensors must be [out, in] and [out]"));
        }
        if w.data.len() != w.shape[0] * w.shape[1] || b.data.len() != b.shape[0] {
            return Err(config_err("tensor data length does not match its shape"));
        }
        Ok(Dense {
            fan_in: w.shape[1],
            fan_out: w.shape[0],
            weight: w.data,
            bias: b.data,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRepr {
    m: Vec<LayerRepr>,
    v: Vec<LayerRepr>,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRepr {
    spec: MlpSpec,
    layers: Vec<LayerRepr>,
    adam: AdamRepr,
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        let (am, av) = m.adam_moments();
        Self {
            adam: AdamRepr {
                m: am.iter().map(LayerRepr::from).collect(),
                v: av.iter().map(LayerRepr::from).collect(),
                step_count: m.step_count,
            },
            layers: m.layers.iter().map(LayerRepr::from).collect(),
            spec: m.spec,
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        let dense = |v: Vec<LayerRepr>| v.into_iter().map(Dense::try_from).collect::<Result<Vec<_>>>();
        let layers = dense(r.layers)?;
        if layers.iter().flat_map(|d| d.values()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("stored network parameter".into()));
        }
        Mlp::from_parts(r.spec, layers, dense(r.adam.m)?, dense(r.adam.v)?, r.adam.step_count)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Relative error of the central difference `(fp - fm) / (2 eps)`, or zero
/// when the two agree to within the rounding resolution of the stencil
/// (losses are sums of terms of order one, hence the floor of 1). Without
/// this, exactly zero gradients are judged on the last bit of the loss.
fn stencil_error(analytic: f64, fp: f64, fm: f64, eps: f64) -> f64 {
    let numeric = (fp - fm) / (2.0 * eps);
    let resolution = 4.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / (2.0 * eps);
    if (analytic - numeric).abs() <= resolution {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Compares analytic gradients of `loss` at `mlp` against central finite
/// differences with step `eps`, returning the worst relative error.
pub fn grad_check<F>(mlp: &Mlp, loss: F, eps: f64) -> Result<f64>
where
    F: Fn(&Mlp) -> Result<(f64, MlpGrads)>,
{
    let (_, analytic) = loss(mlp)?;
    let analytic = analytic.flat();
    ensure_dim("gradient", mlp.param_count(), analytic.len())?;
    let mut probe = mlp.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = mlp.param(i);
        probe.set_param(i, orig + eps);
        let (lp, _) = loss(&probe)?;
        probe.set_param(i, orig - eps);
        let (lm, _) = loss(&probe)?;
        probe.set_param(i, orig);
        worst = worst.max(stencil_error(a, lp, lm, eps));
    }
    Ok(worst)
}

/// Finite-difference check for a plain function of a vector.
pub fn grad_check_vec<F>(x: &[f64], f: F, analytic: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        worst = worst.max(stencil_error(analytic[i], fp, fm, eps));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seed;

    fn tiny_linear(w: f64, b: f64) -> Mlp {
        let spec = MlpSpec::new(vec![1, 1], Activation::Tanh).unwrap();
        let mut m = Mlp::zeros(spec).unwrap();
        m.layers_mut()[0].weight[0] = w;
        m.layers_mut()[0].bias[0] = b;
        m
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 4, 1], Activation::Relu).is_ok());
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let m = Mlp::zeros(MlpSpec::new(vec![3, 5, 2], Activation::Tanh).unwrap()).unwrap();
        let (y, _) = m.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let m = tiny_linear(2.0, 1.0);
        assert_eq!(m.forward(&[3.0]).unwrap().0, vec![7.0]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = tiny_linear(2.0, 1.0);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_backward() {
        let m = tiny_linear(2.0, 1.0);
        let (_, cache) = m.forward(&[3.0]).unwrap();
        let (g, gin) = m.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight, vec![3.0]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
        assert_eq!(gin, vec![2.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = Seed(1).rng();
        let m = Mlp::init(MlpSpec::new(vec![4, 6, 3], Activation::Tanh).unwrap(), 1.0, &mut rng).unwrap();
        let (_, cache) = m.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, gin) = m.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(gin.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = tiny_linear(2.0, 1.0);
        let (_, cache) = m.forward(&[3.0]).unwrap();
        let (g, _) = m.backward(&cache, &[1.0]).unwrap();
        m.adam_step(&g, 1e-3, &AdamConfig::default()).unwrap();
        assert!(matches!(m.backward(&cache, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut rng = Seed(2).rng();
        let mut m = Mlp::init(MlpSpec::new(vec![2, 3, 1], Activation::Relu).unwrap(), 1.0, &mut rng).unwrap();
        let before = m.flat_params();
        let g = MlpGrads::zeros_like(m.spec());
        m.adam_step(&g, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(before, m.flat_params());
        assert_eq!(m.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = tiny_linear(0.0, 0.0);
        let mut g = MlpGrads::zeros_like(m.spec());
        g.layers[0].weight[0] = 0.5;
        m.adam_step(&g, 1e-3, &AdamConfig::default()).unwrap();
        // m_hat / sqrt(v_hat) = sign(g) at t = 1
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((m.layers()[0].weight[0] - expected).abs() < 1e-15);
        assert!((m.layers()[0].weight[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut m = tiny_linear(1.0, 0.0);
        let mut g = MlpGrads::zeros_like(m.spec());
        g.layers[0].bias[0] = f64::NAN;
        let before = m.flat_params();
        assert!(matches!(m.adam_step(&g, 1e-3, &AdamConfig::default()), Err(Error::NonFinite(_))));
        assert_eq!(before, m.flat_params());
        assert_eq!(m.step_count(), 0);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let m = tiny_linear(0.7, 0.0);
        let err = grad_check(
            &m,
            |net| {
                let w = net.layers()[0].weight[0];
                let mut g = MlpGrads::zeros_like(net.spec());
                g.layers[0].weight[0] = 2.0 * w;
                Ok((w * w, g))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_flags_small_relative_mistakes() {
        let m = tiny_linear(0.7, 0.0);
        let check = |scale: f64| {
            grad_check(
                &m,
                |net| {
                    let w = net.layers()[0].weight[0];
                    let mut g = MlpGrads::zeros_like(net.spec());
                    g.layers[0].weight[0] = 2.0 * w * scale;
                    Ok((w * w, g))
                },
                1e-6,
            )
            .unwrap()
        };
        assert!((check(1.001) - 1e-3).abs() < 1e-5);
        // a dropped gradient is a full miss
        assert_eq!(check(0.0), 1.0);
        let err = grad_check_vec(&[1e-3], |x| 3.0 + x[0] * x[0], &[0.0], 1e-6);
        assert!(err > 0.9, "{err}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = Seed(3).rng();
        let m = Mlp::init(MlpSpec::new(vec![5, 8, 8, 2], Activation::Tanh).unwrap(), 1.0, &mut rng).unwrap();
        let x = [0.3, -0.1, 0.7, 1.2, -2.0];
        let a = m.forward(&x).unwrap().0;
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
