//! Randomised finite-difference checks of the hand-written gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{grad_check, grad_check_vec, Activation, Mlp, MlpSpec};
use crate::quantile::pinball_loss;
use crate::seed::Seed;

pub const EPS: f64 = 1e-6;
/// The pinball loss is piecewise quadratic, so a wider stencil stays exact
/// away from kinks and avoids cancellation.
pub const PINBALL_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub specs: usize,
    /// Worst relative error of MLP parameter gradients under a linear probe.
    pub mlp: f64,
    /// Worst relative error of pinball gradients w.r.t. predicted quantiles.
    pub pinball: f64,
    /// Worst relative error of MLP parameters trained through the pinball loss.
    pub critic: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.mlp.max(self.pinball).max(self.critic)
    }
}

fn random_spec<R: Rng + ?Sized>(rng: &mut R) -> Result<MlpSpec> {
    let depth = rng.random_range(2..=4);
    let widths = (0..depth).map(|_| rng.random_range(1..=7)).collect();
    let act = if rng.random::<bool>() { Activation::Tanh } else { Activation::Relu };
    MlpSpec::new(widths, act)
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Finite differences are only valid away from activation kinks.
const KINK_MARGIN: f64 = 1e-3;

/// Initialised network with random biases, so that no hidden unit sits
/// exactly on a ReLU kink, plus an input keeping every hidden
/// pre-activation at least `KINK_MARGIN` away from zero.
fn smooth_point<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<(Mlp, Vec<f64>)> {
    loop {
        let mut mlp = Mlp::init(spec.clone(), 1.0, rng)?;
        for layer in mlp.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        for _ in 0..100 {
            let x = normals(rng, spec.input_dim(), 2.0);
            let (_, cache) = mlp.forward(&x)?;
            if cache.min_hidden_pre_activation() > KINK_MARGIN {
                return Ok((mlp, x));
            }
        }
    }
}

/// Targets whose residuals keep at least `gap` away from the loss kinks at
/// `0` and `+-kappa`, so the loss is smooth inside the stencil.
fn targets_away_from<R: Rng + ?Sized>(rng: &mut R, predicted: &[f64], n: usize, kappa: f64, gap: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = rng.random_range(-3.0..3.0);
        if predicted.iter().all(|p| {
            let u = (t - p).abs();
            u > gap && (kappa == 0.0 || (u - kappa).abs() > gap)
        }) {
            out.push(t);
        }
    }
    out
}

pub fn run(specs: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Seed(seed).stream("gradcheck").rng();
    let mut report = GradcheckReport {
        specs,
        mlp: 0.0,
        pinball: 0.0,
        critic: 0.0,
    };
    for _ in 0..specs {
        let spec = random_spec(&mut rng)?;
        let (mlp, x) = smooth_point(&spec, &mut rng)?;
        let probe = normals(&mut rng, spec.output_dim(), 1.0);
        let linear = |m: &Mlp| {
            let (out, cache) = m.forward(&x)?;
            let l = out.iter().zip(&probe).map(|(o, c)| o * c).sum();
            let (g, _) = m.backward(&cache, &probe)?;
            Ok((l, g))
        };
        report.mlp = report.mlp.max(grad_check(&mlp, linear, EPS)?);

        let n = rng.random_range(1..=16);
        let kappa = if rng.random::<bool>() { 0.0 } else { rng.random_range(0.1..2.0) };
        let pred = normals(&mut rng, n, 2.0);
        let m = rng.random_range(1..=8);
        let targets = targets_away_from(&mut rng, &pred, m, kappa, 1e-2);
        let (_, g) = pinball_loss(&pred, &targets, kappa)?;
        let f = |p: &[f64]| pinball_loss(p, &targets, kappa).map(|(l, _)| l).unwrap_or(f64::NAN);
        report.pinball = report.pinball.max(grad_check_vec(&pred, f, &g, PINBALL_EPS));

        let out = mlp.predict(&x)?;
        let targets = targets_away_from(&mut rng, &out, 4, kappa, 1e-2);
        let critic = |m: &Mlp| {
            let (out, cache) = m.forward(&x)?;
            let (l, dl) = pinball_loss(&out, &targets, kappa)?;
            let (g, _) = m.backward(&cache, &dl)?;
            Ok((l, g))
        };
        report.critic = report.critic.max(grad_check(&mlp, critic, EPS)?);
    }
    Ok(report)
}
