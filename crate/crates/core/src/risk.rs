//! Distortion risk metrics.
//!
//! A distortion `g_beta` reweights the quantile fractions of a return
//! distribution. The distorted expectation of `N` equally weighted quantiles
//! `phi_1 <= ... <= phi_N` is
//!
//! ```text
//! V_beta = sum_k (g(k/N) - g((k-1)/N)) * phi_k
//! ```
//!
//! Supported distortions:
//! * Wang: `g(tau) = Phi(Phi^-1(tau) + beta)`, `beta` in `[-1, 1]`. Positive
//!   `beta` is risk-averse, negative risk-seeking, zero neutral.
//! * CVaR: `g(tau) = min(tau / beta, 1)`, `beta` in `(0, 1]`. `beta = 1` is
//!   neutral; smaller values focus on the lower tail.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::quantile::{dist_mean, QuantileDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Neutral,
    Wang,
    Cvar,
}

impl Metric {
    /// Range of `beta` sampled during training.
    pub fn training_range(self) -> (f64, f64) {
        match self {
            Metric::Neutral => (0.0, 0.0),
            Metric::Wang => (-1.0, 1.0),
            Metric::Cvar => (0.01, 1.0),
        }
    }

    /// Default evaluation sweep.
    pub fn eval_betas(self) -> Vec<f64> {
        match self {
            Metric::Neutral => vec![0.0],
            Metric::Wang => vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            Metric::Cvar => vec![0.05, 0.15, 0.25, 0.5, 1.0],
        }
    }

    /// Reference betas shown next to the live value distribution.
    pub fn reference_betas(self) -> Vec<f64> {
        match self {
            Metric::Neutral => vec![0.0],
            Metric::Wang => vec![-1.0, 0.0, 1.0],
            Metric::Cvar => vec![0.05, 0.5, 1.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Neutral => "neutral",
            Metric::Wang => "wang",
            Metric::Cvar => "cvar",
        }
    }

    /// Draws a training `beta` for a fresh episode.
    pub fn sample_beta<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Metric::Neutral => 0.0,
            Metric::Wang | Metric::Cvar => {
                let (lo, hi) = self.training_range();
                rng.random_range(lo..=hi)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral" => Ok(Metric::Neutral),
            "wang" => Ok(Metric::Wang),
            "cvar" => Ok(Metric::Cvar),
            other => Err(config_err(format!("unknown risk metric `{other}`"))),
        }
    }
}

/// A distortion metric and its risk-sensitivity parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RiskSpecRepr", into = "RiskSpecRepr")]
pub struct RiskSpec {
    metric: Metric,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskSpecRepr {
    metric: Metric,
    beta: f64,
}

impl TryFrom<RiskSpecRepr> for RiskSpec {
    type Error = Error;

    fn try_from(r: RiskSpecRepr) -> Result<Self> {
        RiskSpec::new(r.metric, r.beta)
    }
}

impl From<RiskSpec> for RiskSpecRepr {
    fn from(s: RiskSpec) -> Self {
        RiskSpecRepr {
            metric: s.metric,
            beta: s.beta,
        }
    }
}

impl RiskSpec {
    pub fn new(metric: Metric, beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(config_err("risk sensitivity must be finite"));
        }
        match metric {
            Metric::Neutral => Ok(Self { metric, beta: 0.0 }),
            Metric::Wang if (-1.0..=1.0).contains(&beta) => Ok(Self { metric, beta }),
            Metric::Wang => Err(config_err(format!("wang beta must lie in [-1, 1], got {beta}"))),
            Metric::Cvar if beta > 0.0 && beta <= 1.0 => Ok(Self { metric, beta }),
            Metric::Cvar => Err(config_err(format!("cvar beta must lie in (0, 1], got {beta}"))),
        }
    }

    pub fn neutral() -> Self {
        Self {
            metric: Metric::Neutral,
            beta: 0.0,
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// True when the distortion is exactly the identity.
    pub fn is_identity(&self) -> bool {
        match self.metric {
            Metric::Neutral => true,
            Metric::Wang => self.beta == 0.0,
            Metric::Cvar => self.beta == 1.0,
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF (Wichura's AS241, relative accuracy ~1e-16).
pub fn normal_cdf_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return Ok(q * num / den);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -val } else { val })
}

/// Evaluates `g_beta(tau)`.
pub fn distortion(spec: &RiskSpec, tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("distortion needs tau in [0, 1], got {tau}")));
    }
    Ok(distort(spec, tau))
}

fn distort(spec: &RiskSpec, tau: f64) -> f64 {
    if spec.is_identity() {
        return tau;
    }
    match spec.metric {
        Metric::Neutral => tau,
        Metric::Wang => {
            if tau <= 0.0 {
                0.0
            } else if tau >= 1.0 {
                1.0
            } else {
                // tau is strictly inside (0, 1) here
                normal_cdf(normal_cdf_inv(tau).expect("open interval") + spec.beta)
            }
        }
        Metric::Cvar => (tau / spec.beta).min(1.0),
    }
}

/// Probability weights applied to the ascending quantiles.
pub fn distortion_weights(spec: &RiskSpec, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(config_err("distortion weights need N >= 1"));
    }
    if spec.is_identity() {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let cum: Vec<f64> = (0..=n)
        .map(|k| if k == n { 1.0 } else { k as f64 / n as f64 })
        .collect();
    Ok(weights_from_cumulative(spec, &cum))
}

fn weights_from_cumulative(spec: &RiskSpec, cum: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = cum.iter().map(|&t| distort(spec, t)).collect();
    let mut w: Vec<f64> = g.windows(2).map(|p| (p[1] - p[0]).max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

/// Distorted expectation of a quantile distribution. Quantiles are sorted
/// ascending before weighting; identity distortions return the plain mean.
pub fn distorted_value(z: &QuantileDistribution, spec: &RiskSpec) -> f64 {
    distorted_value_slice(z.quantiles(), spec)
}

pub fn distorted_value_slice(quantiles: &[f64], spec: &RiskSpec) -> f64 {
    if spec.is_identity() {
        return dist_mean(quantiles);
    }
    let mut sorted = quantiles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let w = distortion_weights(spec, sorted.len()).expect("non-empty distribution");
    sorted.iter().zip(&w).map(|(q, w)| q * w).sum()
}

/// Distorted expectation of a finite discrete distribution with arbitrary
/// probabilities; reduces to [`distorted_value`] for equal weights.
pub fn distorted_expectation(atoms: &[f64], probs: &[f64], spec: &RiskSpec) -> Result<f64> {
    if atoms.len() != probs.len() || atoms.is_empty() {
        return Err(config_err("atoms and probabilities must be non-empty and aligned"));
    }
    if spec.is_identity() {
        return Ok(atoms.iter().zip(probs).map(|(a, p)| a * p).sum());
    }
    let mut pairs: Vec<(f64, f64)> = atoms.iter().copied().zip(probs.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = Vec::with_capacity(pairs.len() + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for (_, p) in &pairs {
        acc += p;
        cum.push(acc.min(1.0));
    }
    *cum.last_mut().expect("non-empty") = 1.0;
    let w = weights_from_cumulative(spec, &cum);
    Ok(pairs.iter().zip(&w).map(|((a, _), w)| a * w).sum())
}
