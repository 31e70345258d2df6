//! Value distributions as uniform mixtures of Diracs, quantile-regression
//! losses and distribution distances.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// `N` equally weighted Diracs at the given locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantileDistribution {
    quantiles: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(quantiles: Vec<f64>) -> Result<Self> {
        if quantiles.is_empty() {
            return Err(config_err("a quantile distribution needs at least one atom"));
        }
        if let Some(q) = quantiles.iter().find(|q| !q.is_finite()) {
            return Err(Error::NonFinite(format!("quantile value {q}")));
        }
        Ok(Self { quantiles })
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    pub fn len(&self) -> usize {
        self.quantiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quantiles.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.quantiles
    }

    /// Quantile values sorted ascending.
    pub fn sorted(&self) -> Vec<f64> {
        let mut q = self.quantiles.clone();
        q.sort_by(f64::total_cmp);
        q
    }

    pub fn mean(&self) -> f64 {
        dist_mean(&self.quantiles)
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            quantiles: self.quantiles.iter().map(|q| q + c).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            quantiles: self.quantiles.iter().map(|q| q * c).collect(),
        }
    }
}

/// `(1/N) * sum(quantiles)`.
pub fn dist_mean(quantiles: &[f64]) -> f64 {
    quantiles.iter().sum::<f64>() / quantiles.len() as f64
}

/// Endpoint fractions `tau_i = i / N` for `i = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileFractions {
    taus: Vec<f64>,
}

impl QuantileFractions {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(config_err("quantile count must be positive"));
        }
        let taus = (0..=n)
            .map(|i| if i == n { 1.0 } else { i as f64 / n as f64 })
            .collect();
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn n(&self) -> usize {
        self.taus.len() - 1
    }
}

/// Midpoint fraction `(2i - 1) / (2N)` regressed by head `i` (1-based).
pub fn midpoint_fraction(i: usize, n: usize) -> f64 {
    (2 * i - 1) as f64 / (2 * n) as f64
}

/// Quantile-regression (pinball) loss.
///
/// Head `i` is trained toward the midpoint fraction of its slot. The loss is
/// averaged over heads and target samples. With `kappa > 0` the Huber-smoothed
/// quantile loss `|tau - 1[u<0]| * L_kappa(u) / kappa` is used. Returns the
/// loss and its gradient with respect to each predicted quantile.
pub fn pinball_loss(predicted: &[f64], targets: &[f64], kappa: f64) -> Result<(f64, Vec<f64>)> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(config_err(format!("huber kappa must be >= 0, got {kappa}")));
    }
    if predicted.is_empty() || targets.is_empty() {
        return Err(config_err("pinball loss needs predictions and targets"));
    }
    let n = predicted.len();
    let norm = 1.0 / (n * targets.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&phi, g)) in predicted.iter().zip(grad.iter_mut()).enumerate() {
        let tau = midpoint_fraction(i + 1, n);
        for &target in targets {
            let u = target - phi;
            let (l, dl_du) = quantile_huber(u, tau, kappa);
            loss += l;
            *g -= dl_du;
        }
        *g *= norm;
    }
    Ok((loss * norm, grad))
}

#[inline]
fn quantile_huber(u: f64, tau: f64, kappa: f64) -> (f64, f64) {
    let below = if u < 0.0 { 1.0 } else { 0.0 };
    if kappa == 0.0 {
        (u * (tau - below), tau - below)
    } else {
        let w = (tau - below).abs();
        let (h, dh) = if u.abs() <= kappa {
            (0.5 * u * u, u)
        } else {
            (kappa * (u.abs() - 0.5 * kappa), kappa * u.signum())
        };
        (w * h / kappa, w * dh / kappa)
    }
}

/// Wasserstein-1 distance between two equally sized Dirac mixtures.
pub fn wasserstein1(a: &QuantileDistribution, b: &QuantileDistribution) -> Result<f64> {
    if a.len() != b.len() {
        return Err(config_err(format!(
            "wasserstein1 needs equal atom counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sa = a.sorted();
    let sb = b.sorted();
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// Bins the Diracs of `z` into `bins` equal-width bins spanning its range.
/// Each Dirac contributes `1/N` to the bin containing it; the top edge is
/// inclusive. A degenerate distribution gets a unit-width range centred on
/// its single value.
pub fn to_histogram(z: &QuantileDistribution, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(config_err("histogram needs at least one bin"));
    }
    let q = z.quantiles();
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut masses = vec![0.0; bins];
    let mass = 1.0 / q.len() as f64;
    for &x in q {
        masses[bin_index(x, lo, hi, bins)] += mass;
    }
    Ok(Histogram { edges, masses })
}

pub(crate) fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let idx = ((x - lo) / (hi - lo) * bins as f64).floor();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

/// Projects a finite discrete distribution onto `n` quantiles at the midpoint
/// fractions (the Wasserstein-1 optimal projection onto `n` equal Diracs).
pub fn project_discrete(atoms: &[f64], probs: &[f64], n: usize) -> Result<QuantileDistribution> {
    if atoms.len() != probs.len() || atoms.is_empty() {
        return Err(config_err("atoms and probabilities must be non-empty and aligned"));
    }
    let mut pairs: Vec<(f64, f64)> = atoms.iter().copied().zip(probs.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut k = 0;
    for i in 1..=n {
        let tau = midpoint_fraction(i, n);
        while k + 1 < pairs.len() && cum + pairs[k].1 < tau {
            cum += pairs[k].1;
            k += 1;
        }
        out.push(pairs[k].0);
    }
    QuantileDistribution::new(out)
}
