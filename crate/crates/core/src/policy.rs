//! β-conditioned actor and quantile critic.
//!
//! The actor splits its input `[stacked extero | rest]`: an encoder MLP maps
//! the stacked exteroceptive frames to a feature vector, and a trunk MLP maps
//! `[features | rest]` to the action-distribution parameters. Continuous
//! tasks use a Gaussian head with a state-independent learnable log-std;
//! the tabular task uses a categorical head over logits. The critic is a
//! plain MLP from the critic observation to `N` quantile values.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{config_err, ensure_dim, Error, Result};
use crate::nn::{adam_update, Activation, AdamConfig, AdamMoments, ForwardCache, Mlp, MlpGrads, MlpSpec};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How a flat actor input is split between encoder and trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsLayout {
    /// Width of one exteroceptive frame.
    pub extero: usize,
    /// Number of stacked frames.
    pub stack: usize,
    pub rest: usize,
}

impl ObsLayout {
    pub fn stacked_extero(&self) -> usize {
        self.extero * self.stack
    }

    pub fn input_dim(&self) -> usize {
        self.stacked_extero() + self.rest
    }

    pub fn split<'a>(&self, obs: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        obs.split_at(self.stacked_extero())
    }
}

/// Hidden widths and initialisation of actor and critic networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder_hidden: Vec<usize>,
    /// Encoder output width shared by teacher and student encoders.
    pub features: usize,
    pub trunk_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub init_log_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            features: 32,
            trunk_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            activation: Activation::Tanh,
            init_log_std: -0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0
            || [&self.encoder_hidden, &self.trunk_hidden, &self.critic_hidden]
                .iter()
                .any(|h| h.contains(&0))
        {
            return Err(config_err("network widths must be positive"));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(config_err(format!(
                "network.init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]"
            )));
        }
        Ok(())
    }

    pub fn encoder_spec(&self, input: usize) -> Result<MlpSpec> {
        let mut w = vec![input];
        w.extend(&self.encoder_hidden);
        w.push(self.features);
        MlpSpec::new(w, self.activation)
    }

    pub fn trunk_spec(&self, rest: usize, out: usize) -> Result<MlpSpec> {
        let mut w = vec![self.features + rest];
        w.extend(&self.trunk_hidden);
        w.push(out);
        MlpSpec::new(w, self.activation)
    }

    pub fn critic_spec(&self, input: usize, quantiles: usize) -> Result<MlpSpec> {
        let mut w = vec![input];
        w.extend(&self.critic_hidden);
        w.push(quantiles);
        MlpSpec::new(w, self.activation)
    }
}

/// Which actor parameters an optimiser step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    EncoderOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogStd {
    pub values: Vec<f64>,
    pub adam: AdamMoments,
    pub step_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Head {
    Gaussian { log_std: LogStd },
    Categorical { actions: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub layout: ObsLayout,
    pub encoder: Mlp,
    pub trunk: Mlp,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct PolicyCache {
    encoder: ForwardCache,
    trunk: ForwardCache,
}

/// Gradient buffer for every actor parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub encoder: MlpGrads,
    pub trunk: MlpGrads,
    pub log_std: Vec<f64>,
}

impl PolicyGrads {
    pub fn sq_norm(&self) -> f64 {
        self.encoder.sq_norm() + self.trunk.sq_norm() + self.log_std.iter().map(|g| g * g).sum::<f64>()
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.trunk.scale(s);
        self.log_std.iter_mut().for_each(|g| *g *= s);
    }

    pub fn fill_zero(&mut self) {
        self.encoder.fill_zero();
        self.trunk.fill_zero();
        self.log_std.iter_mut().for_each(|g| *g = 0.0);
    }
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(layout: ObsLayout, space: ActionSpace, net: &NetworkConfig, rng: &mut R) -> Result<Self> {
        net.validate()?;
        let encoder = Mlp::init(net.encoder_spec(layout.stacked_extero())?, 1.0, rng)?;
        let trunk = Mlp::init(net.trunk_spec(layout.rest, space.dim())?, 0.01, rng)?;
        let head = match space {
            ActionSpace::Continuous(n) => Head::Gaussian {
                log_std: LogStd {
                    values: vec![net.init_log_std; n],
                    adam: AdamMoments::zeros(n),
                    step_count: 0,
                },
            },
            ActionSpace::Discrete(n) => Head::Categorical { actions: n },
        };
        Ok(Self {
            layout,
            encoder,
            trunk,
            head,
        })
    }

    /// Checks internal consistency after deserialisation.
    pub fn validate(&self) -> Result<()> {
        ensure_dim("encoder input", self.layout.stacked_extero(), self.encoder.spec().input_dim())?;
        ensure_dim(
            "trunk input",
            self.encoder.spec().output_dim() + self.layout.rest,
            self.trunk.spec().input_dim(),
        )?;
        let out = self.trunk.spec().output_dim();
        match &self.head {
            Head::Gaussian { log_std } => {
                ensure_dim("log-std", out, log_std.values.len())?;
                if log_std.values.iter().any(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v)) {
                    return Err(config_err("log-std outside its clamp range"));
                }
            }
            Head::Categorical { actions } => ensure_dim("categorical head", out, *actions)?,
        }
        Ok(())
    }

    pub fn action_space(&self) -> ActionSpace {
        match &self.head {
            Head::Gaussian { log_std } => ActionSpace::Continuous(log_std.values.len()),
            Head::Categorical { actions } => ActionSpace::Discrete(*actions),
        }
    }

    pub fn log_std(&self) -> &[f64] {
        match &self.head {
            Head::Gaussian { log_std } => &log_std.values,
            Head::Categorical { .. } => &[],
        }
    }

    pub fn features(&self, stacked_extero: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(stacked_extero)
    }

    /// Trunk output for externally supplied encoder features.
    pub fn output_from_features(&self, features: &[f64], rest: &[f64]) -> Result<Vec<f64>> {
        let mut x = features.to_vec();
        x.extend_from_slice(rest);
        self.trunk.predict(&x)
    }

    /// Distribution parameters: Gaussian mean or categorical logits.
    pub fn output(&self, obs: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("policy input", self.layout.input_dim(), obs.len())?;
        let (ext, rest) = self.layout.split(obs);
        let f = self.features(ext)?;
        self.output_from_features(&f, rest)
    }

    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, PolicyCache)> {
        ensure_dim("policy input", self.layout.input_dim(), obs.len())?;
        let (ext, rest) = self.layout.split(obs);
        let (mut x, encoder) = self.encoder.forward(ext)?;
        x.extend_from_slice(rest);
        let (out, trunk) = self.trunk.forward(&x)?;
        Ok((out, PolicyCache { encoder, trunk }))
    }

    pub fn zero_grads(&self) -> PolicyGrads {
        PolicyGrads {
            encoder: MlpGrads::zeros_like(self.encoder.spec()),
            trunk: MlpGrads::zeros_like(self.trunk.spec()),
            log_std: vec![0.0; self.log_std().len()],
        }
    }

    /// Adds the parameter gradients for `out_grad = dL/d(output)`.
    pub fn backward_accumulate(&self, cache: &PolicyCache, out_grad: &[f64], grads: &mut PolicyGrads) -> Result<()> {
        let dx = self.trunk.backward_accumulate(&cache.trunk, out_grad, &mut grads.trunk)?;
        let nf = self.encoder.spec().output_dim();
        self.encoder.backward_accumulate(&cache.encoder, &dx[..nf], &mut grads.encoder)?;
        Ok(())
    }

    /// Deterministic action: the Gaussian mean or the most likely category.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Action> {
        let out = self.output(obs)?;
        check_finite(&out)?;
        Ok(match &self.head {
            Head::Gaussian { .. } => Action::Continuous(out),
            Head::Categorical { .. } => Action::Discrete(argmax(&out)),
        })
    }

    /// Samples an action and returns it with its log-probability and the
    /// distribution parameters it was drawn from.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Action, f64, Vec<f64>)> {
        let out = self.output(obs)?;
        check_finite(&out)?;
        match &self.head {
            Head::Gaussian { log_std } => {
                let a: Vec<f64> = out
                    .iter()
                    .zip(&log_std.values)
                    .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lp = gaussian_log_prob(&out, &log_std.values, &a);
                Ok((Action::Continuous(a), lp, out))
            }
            Head::Categorical { .. } => {
                let p = softmax(&out);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                Ok((Action::Discrete(k), p[k].ln(), out))
            }
        }
    }

    pub fn adam_step(&mut self, grads: &PolicyGrads, lr: f64, cfg: &AdamConfig, which: Trainable) -> Result<()> {
        if grads.log_std.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log-std gradient".into()));
        }
        self.encoder.adam_step(&grads.encoder, lr, cfg)?;
        if which == Trainable::All {
            self.trunk.adam_step(&grads.trunk, lr, cfg)?;
            if let Head::Gaussian { log_std } = &mut self.head {
                log_std.step_count += 1;
                adam_update(&mut log_std.values, &grads.log_std, &mut log_std.adam, lr, log_std.step_count, cfg);
                log_std
                    .values
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
            }
        }
        Ok(())
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("policy output".into()))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Differential entropy of a diagonal Gaussian, `sum(log_std + 0.5 ln(2 pi e))`.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

/// `KL(old || new)` between diagonal Gaussians.
pub fn gaussian_kl(mean_old: &[f64], log_std_old: &[f64], mean_new: &[f64], log_std_new: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mean_old.len() {
        let vo = (2.0 * log_std_old[i]).exp();
        let vn = (2.0 * log_std_new[i]).exp();
        let d = mean_old[i] - mean_new[i];
        kl += log_std_new[i] - log_std_old[i] + (vo + d * d) / (2.0 * vn) - 0.5;
    }
    kl
}

/// `KL(old || new)` between categorical distributions given by logits.
pub fn categorical_kl(logits_old: &[f64], logits_new: &[f64]) -> f64 {
    let lo = log_softmax(logits_old);
    let ln = log_softmax(logits_new);
    lo.iter().zip(&ln).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Log-probability, entropy and their gradients for one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTerms {
    pub log_prob: f64,
    pub entropy: f64,
    /// `d log_prob / d output`.
    pub dlogp_dout: Vec<f64>,
    /// `d log_prob / d log_std` (empty for categorical heads).
    pub dlogp_dlogstd: Vec<f64>,
    /// `d entropy / d output` (zero for the Gaussian head).
    pub dent_dout: Vec<f64>,
    /// `d entropy / d log_std`.
    pub dent_dlogstd: Vec<f64>,
}

impl Head {
    pub fn terms(&self, out: &[f64], action: &Action) -> Result<HeadTerms> {
        match (self, action) {
            (Head::Gaussian { log_std }, Action::Continuous(a)) => {
                ensure_dim("action", out.len(), a.len())?;
                let ls = &log_std.values;
                let mut dout = Vec::with_capacity(a.len());
                let mut dls = Vec::with_capacity(a.len());
                for i in 0..a.len() {
                    let var = (2.0 * ls[i]).exp();
                    let d = a[i] - out[i];
                    dout.push(d / var);
                    dls.push(d * d / var - 1.0);
                }
                Ok(HeadTerms {
                    log_prob: gaussian_log_prob(out, ls, a),
                    entropy: gaussian_entropy(ls),
                    dlogp_dout: dout,
                    dlogp_dlogstd: dls,
                    dent_dout: vec![0.0; out.len()],
                    dent_dlogstd: vec![1.0; ls.len()],
                })
            }
            (Head::Categorical { actions }, Action::Discrete(k)) => {
                if k >= actions {
                    return Err(config_err(format!("action {k} outside 0..{actions}")));
                }
                let lp = log_softmax(out);
                let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let entropy = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                let dlogp = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| if i == *k { 1.0 - pi } else { -pi })
                    .collect();
                let dent = p.iter().zip(&lp).map(|(pi, li)| -pi * (li + entropy)).collect();
                Ok(HeadTerms {
                    log_prob: lp[*k],
                    entropy,
                    dlogp_dout: dlogp,
                    dlogp_dlogstd: Vec::new(),
                    dent_dout: dent,
                    dent_dlogstd: Vec::new(),
                })
            }
            _ => Err(config_err("action type does not match the policy head")),
        }
    }

    /// `KL(old || self)` given the old head's outputs and log-std.
    pub fn kl_from(&self, old_out: &[f64], old_log_std: &[f64], new_out: &[f64]) -> f64 {
        match self {
            Head::Gaussian { log_std } => gaussian_kl(old_out, old_log_std, new_out, &log_std.values),
            Head::Categorical { .. } => categorical_kl(old_out, new_out),
        }
    }
}

/// Builds a quantile critic `critic obs -> N quantiles`.
pub fn new_critic<R: Rng + ?Sized>(input: usize, quantiles: usize, net: &NetworkConfig, rng: &mut R) -> Result<Mlp> {
    Mlp::init(net.critic_spec(input, quantiles)?, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_vec;
    use crate::seed::Seed;

    fn policy(space: ActionSpace) -> Policy {
        let layout = ObsLayout {
            extero: 3,
            stack: 2,
            rest: 2,
        };
        let net = NetworkConfig {
            encoder_hidden: vec![5],
            features: 4,
            trunk_hidden: vec![6],
            ..NetworkConfig::default()
        };
        let mut p = Policy::new(layout, space, &net, &mut Seed(3).rng()).unwrap();
        // larger output weights so gradients are not vanishingly small
        for w in p.trunk.layers_mut().last_mut().unwrap().weight.iter_mut() {
            *w *= 50.0;
        }
        p
    }

    #[test]
    fn gaussian_entropy_matches_sampling() {
        let ls = [-0.3, 0.4];
        let mut rng = Seed(1).rng();
        let n = 200_000;
        let mean = [0.5, -1.0];
        let mut acc = 0.0;
        for _ in 0..n {
            let a: Vec<f64> = mean
                .iter()
                .zip(&ls)
                .map(|(m, l): (&f64, &f64)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            acc -= gaussian_log_prob(&mean, &ls, &a);
        }
        let est = acc / n as f64;
        assert!((est - gaussian_entropy(&ls)).abs() < 0.01, "{est}");
    }

    #[test]
    fn kl_is_zero_for_identical_and_positive_otherwise() {
        assert_eq!(gaussian_kl(&[0.1], &[-0.2], &[0.1], &[-0.2]), 0.0);
        assert!(gaussian_kl(&[0.1], &[-0.2], &[0.3], &[-0.1]) > 0.0);
        assert!(categorical_kl(&[0.1, 0.2], &[0.1, 0.2]).abs() < 1e-15);
        assert!(categorical_kl(&[0.1, 0.2], &[1.0, -0.2]) > 0.0);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let p = policy(ActionSpace::Continuous(2));
        let out = vec![0.2, -0.4];
        let a = Action::Continuous(vec![0.5, 0.1]);
        let t = p.head.terms(&out, &a).unwrap();
        let ls = p.log_std().to_vec();
        let f = |o: &[f64]| gaussian_log_prob(o, &ls, &[0.5, 0.1]);
        assert!(grad_check_vec(&out, f, &t.dlogp_dout, 1e-6) < 1e-6);
        let g = |l: &[f64]| gaussian_log_prob(&out, l, &[0.5, 0.1]);
        assert!(grad_check_vec(&ls, g, &t.dlogp_dlogstd, 1e-6) < 1e-6);

        let c = policy(ActionSpace::Discrete(4));
        let logits = vec![0.3, -0.1, 0.8, 0.0];
        let t = c.head.terms(&logits, &Action::Discrete(2)).unwrap();
        let f = |o: &[f64]| log_softmax(o)[2];
        assert!(grad_check_vec(&logits, f, &t.dlogp_dout, 1e-6) < 1e-6);
        let h = |o: &[f64]| -softmax(o).iter().zip(log_softmax(o)).map(|(p, l)| p * l).sum::<f64>();
        assert!(grad_check_vec(&logits, h, &t.dent_dout, 1e-6) < 1e-6);
    }

    #[test]
    fn policy_backward_matches_finite_differences() {
        let p = policy(ActionSpace::Continuous(2));
        let obs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let weights = [0.3, -1.1];
        let loss = |q: &Policy| -> f64 { q.output(&obs).unwrap().iter().zip(&weights).map(|(o, w)| o * w).sum() };
        let (_, cache) = p.forward(&obs).unwrap();
        let mut g = p.zero_grads();
        p.backward_accumulate(&cache, &weights, &mut g).unwrap();
        let mut worst: f64 = 0.0;
        let mut probe = p.clone();
        for (i, &a) in g.encoder.flat().iter().enumerate() {
            let orig = p.encoder.param(i);
            probe.encoder.set_param(i, orig + 1e-6);
            let lp = loss(&probe);
            probe.encoder.set_param(i, orig - 1e-6);
            let lm = loss(&probe);
            probe.encoder.set_param(i, orig);
            worst = worst.max(crate::nn::relative_error(a, (lp - lm) / 2e-6));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn encoder_only_step_keeps_trunk() {
        let mut p = policy(ActionSpace::Continuous(2));
        let trunk = p.trunk.clone();
        let ls = p.log_std().to_vec();
        let obs = vec![0.1; 8];
        let (_, cache) = p.forward(&obs).unwrap();
        let mut g = p.zero_grads();
        p.backward_accumulate(&cache, &[1.0, 1.0], &mut g).unwrap();
        g.log_std = vec![1.0, 1.0];
        p.adam_step(&g, 1e-2, &AdamConfig::default(), Trainable::EncoderOnly).unwrap();
        assert_eq!(p.trunk, trunk);
        assert_eq!(p.log_std(), &ls[..]);
    }

    #[test]
    fn policy_json_round_trip_is_bit_exact() {
        let p = policy(ActionSpace::Continuous(2));
        let j = serde_json::to_string(&p).unwrap();
        let q: Policy = serde_json::from_str(&j).unwrap();
        q.validate().unwrap();
        let obs: Vec<f64> = (0..8).map(|i| (i as f64).cos() * 1.3).collect();
        assert_eq!(p.output(&obs).unwrap(), q.output(&obs).unwrap());
        assert_eq!(p, q);
    }
}
