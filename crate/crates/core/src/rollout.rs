//! Trajectory collection, risk-adjusted advantages and critic targets.

use serde::{Deserialize, Serialize};

use crate::envs::{
    curriculum_update, Action, Env, EnvConfig, ObsStack, Outcome, StepResult, TerminationCause,
};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::Policy;
use crate::quantile::dist_mean;
use crate::risk::{distorted_value_slice, Metric, RiskSpec};
use crate::seed::{Seed, StreamRng, STREAM_BETA};

/// Source of the per-episode risk parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum BetaSampler {
    /// Uniform over the metric's training range.
    Training(Metric),
    Fixed(f64),
}

impl BetaSampler {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            BetaSampler::Training(m) => m.sample_beta(rng),
            BetaSampler::Fixed(b) => *b,
        }
    }
}

/// How a worker chooses the level of each new episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "lowercase")]
pub enum LevelMode {
    /// Start at 0 and follow the success/failure curriculum.
    Curriculum,
    /// Always reset at this level (at the top level this samples uniformly).
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub env: usize,
    pub beta: f64,
    pub level: usize,
    pub effective_level: usize,
    pub ret: f64,
    pub length: usize,
    pub cause: TerminationCause,
    pub success: bool,
    /// Cumulative reward per term, aligned with the task's term names.
    pub terms: Vec<f64>,
}

/// One environment instance with its observation stacks, risk parameter and
/// episode bookkeeping.
#[derive(Clone, Debug)]
pub struct Worker {
    pub index: usize,
    env: Env,
    terms: Vec<&'static str>,
    teacher_stack: ObsStack,
    student_stack: ObsStack,
    rest: Vec<f64>,
    beta: f64,
    sampler: BetaSampler,
    beta_rng: StreamRng,
    levels: LevelMode,
    level: usize,
    ep_return: f64,
    ep_len: usize,
    ep_terms: Vec<f64>,
}

impl Worker {
    pub fn new(config: &EnvConfig, seed: Seed, index: usize, sampler: BetaSampler, levels: LevelMode) -> Result<Self> {
        let env = Env::new(config.clone(), seed)?;
        let terms = config.term_names();
        let level = match levels {
            LevelMode::Curriculum => 0,
            LevelMode::Fixed(l) => l,
        };
        let mut w = Self {
            index,
            teacher_stack: ObsStack::new(config.stack),
            student_stack: ObsStack::new(config.stack),
            rest: Vec::new(),
            beta: 0.0,
            sampler,
            beta_rng: seed.stream(STREAM_BETA).rng(),
            levels,
            level,
            ep_return: 0.0,
            ep_len: 0,
            ep_terms: vec![0.0; terms.len()],
            terms,
            env,
        };
        w.begin_episode()?;
        Ok(w)
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn term_names(&self) -> &[&'static str] {
        &self.terms
    }

    fn begin_episode(&mut self) -> Result<()> {
        self.beta = self.sampler.sample(&mut self.beta_rng);
        self.env.reset(self.level)?;
        self.ep_return = 0.0;
        self.ep_len = 0;
        self.ep_terms.iter_mut().for_each(|x| *x = 0.0);
        self.observe(true);
        Ok(())
    }

    fn observe(&mut self, fresh: bool) {
        let t = self.env.teacher_extero();
        let s = self.env.student_extero();
        self.rest = self.env.rest(self.beta);
        if fresh {
            self.teacher_stack.reset(&t);
            self.student_stack.reset(&s);
        } else {
            self.teacher_stack.push(&t);
            self.student_stack.push(&s);
        }
    }

    /// `[stacked teacher extero | rest]` for the current state.
    pub fn teacher_input(&self) -> Vec<f64> {
        let mut o = self.teacher_stack.stacked();
        o.extend_from_slice(&self.rest);
        o
    }

    /// `[stacked student extero | rest]`; shares `rest` with the teacher view.
    pub fn student_input(&self) -> Vec<f64> {
        let mut o = self.student_stack.stacked();
        o.extend_from_slice(&self.rest);
        o
    }

    pub fn critic_input(&self) -> Vec<f64> {
        self.env.observe_critic()
    }

    /// Steps the environment. A finished episode is summarised, the
    /// curriculum updated and a new episode started with a fresh `beta`.
    pub fn step(&mut self, action: &Action) -> Result<(StepResult, Option<EpisodeSummary>)> {
        let r = self.env.step(action)?;
        self.ep_return += r.reward_total;
        self.ep_len += 1;
        for (acc, name) in self.ep_terms.iter_mut().zip(&self.terms) {
            *acc += r.reward_terms[*name];
        }
        if !r.terminated {
            self.observe(false);
            return Ok((r, None));
        }
        let st = self.env.state();
        let summary = EpisodeSummary {
            env: self.index,
            beta: self.beta,
            level: st.level,
            effective_level: st.effective_level,
            ret: self.ep_return,
            length: self.ep_len,
            cause: r.cause,
            success: st.episode_success,
            terms: self.ep_terms.clone(),
        };
        if let LevelMode::Curriculum = self.levels {
            let outcome = if st.episode_success {
                Outcome::Success
            } else {
                Outcome::Failure
            };
            self.level = curriculum_update(self.level, self.env.task().max_level(), outcome);
        }
        self.begin_episode()?;
        Ok((r, Some(summary)))
    }
}

/// A fixed set of workers stepped in index order.
#[derive(Clone, Debug)]
pub struct EnvPool {
    pub workers: Vec<Worker>,
}

impl EnvPool {
    pub fn new(config: &EnvConfig, count: usize, seed: Seed, sampler: BetaSampler, levels: LevelMode) -> Result<Self> {
        let workers = (0..count)
            .map(|i| Worker::new(config, seed.index(i as u64), i, sampler, levels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { workers })
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn mean_level(&self) -> f64 {
        self.workers.iter().map(|w| w.level as f64).sum::<f64>() / self.workers.len().max(1) as f64
    }

    pub fn set_reward_weight(&mut self, term: &str, weight: f64) -> Result<()> {
        for w in &mut self.workers {
            w.env.set_reward_weight(term, weight)?;
        }
        Ok(())
    }
}

/// Transitions stored env-major: index `env * steps + t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub obs: Vec<Vec<f64>>,
    pub critic_obs: Vec<Vec<f64>>,
    pub betas: Vec<f64>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    /// Policy output (mean or logits) at collection time.
    pub old_out: Vec<Vec<f64>>,
    /// Log-std at collection time (empty for categorical heads).
    pub old_log_std: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub causes: Vec<TerminationCause>,
    /// Critic quantiles of each visited state.
    pub values: Vec<Vec<f64>>,
    /// Critic quantiles of each env's state after the last step.
    pub bootstrap: Vec<Vec<f64>>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn idx(&self, env: usize, t: usize) -> usize {
        env * self.steps + t
    }
}

fn finite_or_abort(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} during rollout")))
    }
}

/// Steps every worker `steps` times with actions sampled from `policy` on the
/// teacher view, evaluating `critic` on the noise-free critic view.
pub fn collect(
    policy: &Policy,
    critic: &Mlp,
    pool: &mut EnvPool,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<RolloutBatch> {
    let n = pool.len();
    let total = n * steps;
    let mut per_env: Vec<Vec<usize>> = vec![Vec::with_capacity(steps); n];
    let mut b = RolloutBatch {
        num_envs: n,
        steps,
        old_log_std: policy.log_std().to_vec(),
        ..Default::default()
    };
    let mut obs = Vec::with_capacity(total);
    let mut critic_obs = Vec::with_capacity(total);
    let mut betas = Vec::with_capacity(total);
    let mut actions = Vec::with_capacity(total);
    let mut log_probs = Vec::with_capacity(total);
    let mut old_out = Vec::with_capacity(total);
    let mut rewards = Vec::with_capacity(total);
    let mut dones = Vec::with_capacity(total);
    let mut causes = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for _ in 0..steps {
        for (e, w) in pool.workers.iter_mut().enumerate() {
            let o = w.teacher_input();
            let c = w.critic_input();
            let z = critic.predict(&c)?;
            finite_or_abort(&z, "critic value")?;
            let (a, lp, out) = policy.sample(&o, rng)?;
            let beta = w.beta();
            let (r, ep) = w.step(&a)?;
            per_env[e].push(obs.len());
            obs.push(o);
            critic_obs.push(c);
            betas.push(beta);
            actions.push(a);
            log_probs.push(lp);
            old_out.push(out);
            rewards.push(r.reward_total);
            dones.push(r.terminated);
            causes.push(r.cause);
            values.push(z);
            if let Some(ep) = ep {
                b.episodes.push(ep);
            }
        }
    }
    // reorder from step-major to env-major
    let order: Vec<usize> = per_env.into_iter().flatten().collect();
    fn take<T: Clone>(v: &[T], order: &[usize]) -> Vec<T> {
        order.iter().map(|&i| v[i].clone()).collect()
    }
    b.obs = take(&obs, &order);
    b.critic_obs = take(&critic_obs, &order);
    b.betas = take(&betas, &order);
    b.actions = take(&actions, &order);
    b.log_probs = take(&log_probs, &order);
    b.old_out = take(&old_out, &order);
    b.rewards = take(&rewards, &order);
    b.dones = take(&dones, &order);
    b.causes = take(&causes, &order);
    b.values = take(&values, &order);
    b.bootstrap = pool
        .workers
        .iter()
        .map(|w| {
            let z = critic.predict(&w.critic_input())?;
            finite_or_abort(&z, "bootstrap value")?;
            Ok(z)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(b)
}

fn risk_spec(metric: Metric, beta: f64) -> Result<RiskSpec> {
    RiskSpec::new(metric, beta)
}

/// GAE on distorted state values `V_beta(s) = distorted_value(Z(s), beta)`
/// with each transition's own episode `beta`. Returns the advantages before
/// normalisation.
pub fn risk_advantages_raw(b: &RolloutBatch, metric: Metric, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let mut adv = vec![0.0; b.len()];
    for e in 0..b.num_envs {
        let last = b.idx(e, b.steps - 1);
        let spec = risk_spec(metric, b.betas[last])?;
        let mut next_v = distorted_value_slice(&b.bootstrap[e], &spec);
        let mut gae = 0.0;
        for t in (0..b.steps).rev() {
            let i = b.idx(e, t);
            let spec = risk_spec(metric, b.betas[i])?;
            let v = distorted_value_slice(&b.values[i], &spec);
            let not_done = if b.dones[i] { 0.0 } else { 1.0 };
            let delta = b.rewards[i] + gamma * next_v * not_done - v;
            gae = delta + gamma * lambda * not_done * gae;
            adv[i] = gae;
            next_v = v;
        }
    }
    Ok(adv)
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Risk-adjusted advantages normalised per batch.
pub fn risk_advantages(b: &RolloutBatch, metric: Metric, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    Ok(normalize(&risk_advantages_raw(b, metric, gamma, lambda)?))
}

/// Backward TD(lambda) returns with risk-neutral bootstraps:
/// `G_t = r_t + gamma (1 - d_t) [(1 - lambda) mean Z(s_{t+1}) + lambda G_{t+1}]`,
/// where the value after the last step is the bootstrap mean.
pub fn lambda_return_targets(b: &RolloutBatch, gamma: f64, lambda: f64) -> Vec<f64> {
    let mut g = vec![0.0; b.len()];
    for e in 0..b.num_envs {
        let mut next_v = dist_mean(&b.bootstrap[e]);
        let mut next_g = next_v;
        for t in (0..b.steps).rev() {
            let i = b.idx(e, t);
            let not_done = if b.dones[i] { 0.0 } else { 1.0 };
            g[i] = b.rewards[i] + gamma * not_done * ((1.0 - lambda) * next_v + lambda * next_g);
            next_g = g[i];
            next_v = dist_mean(&b.values[i]);
        }
    }
    g
}
