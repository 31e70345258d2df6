//! PPO on risk-adjusted advantages with a risk-neutral quantile critic.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, Metadata, FORMAT_VERSION};
use crate::envs::{obs_dims, EnvConfig, Task, TerminationCause};
use crate::error::{config_err, Error, Result};
use crate::nn::{AdamConfig, Mlp, MlpGrads};
use crate::policy::{new_critic, NetworkConfig, ObsLayout, Policy, PolicyGrads, Trainable};
use crate::quantile::pinball_loss;
use crate::risk::Metric;
use crate::rollout::{collect, lambda_return_targets, risk_advantages, BetaSampler, EnvPool, LevelMode, RolloutBatch};
use crate::seed::{Seed, StreamRng, STREAM_ACTION, STREAM_INIT, STREAM_MINIBATCH};

/// Sets the weight of reward `term` at the start of `iteration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub iteration: usize,
    pub term: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub metric: Metric,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub adaptive_lr: bool,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    /// Weight of the entropy bonus; a negative value penalises entropy.
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub target_kl: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub num_envs: usize,
    pub steps: usize,
    pub quantiles: usize,
    /// Huber threshold of the quantile loss; 0 gives the plain pinball loss.
    pub huber_kappa: f64,
    pub iterations: usize,
    pub reward_schedule: Vec<ScheduleEntry>,
    /// Level handling during training.
    pub levels: LevelMode,
    /// Save an intermediate checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Wang,
            lr: 1e-3,
            lr_min: 1e-5,
            lr_max: 1e-2,
            adaptive_lr: true,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 1e-3,
            value_coef: 0.9,
            max_grad_norm: 1.0,
            target_kl: 0.01,
            epochs: 5,
            minibatches: 4,
            num_envs: 64,
            steps: 96,
            quantiles: 32,
            huber_kappa: 0.0,
            iterations: 300,
            reward_schedule: Vec::new(),
            levels: LevelMode::Curriculum,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    /// Defaults with the per-task overrides applied.
    pub fn for_task(task: Task) -> Self {
        let base = Self::default();
        match task {
            Task::CliffSlip => Self {
                gamma: 0.95,
                metric: Metric::Neutral,
                ..base
            },
            Task::RiskyNav => Self { iterations: 500, ..base },
            Task::GrabHold => Self {
                clip: 0.15,
                value_coef: 0.7,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lr", self.lr),
            ("lr_min", self.lr_min),
            ("lr_max", self.lr_max),
            ("gamma", self.gamma),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("target_kl", self.target_kl),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("trainer.{name} must be positive")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(config_err("trainer.lr_min must not exceed trainer.lr_max"));
        }
        if self.gamma > 1.0 || !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err("trainer.gamma must lie in (0, 1] and lambda in [0, 1]"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(config_err("trainer.clip must lie in (0, 1)"));
        }
        if !self.entropy_coef.is_finite() || !(self.huber_kappa >= 0.0) {
            return Err(config_err("trainer.entropy_coef must be finite and huber_kappa >= 0"));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.num_envs == 0 || self.steps == 0 {
            return Err(config_err("trainer epochs, minibatches, num_envs and steps must be >= 1"));
        }
        if self.minibatches > self.num_envs * self.steps {
            return Err(config_err("trainer.minibatches exceeds the batch size"));
        }
        if !(1..=200).contains(&self.quantiles) {
            return Err(config_err("trainer.quantiles must lie in 1..=200"));
        }
        Ok(())
    }
}

/// Outcome of one PPO update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean `KL(old || current)` over the last epoch.
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-sample surrogate pieces for a minibatch element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surrogate {
    pub ratio: f64,
    /// `-min(r A, clip(r) A)`.
    pub loss: f64,
    /// `d loss / d log_prob_new`.
    pub dloss_dlogp: f64,
    pub clipped: bool,
}

/// Clipped PPO surrogate for one transition.
pub fn clipped_surrogate(log_prob_new: f64, log_prob_old: f64, advantage: f64, clip: f64) -> Surrogate {
    let ratio = (log_prob_new - log_prob_old).exp();
    let unclipped = ratio * advantage;
    let clipped_val = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    let active = clipped_val < unclipped;
    Surrogate {
        ratio,
        loss: -unclipped.min(clipped_val),
        dloss_dlogp: if active { 0.0 } else { -unclipped },
        clipped: (ratio - 1.0).abs() > clip,
    }
}

/// Adaptive learning-rate rule applied after each epoch.
pub fn adapt_lr(lr: f64, kl: f64, cfg: &TrainerConfig) -> f64 {
    if !cfg.adaptive_lr {
        return lr;
    }
    let next = if kl > 2.0 * cfg.target_kl {
        lr / 1.5
    } else if kl < cfg.target_kl / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(cfg.lr_min, cfg.lr_max)
}

fn clip_grads(p: &mut PolicyGrads, c: &mut MlpGrads, max_norm: f64) -> f64 {
    let norm = (p.sq_norm() + c.sq_norm()).sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        p.scale(s);
        c.scale(s);
    }
    norm
}

/// Runs `epochs` passes of shuffled minibatch updates. Parameters are only
/// committed when every step stayed finite; otherwise they are left untouched
/// and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut Policy,
    critic: &mut Mlp,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[f64],
    cfg: &TrainerConfig,
    lr: &mut f64,
    rng: &mut StreamRng,
) -> Result<UpdateStats> {
    let n = batch.len();
    if advantages.len() != n || targets.len() != n {
        return Err(Error::Contract("advantages and targets must align with the batch".into()));
    }
    let mut p = policy.clone();
    let mut c = critic.clone();
    let mut cur_lr = *lr;
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut pg = p.zero_grads();
    let mut cg = MlpGrads::zeros_like(c.spec());
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut kl_sum = 0.0;
        let mut clip_count = 0usize;
        let (mut pl_sum, mut vl_sum, mut ent_sum, mut gn_sum) = (0.0, 0.0, 0.0, 0.0);
        let mb = n.div_ceil(cfg.minibatches);
        let mut chunks = 0usize;
        for chunk in order.chunks(mb) {
            chunks += 1;
            pg.fill_zero();
            cg.fill_zero();
            let m = chunk.len() as f64;
            let (mut pl, mut vl, mut ent, mut kl) = (0.0, 0.0, 0.0, 0.0);
            for &i in chunk {
                let (out, cache) = p.forward(&batch.obs[i])?;
                let h = p.head.terms(&out, &batch.actions[i])?;
                let s = clipped_surrogate(h.log_prob, batch.log_probs[i], advantages[i], cfg.clip);
                pl += s.loss;
                ent += h.entropy;
                kl += p.head.kl_from(&batch.old_out[i], &batch.old_log_std, &out);
                if s.clipped {
                    clip_count += 1;
                }
                let gout: Vec<f64> = h
                    .dlogp_dout
                    .iter()
                    .zip(&h.dent_dout)
                    .map(|(dl, de)| (s.dloss_dlogp * dl - cfg.entropy_coef * de) / m)
                    .collect();
                p.backward_accumulate(&cache, &gout, &mut pg)?;
                for ((g, dl), de) in pg.log_std.iter_mut().zip(&h.dlogp_dlogstd).zip(&h.dent_dlogstd) {
                    *g += (s.dloss_dlogp * dl - cfg.entropy_coef * de) / m;
                }

                let (z, ccache) = c.forward(&batch.critic_obs[i])?;
                let (loss, dz) = pinball_loss(&z, &targets[i..=i], cfg.huber_kappa)?;
                vl += loss;
                let dz: Vec<f64> = dz.iter().map(|g| cfg.value_coef * g / m).collect();
                c.backward_accumulate(&ccache, &dz, &mut cg)?;
            }
            let total = (pl - cfg.entropy_coef * ent + cfg.value_coef * vl) / m;
            if !total.is_finite() {
                return Err(Error::NonFinite("ppo loss".into()));
            }
            gn_sum += clip_grads(&mut pg, &mut cg, cfg.max_grad_norm);
            p.adam_step(&pg, cur_lr, &adam, Trainable::All)?;
            c.adam_step(&cg, cur_lr, &adam)?;
            pl_sum += pl;
            vl_sum += vl;
            ent_sum += ent;
            kl_sum += kl;
        }
        let nf = n as f64;
        stats = UpdateStats {
            policy_loss: pl_sum / nf,
            value_loss: vl_sum / nf,
            entropy: ent_sum / nf,
            kl: kl_sum / nf,
            clip_fraction: clip_count as f64 / nf,
            lr: cur_lr,
            grad_norm: gn_sum / chunks as f64,
        };
        cur_lr = adapt_lr(cur_lr, stats.kl, cfg);
    }
    *policy = p;
    *critic = c;
    *lr = cur_lr;
    stats.lr = cur_lr;
    Ok(stats)
}

/// One JSON-lines record per training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub collision_rate: Option<f64>,
    pub object_lost_rate: Option<f64>,
    pub timeout_rate: Option<f64>,
    pub mean_level: f64,
    pub level_histogram: Vec<usize>,
    pub mean_batch_reward: f64,
    pub update: Option<UpdateStats>,
    pub aborted: bool,
    pub schedule_events: Vec<ScheduleEntry>,
}

/// Everything needed to train a teacher from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSetup {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub network: NetworkConfig,
    pub seed: u64,
}

pub fn teacher_layout(env: &EnvConfig) -> ObsLayout {
    let d = obs_dims(env);
    ObsLayout {
        extero: d.teacher_extero,
        stack: env.stack,
        rest: d.rest,
    }
}

/// Freshly initialised teacher policy and critic for `setup`.
pub fn init_teacher(setup: &TeacherSetup) -> Result<(Policy, Mlp)> {
    let mut rng = Seed(setup.seed).stream(STREAM_INIT).rng();
    let d = obs_dims(&setup.env);
    let policy = Policy::new(teacher_layout(&setup.env), setup.env.task.action_space(), &setup.network, &mut rng)?;
    let critic = new_critic(d.critic, setup.trainer.quantiles, &setup.network, &mut rng)?;
    Ok((policy, critic))
}

pub fn teacher_checkpoint(setup: &TeacherSetup, env: &EnvConfig, policy: &Policy, critic: &Mlp, iteration: usize) -> Checkpoint {
    let (lo, hi) = setup.trainer.metric.training_range();
    Checkpoint {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Teacher,
        metadata: Metadata {
            task: env.task,
            metric: setup.trainer.metric,
            beta_range: [lo, hi],
            seed: setup.seed,
            iteration,
            env: env.clone(),
            teacher_sha256: None,
        },
        policy: policy.clone(),
        critic: Some(critic.clone()),
    }
}

const MAX_CONSECUTIVE_ABORTS: usize = 3;

/// Trains a teacher. `on_iteration` receives every log record;
/// `on_checkpoint` receives intermediate checkpoints when configured.
/// Returns the final checkpoint.
pub fn train_teacher(
    setup: &TeacherSetup,
    mut on_iteration: impl FnMut(&IterationLog) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    setup.env.validate()?;
    setup.trainer.validate()?;
    setup.network.validate()?;
    let cfg = &setup.trainer;
    let mut env_cfg = setup.env.clone();
    let terms = env_cfg.term_names();
    for e in &cfg.reward_schedule {
        if !terms.contains(&e.term.as_str()) {
            return Err(config_err(format!("reward_schedule: unknown term `{}`", e.term)));
        }
    }
    if let LevelMode::Fixed(l) = cfg.levels {
        if l > env_cfg.task.max_level() {
            return Err(config_err(format!("trainer.levels: level {l} out of range")));
        }
    }
    let seed = Seed(setup.seed);
    let (mut policy, mut critic) = init_teacher(setup)?;
    let mut pool = EnvPool::new(&env_cfg, cfg.num_envs, seed.stream("envs"), BetaSampler::Training(cfg.metric), cfg.levels)?;
    let mut action_rng = seed.stream(STREAM_ACTION).rng();
    let mut mb_rng = seed.stream(STREAM_MINIBATCH).rng();
    let mut lr = cfg.lr;
    let mut aborts = 0;
    let levels = env_cfg.task.levels();
    for it in 0..cfg.iterations {
        let mut events = Vec::new();
        for e in cfg.reward_schedule.iter().filter(|e| e.iteration == it) {
            pool.set_reward_weight(&e.term, e.weight)?;
            env_cfg.reward_weights.insert(e.term.clone(), e.weight);
            events.push(e.clone());
        }
        let batch = collect(&policy, &critic, &mut pool, cfg.steps, &mut action_rng)?;
        let adv = risk_advantages(&batch, cfg.metric, cfg.gamma, cfg.lambda)?;
        let targets = lambda_return_targets(&batch, cfg.gamma, cfg.lambda);
        let (update, aborted) = match ppo_update(&mut policy, &mut critic, &batch, &adv, &targets, cfg, &mut lr, &mut mb_rng) {
            Ok(s) => {
                aborts = 0;
                (Some(s), false)
            }
            Err(Error::NonFinite(msg)) => {
                aborts += 1;
                if aborts >= MAX_CONSECUTIVE_ABORTS {
                    return Err(Error::NonFinite(format!("{msg}; {aborts} consecutive aborted iterations")));
                }
                (None, true)
            }
            Err(e) => return Err(e),
        };
        let log = iteration_log(it, &batch, &pool, levels, update, aborted, events);
        on_iteration(&log)?;
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
            on_checkpoint(&teacher_checkpoint(setup, &env_cfg, &policy, &critic, it + 1))?;
        }
    }
    Ok(teacher_checkpoint(setup, &env_cfg, &policy, &critic, cfg.iterations))
}

fn iteration_log(
    iteration: usize,
    batch: &RolloutBatch,
    pool: &EnvPool,
    levels: usize,
    update: Option<UpdateStats>,
    aborted: bool,
    schedule_events: Vec<ScheduleEntry>,
) -> IterationLog {
    let eps = &batch.episodes;
    let k = eps.len() as f64;
    let rate = |f: &dyn Fn(&crate::rollout::EpisodeSummary) -> bool| {
        (!eps.is_empty()).then(|| eps.iter().filter(|e| f(e)).count() as f64 / k)
    };
    let mut hist = vec![0; levels];
    for w in &pool.workers {
        hist[w.level()] += 1;
    }
    IterationLog {
        iteration,
        env_steps: batch.len(),
        episodes: eps.len(),
        mean_return: (!eps.is_empty()).then(|| eps.iter().map(|e| e.ret).sum::<f64>() / k),
        success_rate: rate(&|e| e.success),
        collision_rate: rate(&|e| e.cause == TerminationCause::Collision),
        object_lost_rate: rate(&|e| e.cause == TerminationCause::ObjectLost),
        timeout_rate: rate(&|e| e.cause == TerminationCause::Timeout),
        mean_level: pool.mean_level(),
        level_histogram: hist,
        mean_batch_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
        update,
        aborted,
        schedule_events,
    }
}
