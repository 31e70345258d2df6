//! DAgger distillation of a privileged teacher into a student that only sees
//! the non-privileged ray scan.
//!
//! Phase A steps the environments with teacher actions for a number of
//! episodes and trains only the student's encoder. Phase B steps them with
//! student actions, labels every visited state with the teacher and trains
//! all student parameters. Both phases aggregate into one replay buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, Metadata, FORMAT_VERSION};
use crate::envs::{obs_dims, Action, ActionSpace, EnvConfig};
use crate::error::{config_err, ensure_dim, Error, Result};
use crate::nn::{AdamConfig, Mlp};
use crate::policy::{NetworkConfig, ObsLayout, Policy, Trainable};
use crate::rollout::{BetaSampler, EnvPool, LevelMode, Worker};
use crate::seed::{Seed, STREAM_INIT, STREAM_MINIBATCH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher-driven episodes before switching to the student.
    pub warmup_episodes: usize,
    /// Student-driven rounds after the warmup. Zero gives the Phase-A-only
    /// ablation.
    pub rounds: usize,
    /// Environment steps per worker between updates, in both phases.
    pub steps_per_round: usize,
    pub num_envs: usize,
    pub lr: f64,
    pub minibatch: usize,
    pub updates_per_round: usize,
    /// Oldest samples are overwritten beyond this size.
    pub buffer_capacity: usize,
    /// Rounds between held-out validations; 0 validates only at the end.
    pub validate_every: usize,
    pub validation_episodes: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            warmup_episodes: 100,
            rounds: 60,
            steps_per_round: 32,
            num_envs: 16,
            lr: 1e-3,
            minibatch: 128,
            updates_per_round: 32,
            buffer_capacity: 100_000,
            validate_every: 10,
            validation_episodes: 32,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err("distill.lr must be positive"));
        }
        for (name, v) in [
            ("steps_per_round", self.steps_per_round),
            ("num_envs", self.num_envs),
            ("minibatch", self.minibatch),
            ("buffer_capacity", self.buffer_capacity),
        ] {
            if v == 0 {
                return Err(config_err(format!("distill.{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn student_layout(env: &EnvConfig) -> ObsLayout {
    let d = obs_dims(env);
    ObsLayout {
        extero: d.student_extero,
        stack: env.stack,
        rest: d.rest,
    }
}

/// Student with a fresh scan encoder of the teacher's feature width and the
/// teacher's trunk and head copied over. Optimiser state starts from zero.
pub fn init_student<R: Rng + ?Sized>(teacher: &Policy, env: &EnvConfig, net: &NetworkConfig, rng: &mut R) -> Result<Policy> {
    let layout = student_layout(env);
    ensure_dim("teacher rest width", layout.rest, teacher.layout.rest)?;
    let features = teacher.encoder.spec().output_dim();
    let net = NetworkConfig {
        features,
        ..net.clone()
    };
    let mut encoder = Mlp::init(net.encoder_spec(layout.stacked_extero())?, 1.0, rng)?;
    encoder.reset_optimizer();
    let mut trunk = teacher.trunk.clone();
    trunk.reset_optimizer();
    let mut head = teacher.head.clone();
    if let crate::policy::Head::Gaussian { log_std } = &mut head {
        log_std.adam = crate::nn::AdamMoments::zeros(log_std.values.len());
        log_std.step_count = 0;
    }
    let student = Policy {
        layout,
        encoder,
        trunk,
        head,
    };
    student.validate()?;
    Ok(student)
}

/// Deterministic teacher label: the mean action.
pub fn teacher_label(teacher: &Policy, teacher_obs: &[f64]) -> Result<Vec<f64>> {
    match teacher.mean_action(teacher_obs)? {
        Action::Continuous(a) => Ok(a),
        Action::Discrete(_) => Err(Error::Unsupported("distillation needs a continuous action head".into())),
    }
}

/// Mean squared error over action dimensions.
pub fn action_mse(student: &[f64], teacher: &[f64]) -> f64 {
    student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / student.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub round: usize,
    pub phase: Phase,
    pub episodes: usize,
    pub buffer: usize,
    pub train_mse: f64,
    pub validation_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<DistillLog>,
    pub heldout_mse: f64,
}

struct Buffer {
    obs: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
    capacity: usize,
    next: usize,
}

impl Buffer {
    fn push(&mut self, obs: Vec<f64>, label: Vec<f64>) {
        if self.obs.len() < self.capacity {
            self.obs.push(obs);
            self.labels.push(label);
        } else {
            self.obs[self.next] = obs;
            self.labels[self.next] = label;
        }
        self.next = (self.next + 1) % self.capacity;
    }
}

/// Regression steps on uniformly sampled minibatches; returns the mean loss.
fn fit<R: Rng + ?Sized>(
    student: &mut Policy,
    buf: &Buffer,
    cfg: &DistillConfig,
    which: Trainable,
    rng: &mut R,
) -> Result<f64> {
    let adam = AdamConfig::default();
    let mut total = 0.0;
    for _ in 0..cfg.updates_per_round {
        let mut grads = student.zero_grads();
        let mut loss = 0.0;
        let n = cfg.minibatch;
        for _ in 0..n {
            let i = rng.random_range(0..buf.obs.len());
            let (out, cache) = student.forward(&buf.obs[i])?;
            let label = &buf.labels[i];
            let d = out.len() as f64;
            loss += action_mse(&out, label);
            let g: Vec<f64> = out.iter().zip(label).map(|(s, t)| 2.0 * (s - t) / (d * n as f64)).collect();
            student.backward_accumulate(&cache, &g, &mut grads)?;
        }
        if !grads.sq_norm().is_finite() {
            return Err(Error::NonFinite("distillation gradient".into()));
        }
        student.adam_step(&grads, cfg.lr, &adam, which)?;
        total += loss / n as f64;
    }
    Ok(total / cfg.updates_per_round.max(1) as f64)
}

/// Action MSE on states visited by the student itself, on environment seeds
/// disjoint from training.
pub fn heldout_mse(
    teacher: &Policy,
    student: &Policy,
    env: &EnvConfig,
    sampler: BetaSampler,
    episodes: usize,
    seed: Seed,
) -> Result<f64> {
    let level = env.task.max_level();
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..episodes {
        let mut w = Worker::new(env, seed.index(k as u64), k, sampler, LevelMode::Fixed(level))?;
        loop {
            let label = teacher_label(teacher, &w.teacher_input())?;
            let out = student.output(&w.student_input())?;
            sum += action_mse(&out, &label);
            count += 1;
            let (_, done) = w.step(&Action::Continuous(out))?;
            if done.is_some() {
                break;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

pub fn student_checkpoint(teacher: &Checkpoint, teacher_sha256: &str, student: &Policy, iteration: usize) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Student,
        metadata: Metadata {
            iteration,
            teacher_sha256: Some(teacher_sha256.to_string()),
            ..teacher.metadata.clone()
        },
        policy: student.clone(),
        critic: None,
    }
}

/// Runs both distillation phases. `on_round` receives each log record.
pub fn dagger_distill(
    teacher_ck: &Checkpoint,
    net: &NetworkConfig,
    cfg: &DistillConfig,
    mut on_round: impl FnMut(&DistillLog) -> Result<()>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if teacher_ck.kind != CheckpointKind::Teacher {
        return Err(config_err("distillation needs a teacher checkpoint"));
    }
    teacher_ck.validate()?;
    let teacher = &teacher_ck.policy;
    if !matches!(teacher.action_space(), ActionSpace::Continuous(_)) {
        return Err(Error::Unsupported(format!(
            "distillation needs a continuous action head; task {} is discrete",
            teacher_ck.metadata.task
        )));
    }
    let env = &teacher_ck.metadata.env;
    let seed = Seed(cfg.seed);
    let mut student = init_student(teacher, env, net, &mut seed.stream(STREAM_INIT).rng())?;
    let sampler = BetaSampler::Training(teacher_ck.metadata.metric);
    let level = env.task.max_level();
    let mut pool = EnvPool::new(env, cfg.num_envs, seed.stream("envs"), sampler, LevelMode::Fixed(level))?;
    let mut rng = seed.stream(STREAM_MINIBATCH).rng();
    let val_seed = seed.stream("validation");
    let mut buf = Buffer {
        obs: Vec::new(),
        labels: Vec::new(),
        capacity: cfg.buffer_capacity,
        next: 0,
    };
    let mut logs = Vec::new();
    let mut episodes = 0;
    let mut round = 0;
    let mut phase = if cfg.warmup_episodes > 0 { Phase::A } else { Phase::B };
    let mut b_rounds = 0;
    let teacher_sha = teacher_ck.sha256()?;
    loop {
        if phase == Phase::B && b_rounds >= cfg.rounds {
            break;
        }
        for _ in 0..cfg.steps_per_round {
            for w in &mut pool.workers {
                let label = teacher_label(teacher, &w.teacher_input())?;
                let s_obs = w.student_input();
                let action = match phase {
                    Phase::A => label.clone(),
                    Phase::B => student.output(&s_obs)?,
                };
                buf.push(s_obs, label);
                let (_, done) = w.step(&Action::Continuous(action))?;
                if done.is_some() {
                    episodes += 1;
                }
            }
        }
        let which = match phase {
            Phase::A => Trainable::EncoderOnly,
            Phase::B => Trainable::All,
        };
        let train_mse = fit(&mut student, &buf, cfg, which, &mut rng)?;
        if phase == Phase::B {
            b_rounds += 1;
        }
        let validate = cfg.validate_every > 0 && (round + 1) % cfg.validate_every == 0;
        let validation_mse = if validate {
            Some(heldout_mse(teacher, &student, env, sampler, cfg.validation_episodes, val_seed)?)
        } else {
            None
        };
        let log = DistillLog {
            round,
            phase,
            episodes,
            buffer: buf.obs.len(),
            train_mse,
            validation_mse,
        };
        on_round(&log)?;
        logs.push(log);
        round += 1;
        if phase == Phase::A && episodes >= cfg.warmup_episodes {
            phase = Phase::B;
        }
    }
    let heldout = heldout_mse(teacher, &student, env, sampler, cfg.validation_episodes, val_seed)?;
    Ok(DistillOutcome {
        checkpoint: student_checkpoint(teacher_ck, &teacher_sha, &student, round),
        logs,
        heldout_mse: heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;
    use crate::trainer::{init_teacher, teacher_checkpoint, TeacherSetup, TrainerConfig};

    fn teacher() -> (TeacherSetup, Checkpoint) {
        let setup = TeacherSetup {
            env: EnvConfig::for_task(Task::RiskyNav),
            trainer: TrainerConfig::default(),
            network: NetworkConfig {
                encoder_hidden: vec![16],
                features: 8,
                trunk_hidden: vec![16],
                critic_hidden: vec![16],
                ..NetworkConfig::default()
            },
            seed: 4,
        };
        let (mut p, c) = init_teacher(&setup).unwrap();
        // larger trunk output so labels are not all near zero
        let last = p.trunk.layers_mut().len() - 1;
        p.trunk.layers_mut()[last].weight.iter_mut().for_each(|w| *w *= 50.0);
        let ck = teacher_checkpoint(&setup, &setup.env, &p, &c, 0);
        (setup, ck)
    }

    #[test]
    fn student_copies_trunk_and_gets_fresh_encoder() {
        let (setup, ck) = teacher();
        let mut rng = Seed(1).rng();
        let s = init_student(&ck.policy, &setup.env, &setup.network, &mut rng).unwrap();
        assert_eq!(s.trunk.flat_params(), ck.policy.trunk.flat_params());
        assert_eq!(s.encoder.spec().output_dim(), ck.policy.encoder.spec().output_dim());
        assert_ne!(s.encoder.spec().input_dim(), ck.policy.encoder.spec().input_dim());

        // injecting the teacher's features reproduces the teacher exactly
        let mut w = Worker::new(&setup.env, Seed(2), 0, BetaSampler::Fixed(0.5), LevelMode::Fixed(9)).unwrap();
        for _ in 0..5 {
            let t_obs = w.teacher_input();
            let (ext, rest) = ck.policy.layout.split(&t_obs);
            let f = ck.policy.features(ext).unwrap();
            let label = teacher_label(&ck.policy, &t_obs).unwrap();
            let out = s.output_from_features(&f, rest).unwrap();
            assert_eq!(action_mse(&out, &label), 0.0);
            w.step(&Action::Continuous(label)).unwrap();
        }
    }

    #[test]
    fn mse_is_plain_mean_over_dimensions() {
        assert_eq!(action_mse(&[1.0, 3.0], &[0.0, 0.0]), 5.0);
        assert_eq!(action_mse(&[0.5, -0.5, 1.0], &[0.5, 0.5, 0.0]), 2.0 / 3.0);
    }

    #[test]
    fn labels_are_deterministic_means() {
        let (setup, ck) = teacher();
        let w = Worker::new(&setup.env, Seed(2), 0, BetaSampler::Fixed(-0.3), LevelMode::Fixed(9)).unwrap();
        let o = w.teacher_input();
        let a = teacher_label(&ck.policy, &o).unwrap();
        assert_eq!(a, teacher_label(&ck.policy, &o).unwrap());
        assert_eq!(a, ck.policy.output(&o).unwrap());
    }

    #[test]
    fn student_and_teacher_see_the_same_beta() {
        let (setup, _) = teacher();
        let w = Worker::new(&setup.env, Seed(9), 0, BetaSampler::Fixed(0.7), LevelMode::Fixed(9)).unwrap();
        let t = w.teacher_input();
        let s = w.student_input();
        assert_eq!(t.last(), Some(&0.7));
        assert_eq!(s.last(), Some(&0.7));
    }

    #[test]
    fn warmup_freezes_trunk_and_runs_reproduce() {
        let (setup, ck) = teacher();
        let cfg = DistillConfig {
            warmup_episodes: 8,
            rounds: 0,
            steps_per_round: 16,
            num_envs: 4,
            updates_per_round: 8,
            minibatch: 32,
            validate_every: 0,
            validation_episodes: 4,
            ..DistillConfig::default()
        };
        let a_only = dagger_distill(&ck, &setup.network, &cfg, |_| Ok(())).unwrap();
        assert_eq!(a_only.checkpoint.policy.trunk.flat_params(), ck.policy.trunk.flat_params());
        assert!(a_only.logs.iter().all(|l| l.phase == Phase::A));
        assert_eq!(a_only.checkpoint.metadata.teacher_sha256, Some(ck.sha256().unwrap()));
        assert_eq!(a_only.checkpoint.kind, CheckpointKind::Student);
        a_only.checkpoint.validate().unwrap();

        let full = dagger_distill(&ck, &setup.network, &DistillConfig { rounds: 10, ..cfg.clone() }, |_| Ok(())).unwrap();
        assert!(full.logs.iter().any(|l| l.phase == Phase::B));
        assert_ne!(full.checkpoint.policy.trunk.flat_params(), ck.policy.trunk.flat_params());
        let again = dagger_distill(&ck, &setup.network, &DistillConfig { rounds: 10, ..cfg }, |_| Ok(())).unwrap();
        assert_eq!(again.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn discrete_teacher_is_rejected() {
        let setup = TeacherSetup {
            env: EnvConfig::for_task(Task::CliffSlip),
            trainer: TrainerConfig::for_task(Task::CliffSlip),
            network: NetworkConfig::default(),
            seed: 1,
        };
        let (p, c) = init_teacher(&setup).unwrap();
        let ck = teacher_checkpoint(&setup, &setup.env, &p, &c, 0);
        assert!(matches!(
            dagger_distill(&ck, &setup.network, &DistillConfig::default(), |_| Ok(())),
            Err(Error::Unsupported(_))
        ));
    }
}
