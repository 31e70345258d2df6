//! Desk-scale risky environments.
//!
//! Three tasks share one [`Env`] wrapper:
//! * `cliffslip`: tabular grid with a cliff row and slippery moves.
//! * `riskynav`: continuous 2D navigation past a randomly walking obstacle.
//! * `grabhold`: planar grasp-carry-hold near a table edge.
//!
//! Every environment exposes three observation projections: the privileged
//! teacher-actor view, the student view (noisy ray scan) and the noise-free
//! critic view. Actor and student observations are laid out as
//! `[exteroception | rest]`, where `rest` has the same layout for both.
//!
//! Each instance owns three independent random streams: reset sampling,
//! dynamics and observation noise.

pub mod cliffslip;
pub mod geometry;
pub mod grabhold;
pub mod riskynav;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_dim, Error, Result};
use crate::seed::{Seed, StreamRng, STREAM_DYNAMICS, STREAM_NOISE, STREAM_RESET};

pub use cliffslip::{CliffSlipParams, CliffState};
pub use grabhold::{GrabHoldParams, GrabScene, GrabState};
pub use riskynav::{NavScene, NavState, RiskyNavParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    CliffSlip,
    RiskyNav,
    GrabHold,
}

impl Task {
    pub fn levels(self) -> usize {
        match self {
            Task::CliffSlip => 1,
            Task::RiskyNav => 10,
            Task::GrabHold => 20,
        }
    }

    pub fn max_level(self) -> usize {
        self.levels() - 1
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            Task::CliffSlip => ActionSpace::Discrete(4),
            Task::RiskyNav => ActionSpace::Continuous(2),
            Task::GrabHold => ActionSpace::Continuous(3),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::CliffSlip => "cliffslip",
            Task::RiskyNav => "riskynav",
            Task::GrabHold => "grabhold",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cliffslip" => Ok(Task::CliffSlip),
            "riskynav" => Ok(Task::RiskyNav),
            "grabhold" => Ok(Task::GrabHold),
            other => Err(config_err(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of the policy network output for this space.
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    Goal,
    Collision,
    ObjectLost,
    Timeout,
    None,
}

impl TerminationCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationCause::Goal => "goal",
            TerminationCause::Collision => "collision",
            TerminationCause::ObjectLost => "object_lost",
            TerminationCause::Timeout => "timeout",
            TerminationCause::None => "none",
        }
    }

    /// Terminations that count as task failure (not success, not timeout).
    pub fn is_failure(self) -> bool {
        matches!(self, TerminationCause::Collision | TerminationCause::ObjectLost)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward_total: f64,
    pub reward_terms: BTreeMap<String, f64>,
    pub terminated: bool,
    pub cause: TerminationCause,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// `+1` on success capped at `max_level`, `-1` on failure floored at zero.
pub fn curriculum_update(level: usize, max_level: usize, outcome: Outcome) -> usize {
    match outcome {
        Outcome::Success => (level + 1).min(max_level),
        Outcome::Failure => level.saturating_sub(1),
    }
}

/// Half-widths `a` of the additive `U(-a, a)` observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Student ray scan, metres.
    pub ray: f64,
    /// Masked dynamic-obstacle position seen by the teacher actor, metres.
    pub obstacle: f64,
    /// Masked object position, metres.
    pub object: f64,
    /// Proprioceptive velocity channels.
    pub proprio: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            ray: 0.0,
            obstacle: 0.0,
            object: 0.0,
            proprio: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    /// Episode length `T` in steps.
    pub horizon: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Number of most recent exteroceptive frames fed to policies.
    pub stack: usize,
    /// Common multiplier applied to every weighted reward term.
    pub reward_scale: f64,
    pub noise: NoiseConfig,
    pub reward_weights: BTreeMap<String, f64>,
    pub cliffslip: CliffSlipParams,
    pub riskynav: RiskyNavParams,
    pub grabhold: GrabHoldParams,
    pub seed: u64,
}

impl EnvConfig {
    pub fn for_task(task: Task) -> Self {
        let (horizon, dt, stack, reward_scale, noise, reward_weights) = match task {
            Task::CliffSlip => (
                40,
                1.0,
                1,
                1.0,
                NoiseConfig {
                    ray: 0.1,
                    ..NoiseConfig::zero()
                },
                cliffslip::default_weights(),
            ),
            Task::RiskyNav => (
                60,
                0.1,
                3,
                1.0,
                NoiseConfig {
                    ray: 0.1,
                    obstacle: 0.05,
                    object: 0.0,
                    proprio: 0.01,
                },
                riskynav::default_weights(),
            ),
            Task::GrabHold => (
                48,
                0.1,
                3,
                0.1,
                NoiseConfig {
                    ray: 0.02,
                    obstacle: 0.0,
                    object: 0.03,
                    proprio: 0.01,
                },
                grabhold::default_weights(),
            ),
        };
        Self {
            task,
            horizon,
            dt,
            stack,
            reward_scale,
            noise,
            reward_weights,
            cliffslip: CliffSlipParams::default(),
            riskynav: RiskyNavParams::default(),
            grabhold: GrabHoldParams::default(),
            seed: 0,
        }
    }

    pub fn term_names(&self) -> Vec<&'static str> {
        match self.task {
            Task::CliffSlip => cliffslip::TERMS.to_vec(),
            Task::RiskyNav => riskynav::TERMS.to_vec(),
            Task::GrabHold => grabhold::TERMS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(config_err("env.horizon must be >= 1"));
        }
        if !(self.dt > 0.0) {
            return Err(config_err("env.dt must be positive"));
        }
        if self.stack == 0 {
            return Err(config_err("env.stack must be >= 1"));
        }
        let n = &self.noise;
        if [n.ray, n.obstacle, n.object, n.proprio]
            .iter()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(config_err("env.noise amplitudes must be finite and >= 0"));
        }
        let terms = self.term_names();
        for key in self.reward_weights.keys() {
            if !terms.contains(&key.as_str()) {
                return Err(config_err(format!(
                    "env.reward_weights: unknown term `{key}` for task {}",
                    self.task
                )));
            }
        }
        for t in &terms {
            match self.reward_weights.get(*t) {
                Some(w) if w.is_finite() => {}
                _ => {
                    return Err(config_err(format!("env.reward_weights: missing or non-finite weight for `{t}`")))
                }
            }
        }
        match self.task {
            Task::CliffSlip => self.cliffslip.validate(),
            Task::RiskyNav => self.riskynav.validate(),
            Task::GrabHold => self.grabhold.validate(),
        }
    }
}

/// Dimensions of the observation projections of one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    pub teacher_extero: usize,
    pub student_extero: usize,
    pub rest: usize,
    pub critic: usize,
}

/// Task-specific part of a layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Scene {
    CliffSlip,
    RiskyNav(NavScene),
    GrabHold(GrabScene),
}

/// A fully specified initial configuration, serialisable so evaluation sets
/// are exactly reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvLayout {
    pub level: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum SimState {
    CliffSlip(CliffState),
    RiskyNav(NavState),
    GrabHold(GrabState),
}

/// Ground truth of one environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    /// Curriculum level tracked for this instance.
    pub level: usize,
    /// Level actually used to sample the current episode.
    pub effective_level: usize,
    pub done: bool,
    pub cause: TerminationCause,
    /// Whether the episode has produced a curriculum success so far.
    pub episode_success: bool,
    pub prev_action: Vec<f64>,
    pub sim: SimState,
}

/// Raw (unweighted) outcome of one task-level transition.
pub(crate) struct TaskStep {
    pub terms: Vec<(&'static str, f64)>,
    pub cause: TerminationCause,
    pub success: bool,
    /// Curriculum success event (goal reached, object grasped).
    pub progress_event: bool,
}

pub(crate) struct StepCtx {
    /// Step index after this transition.
    pub t_after: usize,
    pub horizon: usize,
    pub dt: f64,
}

pub(crate) fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    state: EnvState,
    rng_reset: StreamRng,
    rng_dynamics: StreamRng,
    rng_noise: StreamRng,
}

impl Env {
    /// Creates an environment and resets it at level 0.
    pub fn new(config: EnvConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let prev_action = vec![0.0; continuous_dim(config.task)];
        let sim = match config.task {
            Task::CliffSlip => SimState::CliffSlip(cliffslip::initial_state(&config.cliffslip)),
            Task::RiskyNav => SimState::RiskyNav(NavState::placeholder()),
            Task::GrabHold => SimState::GrabHold(GrabState::placeholder()),
        };
        let mut env = Self {
            state: EnvState {
                t: 0,
                level: 0,
                effective_level: 0,
                done: false,
                cause: TerminationCause::None,
                episode_success: false,
                prev_action,
                sim,
            },
            rng_reset: seed.stream(STREAM_RESET).rng(),
            rng_dynamics: seed.stream(STREAM_DYNAMICS).rng(),
            rng_noise: seed.stream(STREAM_NOISE).rng(),
            config,
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_reward_weight(&mut self, term: &str, weight: f64) -> Result<()> {
        if !self.config.term_names().contains(&term) {
            return Err(config_err(format!("unknown reward term `{term}`")));
        }
        self.config.reward_weights.insert(term.to_string(), weight);
        Ok(())
    }

    /// Samples a layout at `level` from this instance's reset stream.
    pub fn sample_layout(&mut self, level: usize) -> Result<EnvLayout> {
        let task = self.config.task;
        if level > task.max_level() {
            return Err(config_err(format!(
                "level {level} outside 0..={} for {task}",
                task.max_level()
            )));
        }
        let seed = self.rng_reset.random::<u64>();
        let scene = match task {
            Task::CliffSlip => Scene::CliffSlip,
            Task::RiskyNav => Scene::RiskyNav(riskynav::sample_scene(
                &self.config.riskynav,
                level,
                &mut self.rng_reset,
            )),
            Task::GrabHold => Scene::GrabHold(grabhold::sample_scene(
                &self.config.grabhold,
                level,
                &mut self.rng_reset,
            )),
        };
        Ok(EnvLayout { level, seed, scene })
    }

    /// Starts a new episode at curriculum `level`. At the maximum level the
    /// effective level is drawn uniformly from all levels.
    pub fn reset(&mut self, level: usize) -> Result<&EnvState> {
        let max = self.config.task.max_level();
        if level > max {
            return Err(config_err(format!(
                "level {level} outside 0..={max} for {}",
                self.config.task
            )));
        }
        let effective = if level == max && max > 0 {
            self.rng_reset.random_range(0..=max)
        } else {
            level
        };
        let layout = self.sample_layout(effective)?;
        self.apply_scene(&layout.scene)?;
        self.state.level = level;
        self.state.effective_level = effective;
        Ok(&self.state)
    }

    /// Starts an episode from a stored layout. Dynamics and noise streams are
    /// reseeded from the layout seed and `rollout` so that replay is exact.
    pub fn reset_to(&mut self, layout: &EnvLayout, rollout: u64) -> Result<&EnvState> {
        if layout.level > self.config.task.max_level() {
            return Err(config_err(format!("layout level {} out of range", layout.level)));
        }
        self.apply_scene(&layout.scene)?;
        self.state.level = layout.level;
        self.state.effective_level = layout.level;
        let s = Seed(layout.seed).index(rollout);
        self.rng_dynamics = s.stream(STREAM_DYNAMICS).rng();
        self.rng_noise = s.stream(STREAM_NOISE).rng();
        Ok(&self.state)
    }

    fn apply_scene(&mut self, scene: &Scene) -> Result<()> {
        let sim = match (self.config.task, scene) {
            (Task::CliffSlip, Scene::CliffSlip) => {
                SimState::CliffSlip(cliffslip::initial_state(&self.config.cliffslip))
            }
            (Task::RiskyNav, Scene::RiskyNav(s)) => SimState::RiskyNav(NavState::from_scene(s)),
            (Task::GrabHold, Scene::GrabHold(s)) => SimState::GrabHold(GrabState::from_scene(s)),
            _ => return Err(config_err("layout task does not match environment task")),
        };
        self.state.sim = sim;
        self.state.t = 0;
        self.state.done = false;
        self.state.cause = TerminationCause::None;
        self.state.episode_success = false;
        self.state.prev_action.iter_mut().for_each(|a| *a = 0.0);
        Ok(())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::Contract("step called on a terminated episode".into()));
        }
        let ctx = StepCtx {
            t_after: self.state.t + 1,
            horizon: self.config.horizon,
            dt: self.config.dt,
        };
        let raw = match (&mut self.state.sim, action) {
            (SimState::CliffSlip(s), Action::Discrete(a)) => {
                if *a >= 4 {
                    return Err(config_err(format!("cliffslip action {a} outside 0..4")));
                }
                cliffslip::step(&self.config.cliffslip, s, *a, &mut self.rng_dynamics)
            }
            (SimState::RiskyNav(s), Action::Continuous(a)) => {
                ensure_dim("riskynav action", 2, a.len())?;
                check_finite(a)?;
                riskynav::step(
                    &self.config.riskynav,
                    s,
                    a,
                    &self.state.prev_action,
                    &ctx,
                    &mut self.rng_dynamics,
                )
            }
            (SimState::GrabHold(s), Action::Continuous(a)) => {
                ensure_dim("grabhold action", 3, a.len())?;
                check_finite(a)?;
                grabhold::step(
                    &self.config.grabhold,
                    s,
                    a,
                    &self.state.prev_action,
                    &ctx,
                    &mut self.rng_dynamics,
                )
            }
            _ => return Err(config_err("action type does not match task action space")),
        };
        if let Action::Continuous(a) = action {
            for (p, &x) in self.state.prev_action.iter_mut().zip(a) {
                *p = x.clamp(-1.0, 1.0);
            }
        }
        self.state.t = ctx.t_after;
        let mut cause = raw.cause;
        if cause == TerminationCause::None && self.state.t >= self.config.horizon {
            cause = TerminationCause::Timeout;
        }
        let terminated = cause != TerminationCause::None;
        self.state.done = terminated;
        self.state.cause = cause;
        self.state.episode_success |= raw.progress_event;

        let scale = self.config.reward_scale;
        let mut reward_terms = BTreeMap::new();
        for (name, value) in raw.terms {
            let w = self.config.reward_weights[name];
            reward_terms.insert(name.to_string(), scale * w * value);
        }
        let reward_total = reward_terms.values().sum();
        Ok(StepResult {
            reward_total,
            reward_terms,
            terminated,
            cause,
            success: raw.success,
        })
    }

    /// Curriculum outcome of the finished episode.
    pub fn outcome(&self) -> Option<Outcome> {
        if !self.state.done {
            return None;
        }
        Some(if self.state.episode_success {
            Outcome::Success
        } else {
            Outcome::Failure
        })
    }

    pub fn obs_dims(&self) -> ObsDims {
        obs_dims(&self.config)
    }

    /// Privileged actor observation `[teacher extero | rest]`.
    pub fn observe_teacher(&mut self, beta: f64) -> Vec<f64> {
        let mut o = self.teacher_extero();
        o.extend(self.rest(beta));
        o
    }

    /// Non-privileged observation `[ray scan extero | rest]`.
    pub fn observe_student(&mut self, beta: f64) -> Vec<f64> {
        let mut o = self.student_extero();
        o.extend(self.rest(beta));
        o
    }

    /// Both actor views of the current state, drawn with independent noise.
    pub fn observe_pair(&mut self, beta: f64) -> (Vec<f64>, Vec<f64>) {
        let t = self.observe_teacher(beta);
        let s = self.observe_student(beta);
        (t, s)
    }

    pub fn teacher_extero(&mut self) -> Vec<f64> {
        let c = &self.config;
        match &self.state.sim {
            SimState::CliffSlip(s) => cliffslip::teacher_extero(&c.cliffslip, s),
            SimState::RiskyNav(s) => riskynav::teacher_extero(&c.riskynav, &c.noise, s, &mut self.rng_noise),
            SimState::GrabHold(s) => grabhold::teacher_extero(&c.grabhold, &c.noise, s, &mut self.rng_noise),
        }
    }

    pub fn student_extero(&mut self) -> Vec<f64> {
        let c = &self.config;
        match &self.state.sim {
            SimState::CliffSlip(s) => cliffslip::student_extero(&c.cliffslip, &c.noise, s, &mut self.rng_noise),
            SimState::RiskyNav(s) => riskynav::student_extero(&c.riskynav, &c.noise, s, &mut self.rng_noise),
            SimState::GrabHold(s) => grabhold::student_extero(&c.grabhold, &c.noise, s, &mut self.rng_noise),
        }
    }

    pub fn rest(&mut self, beta: f64) -> Vec<f64> {
        let c = &self.config;
        let time_left = (c.horizon - self.state.t.min(c.horizon)) as f64 / c.horizon as f64;
        let mut r = match &self.state.sim {
            SimState::CliffSlip(_) => Vec::new(),
            SimState::RiskyNav(s) => {
                riskynav::rest(&c.riskynav, &c.noise, s, &self.state.prev_action, &mut self.rng_noise)
            }
            SimState::GrabHold(s) => {
                grabhold::rest(&c.grabhold, &c.noise, s, &self.state.prev_action, &mut self.rng_noise)
            }
        };
        r.push(time_left);
        r.push(beta);
        r
    }

    /// Noise-free critic observation; excludes `beta`.
    pub fn observe_critic(&self) -> Vec<f64> {
        let c = &self.config;
        let time_left = (c.horizon - self.state.t.min(c.horizon)) as f64 / c.horizon as f64;
        let mut o = match &self.state.sim {
            SimState::CliffSlip(s) => cliffslip::critic_obs(&c.cliffslip, s),
            SimState::RiskyNav(s) => riskynav::critic_obs(&c.riskynav, s, &self.state.prev_action),
            SimState::GrabHold(s) => grabhold::critic_obs(&c.grabhold, s, &self.state.prev_action),
        };
        o.push(time_left);
        o
    }

    /// Task geometry for rendering.
    pub fn geometry(&self) -> serde_json::Value {
        let c = &self.config;
        match &self.state.sim {
            SimState::CliffSlip(s) => cliffslip::geometry(&c.cliffslip, s),
            SimState::RiskyNav(s) => riskynav::geometry(&c.riskynav, s),
            SimState::GrabHold(s) => grabhold::geometry(&c.grabhold, s),
        }
    }
}

fn continuous_dim(task: Task) -> usize {
    match task.action_space() {
        ActionSpace::Continuous(n) => n,
        ActionSpace::Discrete(_) => 0,
    }
}

fn check_finite(a: &[f64]) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("action component".into()))
    }
}

pub fn obs_dims(config: &EnvConfig) -> ObsDims {
    let (te, se, rest, critic) = match config.task {
        Task::CliffSlip => cliffslip::dims(&config.cliffslip),
        Task::RiskyNav => riskynav::dims(&config.riskynav),
        Task::GrabHold => grabhold::dims(&config.grabhold),
    };
    // time-left and beta are appended to rest; time-left to the critic view
    ObsDims {
        teacher_extero: te,
        student_extero: se,
        rest: rest + 2,
        critic: critic + 1,
    }
}

/// Draws `count` layouts at `level` from a dedicated seed.
pub fn sample_layouts(config: &EnvConfig, level: usize, count: usize, seed: Seed) -> Result<Vec<EnvLayout>> {
    let mut env = Env::new(config.clone(), seed)?;
    (0..count).map(|_| env.sample_layout(level)).collect()
}

/// Sliding window of the `k` most recent exteroceptive frames.
#[derive(Clone, Debug)]
pub struct ObsStack {
    k: usize,
    frames: VecDeque<Vec<f64>>,
}

impl ObsStack {
    pub fn new(k: usize) -> Self {
        Self {
            k: k.max(1),
            frames: VecDeque::with_capacity(k.max(1)),
        }
    }

    /// Clears the window and fills it with copies of `frame`.
    pub fn reset(&mut self, frame: &[f64]) {
        self.frames.clear();
        for _ in 0..self.k {
            self.frames.push_back(frame.to_vec());
        }
    }

    pub fn push(&mut self, frame: &[f64]) {
        if self.frames.is_empty() {
            self.reset(frame);
            return;
        }
        if self.frames.len() == self.k {
            self.frames.pop_front();
        }
        self.frames.push_back(frame.to_vec());
    }

    /// Oldest-to-newest concatenation.
    pub fn stacked(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}
