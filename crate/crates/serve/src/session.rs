//! One live episode: environment, policy, critic and the current `beta`.
//! [`SessionCore`] is synchronous; [`run_session`] drives it from a tokio
//! task and is the only owner of its state.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use distrisk_core::checkpoint::{Checkpoint, CheckpointKind};
use distrisk_core::evalsuite::CVAR_EVAL_FLOOR;
use distrisk_core::envs::{Action, Env, ObsStack};
use distrisk_core::nn::Mlp;
use distrisk_core::quantile::{to_histogram, Histogram, QuantileDistribution};
use distrisk_core::risk::{distorted_value_slice, Metric, RiskSpec};
use distrisk_core::seed::Seed;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::{interval, MissedTickBehavior};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Paused,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub id: u64,
    pub checkpoint: String,
    pub critic: String,
    pub task: String,
    pub kind: CheckpointKind,
    pub metric: Metric,
    pub beta_range: [f64; 2],
    pub beta: f64,
    pub reference_betas: Vec<f64>,
    pub state: RunState,
    pub episode: u64,
    pub t: usize,
    pub hz: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsSummary {
    pub view: CheckpointKind,
    pub dim: usize,
    pub extero_min: f64,
    pub extero_max: f64,
    pub rest: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distorted {
    pub current: f64,
    /// Keyed by the reference beta printed with at least one decimal.
    pub refs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session: u64,
    pub episode: u64,
    pub t: usize,
    pub beta: f64,
    pub geometry: serde_json::Value,
    pub obs: ObsSummary,
    pub action: Vec<f64>,
    pub reward: f64,
    pub reward_terms: BTreeMap<String, f64>,
    /// Critic quantiles at the post-step state, ascending.
    pub quantiles: Vec<f64>,
    pub histogram: Histogram,
    pub distorted: Distorted,
    pub terminated: bool,
    pub cause: String,
}

pub fn beta_key(b: f64) -> String {
    format!("{b:?}")
}

/// Betas a live session accepts. CVaR stops at the evaluation floor.
pub fn serve_range(metric: Metric) -> (f64, f64) {
    match metric {
        Metric::Cvar => (CVAR_EVAL_FLOOR, 1.0),
        m => m.training_range(),
    }
}

pub fn check_beta(metric: Metric, beta: f64) -> distrisk_core::Result<()> {
    let (lo, hi) = serve_range(metric);
    if !(beta >= lo && beta <= hi) {
        return Err(distrisk_core::Error::Config(format!(
            "beta {beta} outside [{lo}, {hi}] for metric {}",
            metric.as_str()
        )));
    }
    RiskSpec::new(metric, beta).map(|_| ())
}

pub struct SessionCore {
    pub id: u64,
    ck: Checkpoint,
    critic: Mlp,
    env: Env,
    stack: ObsStack,
    level: usize,
    pub beta: f64,
    pub episode: u64,
    pub t: usize,
    pub terminated: bool,
    pub last_frame: Option<Frame>,
    bins: usize,
}

impl SessionCore {
    pub fn new(id: u64, ck: Checkpoint, critic: Mlp, beta: f64, seed: u64, level: usize, bins: usize) -> distrisk_core::Result<Self> {
        check_beta(ck.metadata.metric, beta)?;
        let env = Env::new(ck.metadata.env.clone(), Seed(seed))?;
        let mut s = Self {
            id,
            stack: ObsStack::new(ck.metadata.env.stack),
            ck,
            critic,
            env,
            level,
            beta,
            episode: 0,
            t: 0,
            terminated: false,
            last_frame: None,
            bins,
        };
        s.reset()?;
        Ok(s)
    }

    pub fn metric(&self) -> Metric {
        self.ck.metadata.metric
    }

    fn student(&self) -> bool {
        self.ck.kind == CheckpointKind::Student
    }

    fn extero(&mut self) -> Vec<f64> {
        if self.student() {
            self.env.student_extero()
        } else {
            self.env.teacher_extero()
        }
    }

    pub fn reset(&mut self) -> distrisk_core::Result<()> {
        self.env.reset(self.level)?;
        let e = self.extero();
        self.stack.reset(&e);
        self.episode += 1;
        self.t = 0;
        self.terminated = false;
        self.last_frame = None;
        Ok(())
    }

    /// Rejects out-of-range values and leaves `beta` unchanged.
    pub fn set_beta(&mut self, beta: f64) -> distrisk_core::Result<()> {
        check_beta(self.metric(), beta)?;
        self.beta = beta;
        Ok(())
    }

    pub fn step(&mut self) -> distrisk_core::Result<Frame> {
        let mut obs = self.stack.stacked();
        let rest = self.env.rest(self.beta);
        obs.extend(&rest);
        let action = self.ck.policy.mean_action(&obs)?;
        let r = self.env.step(&action)?;
        self.t += 1;
        self.terminated = r.terminated;
        let e = self.extero();
        if !r.terminated {
            self.stack.push(&e);
        }
        let mut quantiles = self.critic.predict(&self.env.observe_critic())?;
        quantiles.sort_by(f64::total_cmp);
        let z = QuantileDistribution::new(quantiles.clone())?;
        let metric = self.metric();
        let current = distorted_value_slice(&quantiles, &RiskSpec::new(metric, self.beta)?);
        let mut refs = BTreeMap::new();
        for b in metric.reference_betas() {
            refs.insert(beta_key(b), distorted_value_slice(&quantiles, &RiskSpec::new(metric, b)?));
        }
        let frame = Frame {
            session: self.id,
            episode: self.episode,
            t: self.t,
            beta: self.beta,
            geometry: self.env.geometry(),
            obs: ObsSummary {
                view: self.ck.kind,
                dim: obs.len(),
                extero_min: e.iter().copied().fold(f64::INFINITY, f64::min),
                extero_max: e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                rest: self.env.rest(self.beta),
            },
            action: match &action {
                Action::Continuous(a) => a.clone(),
                Action::Discrete(k) => vec![*k as f64],
            },
            reward: r.reward_total,
            reward_terms: r.reward_terms,
            histogram: to_histogram(&z, self.bins)?,
            quantiles,
            distorted: Distorted { current, refs },
            terminated: r.terminated,
            cause: r.cause.as_str().to_string(),
        };
        self.last_frame = Some(frame.clone());
        Ok(frame)
    }
}

pub enum Command {
    SetBeta(f64, oneshot::Sender<Result<SessionStatus, String>>),
    Pause(oneshot::Sender<Result<SessionStatus, String>>),
    Resume(oneshot::Sender<Result<SessionStatus, String>>),
    Reset(oneshot::Sender<Result<SessionStatus, String>>),
}

/// Shared, read-only view of a session for the HTTP handlers.
pub struct SessionShared {
    pub status: Mutex<SessionStatus>,
    pub frames: broadcast::Sender<Arc<str>>,
}

fn encode(frame: &Frame) -> Arc<str> {
    Arc::from(serde_json::to_string(frame).expect("frames serialise"))
}

/// Steps at the configured rate while running; applies commands between
/// steps in arrival order.
/// With `auto_reset` a terminated episode is followed by a fresh one on the
/// next tick instead of stopping.
pub async fn run_session(
    mut core: SessionCore,
    mut commands: mpsc::Receiver<Command>,
    shared: Arc<SessionShared>,
    auto_reset: bool,
) {
    let hz = shared.status.lock().expect("status lock").hz;
    let mut tick = interval(Duration::from_secs_f64(1.0 / hz));
    tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let publish = |core: &SessionCore, state: RunState| {
        let mut st = shared.status.lock().expect("status lock");
        st.beta = core.beta;
        st.episode = core.episode;
        st.t = core.t;
        st.state = state;
        st.clone()
    };
    let mut state = RunState::Paused;
    loop {
        tokio::select! {
            _ = tick.tick() => {
                if state != RunState::Running {
                    continue;
                }
                if core.terminated && auto_reset {
                    if let Err(e) = core.reset() {
                        tracing::warn!(session = core.id, error = %e, "reset failed; pausing");
                        state = RunState::Paused;
                        publish(&core, state);
                        continue;
                    }
                }
                match core.step() {
                    Ok(frame) => {
                        let _ = shared.frames.send(encode(&frame));
                        if frame.terminated && !auto_reset {
                            state = RunState::Terminated;
                        }
                    }
                    Err(e) => {
                        tracing::warn!(session = core.id, error = %e, "step failed; pausing");
                        state = RunState::Paused;
                    }
                }
                publish(&core, state);
            }
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { break };
                match cmd {
                    Command::SetBeta(b, reply) => {
                        let r = core.set_beta(b).map_err(|e| e.to_string());
                        let st = publish(&core, state);
                        let _ = reply.send(r.map(|_| st));
                    }
                    Command::Pause(reply) => {
                        if state == RunState::Running {
                            state = RunState::Paused;
                        }
                        let _ = reply.send(Ok(publish(&core, state)));
                    }
                    Command::Resume(reply) => {
                        if state == RunState::Terminated {
                            if let Some(f) = &core.last_frame {
                                let _ = shared.frames.send(encode(f));
                            }
                        } else {
                            state = RunState::Running;
                            tick.reset();
                        }
                        let _ = reply.send(Ok(publish(&core, state)));
                    }
                    Command::Reset(reply) => {
                        let r = core.reset().map_err(|e| e.to_string());
                        if state == RunState::Terminated || r.is_err() {
                            state = RunState::Paused;
                        }
                        let st = publish(&core, state);
                        let _ = reply.send(r.map(|_| st));
                    }
                }
            }
        }
    }
}
