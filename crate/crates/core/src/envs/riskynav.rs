//! Continuous 2D navigation past a randomly walking disc obstacle.
//!
//! The agent is a disc commanded by planar velocity. A dynamic disc performs
//! a reflected Gaussian walk inside a box around an anchor placed near the
//! straight start-goal segment, so the direct route is fast but exposed.
//! Static discs add clutter for the ray scan. Touching any obstacle ends the
//! episode. Arena walls clamp the agent without terminating.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{dist, norm, ray_directions, ray_disc, ray_rect_exit, reflect, Disc, Rect};
use super::{uniform_noise, NoiseConfig, StepCtx, TaskStep, TerminationCause};
use crate::error::{config_err, Result};

pub const TERMS: [&str; 7] = [
    "action_rate",
    "alive",
    "goal",
    "padded_alive",
    "progress",
    "termination",
    "velocity",
];

pub fn default_weights() -> BTreeMap<String, f64> {
    [
        ("action_rate", -0.01),
        ("alive", -0.3),
        ("goal", 10.0),
        ("padded_alive", -0.3),
        ("progress", 10.0),
        ("termination", -5.0),
        ("velocity", -0.002),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskyNavParams {
    /// Arena is `[-half, half]^2`.
    pub arena_half: f64,
    pub agent_radius: f64,
    /// Metres per second at full command.
    pub max_speed: f64,
    pub goal_tolerance: f64,
    /// Goal box half-width at level 0 and at the top level.
    pub goal_range_min: f64,
    pub goal_range_max: f64,
    /// Goals closer than this to the start are resampled.
    pub goal_min_distance: f64,
    pub dynamic_radius: f64,
    /// Half-width of the box the dynamic disc is confined to.
    pub dynamic_extent: f64,
    /// Standard deviation of the per-step walk, metres.
    pub dynamic_step: f64,
    /// Anchor position along the start-goal segment, as a fraction range.
    pub anchor_fraction: [f64; 2],
    pub anchor_jitter: f64,
    pub static_count: usize,
    pub static_radius: f64,
    pub teacher_rays: usize,
    pub student_rays: usize,
    pub ray_range: f64,
    /// The dynamic disc is reported to the teacher only within this range.
    pub sensing_range: f64,
}

impl Default for RiskyNavParams {
    fn default() -> Self {
        Self {
            arena_half: 3.0,
            agent_radius: 0.15,
            max_speed: 1.0,
            goal_tolerance: 0.15,
            goal_range_min: 0.25,
            goal_range_max: 2.0,
            goal_min_distance: 0.2,
            dynamic_radius: 0.25,
            dynamic_extent: 0.4,
            dynamic_step: 0.06,
            anchor_fraction: [0.35, 0.65],
            anchor_jitter: 0.1,
            static_count: 2,
            static_radius: 0.25,
            teacher_rays: 16,
            student_rays: 32,
            ray_range: 4.0,
            sensing_range: 2.5,
        }
    }
}

impl RiskyNavParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_half", self.arena_half),
            ("agent_radius", self.agent_radius),
            ("max_speed", self.max_speed),
            ("goal_tolerance", self.goal_tolerance),
            ("goal_range_min", self.goal_range_min),
            ("dynamic_radius", self.dynamic_radius),
            ("static_radius", self.static_radius),
            ("ray_range", self.ray_range),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("riskynav.{name} must be positive")));
            }
        }
        if !(self.dynamic_extent >= 0.0 && self.dynamic_step >= 0.0 && self.anchor_jitter >= 0.0) {
            return Err(config_err("riskynav dynamic extent, step and jitter must be >= 0"));
        }
        if self.goal_range_max < self.goal_range_min || self.goal_range_max + self.agent_radius > self.arena_half {
            return Err(config_err("riskynav goal range must grow and fit inside the arena"));
        }
        let [f0, f1] = self.anchor_fraction;
        if !(0.0 <= f0 && f0 <= f1 && f1 <= 1.0) {
            return Err(config_err("riskynav.anchor_fraction must be an ordered range in [0, 1]"));
        }
        if self.teacher_rays == 0 || self.student_rays == 0 {
            return Err(config_err("riskynav ray counts must be positive"));
        }
        Ok(())
    }

    pub fn arena(&self) -> Rect {
        Rect::square(self.arena_half)
    }

    /// Goal box half-width at `level` of `levels`, linear in level.
    pub fn goal_range(&self, level: usize, levels: usize) -> f64 {
        if levels <= 1 {
            return self.goal_range_max;
        }
        let f = level as f64 / (levels - 1) as f64;
        self.goal_range_min + (self.goal_range_max - self.goal_range_min) * f
    }

    fn clearance(&self) -> f64 {
        self.agent_radius + self.dynamic_radius + self.dynamic_extent + 0.05
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavScene {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub anchor: [f64; 2],
    pub extent: f64,
    pub dynamic: Disc,
    pub statics: Vec<Disc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub anchor: [f64; 2],
    pub extent: f64,
    pub dynamic: Disc,
    pub dynamic_vel: [f64; 2],
    pub statics: Vec<Disc>,
}

impl NavState {
    pub(crate) fn placeholder() -> Self {
        Self::from_scene(&NavScene {
            start: [0.0; 2],
            goal: [1.0, 0.0],
            anchor: [5.0, 5.0],
            extent: 0.0,
            dynamic: Disc { x: 5.0, y: 5.0, r: 0.1 },
            statics: Vec::new(),
        })
    }

    pub(crate) fn from_scene(s: &NavScene) -> Self {
        Self {
            pos: s.start,
            vel: [0.0; 2],
            goal: s.goal,
            anchor: s.anchor,
            extent: s.extent,
            dynamic: s.dynamic,
            dynamic_vel: [0.0; 2],
            statics: s.statics.clone(),
        }
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    fn dynamic_box(&self) -> Rect {
        Rect {
            x0: self.anchor[0] - self.extent,
            x1: self.anchor[0] + self.extent,
            y0: self.anchor[1] - self.extent,
            y1: self.anchor[1] + self.extent,
        }
    }
}

pub(crate) fn sample_scene<R: Rng + ?Sized>(p: &RiskyNavParams, level: usize, rng: &mut R) -> NavScene {
    let start = [0.0, 0.0];
    let half = p.goal_range(level, super::Task::RiskyNav.levels());
    let goal = loop {
        let g = [rng.random_range(-half..=half), rng.random_range(-half..=half)];
        if dist(g, start) >= p.goal_min_distance.min(half) {
            break g;
        }
    };
    let len = dist(start, goal);
    let dir = [(goal[0] - start[0]) / len, (goal[1] - start[1]) / len];
    let perp = [-dir[1], dir[0]];
    let frac = rng.random_range(p.anchor_fraction[0]..=p.anchor_fraction[1]);
    let jitter = uniform_noise(rng, p.anchor_jitter);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let clear = p.clearance();
    let inner = p.arena().inset(p.dynamic_extent + p.dynamic_radius);
    let mut offset = jitter;
    let anchor = loop {
        let a = inner.clamp([
            start[0] + frac * len * dir[0] + offset * perp[0],
            start[1] + frac * len * dir[1] + offset * perp[1],
        ]);
        if (dist(a, start) >= clear && dist(a, goal) >= clear) || offset.abs() > 2.0 * p.arena_half {
            break a;
        }
        offset += side * 0.05;
    };
    let dynamic = Disc {
        x: anchor[0] + uniform_noise(rng, p.dynamic_extent),
        y: anchor[1] + uniform_noise(rng, p.dynamic_extent),
        r: p.dynamic_radius,
    };
    let mut statics = Vec::with_capacity(p.static_count);
    let placement = p.arena().inset(p.static_radius);
    let keep_out = p.agent_radius + p.static_radius + 0.3;
    for _ in 0..p.static_count {
        for attempt in 0..200 {
            let c = [
                rng.random_range(placement.x0..=placement.x1),
                rng.random_range(placement.y0..=placement.y1),
            ];
            let clear_of_route = dist(c, start) >= keep_out
                && dist(c, goal) >= keep_out
                && dist(c, anchor) >= p.dynamic_extent * std::f64::consts::SQRT_2 + p.dynamic_radius + keep_out
                && statics.iter().all(|s: &Disc| dist(c, s.center()) >= 2.0 * p.static_radius);
            if clear_of_route || attempt == 199 {
                if clear_of_route {
                    statics.push(Disc {
                        x: c[0],
                        y: c[1],
                        r: p.static_radius,
                    });
                }
                break;
            }
        }
    }
    NavScene {
        start,
        goal,
        anchor,
        extent: p.dynamic_extent,
        dynamic,
        statics,
    }
}

pub(crate) fn step<R: Rng + ?Sized>(
    p: &RiskyNavParams,
    s: &mut NavState,
    action: &[f64],
    prev_action: &[f64],
    ctx: &StepCtx,
    rng: &mut R,
) -> TaskStep {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let mut v = [a[0] * p.max_speed, a[1] * p.max_speed];
    let speed = norm(v);
    if speed > p.max_speed {
        v = [v[0] * p.max_speed / speed, v[1] * p.max_speed / speed];
    }
    let prev_dist = s.goal_distance();
    let arena = p.arena().inset(p.agent_radius);
    s.pos = arena.clamp([s.pos[0] + v[0] * ctx.dt, s.pos[1] + v[1] * ctx.dt]);
    s.vel = v;

    if p.dynamic_step > 0.0 {
        let walk = Normal::new(0.0, p.dynamic_step).expect("positive step");
        let b = s.dynamic_box();
        let old = s.dynamic.center();
        s.dynamic.x = reflect(s.dynamic.x + walk.sample(rng), b.x0, b.x1);
        s.dynamic.y = reflect(s.dynamic.y + walk.sample(rng), b.y0, b.y1);
        s.dynamic_vel = [(s.dynamic.x - old[0]) / ctx.dt, (s.dynamic.y - old[1]) / ctx.dt];
    }

    let d = s.goal_distance();
    let collided = std::iter::once(&s.dynamic)
        .chain(s.statics.iter())
        .any(|o| dist(s.pos, o.center()) < p.agent_radius + o.r);
    let reached = !collided && d < p.goal_tolerance;
    let da = [a[0] - prev_action[0], a[1] - prev_action[1]];
    let remaining = ctx.horizon.saturating_sub(ctx.t_after) as f64;
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    TaskStep {
        terms: vec![
            ("action_rate", da[0] * da[0] + da[1] * da[1]),
            ("alive", 1.0),
            ("goal", ind(reached)),
            ("padded_alive", if collided { remaining } else { 0.0 }),
            ("progress", prev_dist - d),
            ("termination", ind(collided)),
            ("velocity", a[0] * a[0] + a[1] * a[1]),
        ],
        cause: if collided {
            TerminationCause::Collision
        } else if reached {
            TerminationCause::Goal
        } else {
            TerminationCause::None
        },
        success: reached,
        progress_event: reached,
    }
}

/// (teacher extero, student extero, rest without time/beta, critic without time)
pub(crate) fn dims(p: &RiskyNavParams) -> (usize, usize, usize, usize) {
    (p.teacher_rays + 3, p.student_rays, 7, 13 + 2 * p.static_count)
}

fn scan(p: &RiskyNavParams, s: &NavState, n: usize, include_dynamic: bool) -> Vec<f64> {
    let arena = p.arena();
    ray_directions(n)
        .into_iter()
        .map(|dir| {
            let mut t = ray_rect_exit(s.pos, dir, &arena);
            for o in s.statics.iter().chain(include_dynamic.then_some(&s.dynamic)) {
                if let Some(h) = ray_disc(s.pos, dir, o) {
                    t = t.min(h);
                }
            }
            t.min(p.ray_range)
        })
        .collect()
}

/// Exact static scan, then the masked dynamic-disc position relative to the
/// agent with obstacle noise and its visibility flag.
pub(crate) fn teacher_extero<R: Rng + ?Sized>(
    p: &RiskyNavParams,
    noise: &NoiseConfig,
    s: &NavState,
    rng: &mut R,
) -> Vec<f64> {
    let mut o = scan(p, s, p.teacher_rays, false);
    let rel = [s.dynamic.x - s.pos[0], s.dynamic.y - s.pos[1]];
    if norm(rel) <= p.sensing_range {
        o.push(rel[0] + uniform_noise(rng, noise.obstacle));
        o.push(rel[1] + uniform_noise(rng, noise.obstacle));
        o.push(1.0);
    } else {
        o.extend([0.0, 0.0, 0.0]);
    }
    o
}

/// Scan of walls, static and dynamic discs with additive ray noise.
pub(crate) fn student_extero<R: Rng + ?Sized>(
    p: &RiskyNavParams,
    noise: &NoiseConfig,
    s: &NavState,
    rng: &mut R,
) -> Vec<f64> {
    scan(p, s, p.student_rays, true)
        .into_iter()
        .map(|d| d + uniform_noise(rng, noise.ray))
        .collect()
}

/// Velocity (noisy), previous action, goal offset and goal distance.
pub(crate) fn rest<R: Rng + ?Sized>(
    p: &RiskyNavParams,
    noise: &NoiseConfig,
    s: &NavState,
    prev_action: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    let _ = p;
    let g = [s.goal[0] - s.pos[0], s.goal[1] - s.pos[1]];
    vec![
        s.vel[0] + uniform_noise(rng, noise.proprio),
        s.vel[1] + uniform_noise(rng, noise.proprio),
        prev_action[0],
        prev_action[1],
        g[0],
        g[1],
        norm(g),
    ]
}

pub(crate) fn critic_obs(p: &RiskyNavParams, s: &NavState, prev_action: &[f64]) -> Vec<f64> {
    let rel = |c: [f64; 2]| [c[0] - s.pos[0], c[1] - s.pos[1]];
    let g = rel(s.goal);
    let dyn_rel = rel(s.dynamic.center());
    let anchor_rel = rel(s.anchor);
    let mut o = vec![
        s.pos[0],
        s.pos[1],
        s.vel[0],
        s.vel[1],
        prev_action[0],
        prev_action[1],
        g[0],
        g[1],
        norm(g),
        dyn_rel[0],
        dyn_rel[1],
        anchor_rel[0],
        anchor_rel[1],
    ];
    for k in 0..p.static_count {
        match s.statics.get(k) {
            Some(d) => o.extend(rel(d.center())),
            // missing statics are parked far outside the arena
            None => o.extend([10.0, 10.0]),
        }
    }
    o
}

pub(crate) fn geometry(p: &RiskyNavParams, s: &NavState) -> serde_json::Value {
    let mut obstacles = vec![serde_json::json!({
        "x": s.dynamic.x, "y": s.dynamic.y, "r": s.dynamic.r, "dynamic": true,
    })];
    for d in &s.statics {
        obstacles.push(serde_json::json!({"x": d.x, "y": d.y, "r": d.r, "dynamic": false}));
    }
    serde_json::json!({
        "kind": "plane",
        "arena": [-p.arena_half, p.arena_half],
        "agent": {"x": s.pos[0], "y": s.pos[1], "r": p.agent_radius},
        "goal": {"x": s.goal[0], "y": s.goal[1], "tolerance": p.goal_tolerance},
        "obstacles": obstacles,
    })
}
