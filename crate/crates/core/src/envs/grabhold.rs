//! Planar grasp, carry and hold near a table edge.
//!
//! A point effector moves over a table and carries a small object once the
//! grip is engaged within the grasp radius. While carried the object slips out
//! with a probability growing with effector speed, then skids with the
//! effector's velocity. The hold goal sits close to the table edge, so fast
//! carrying trades time for the risk of losing the object over the edge.
//! Reaching the goal does not end the episode; hold reward accrues every step
//! the object is held at the goal.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{dist, norm, ray_directions, ray_disc, ray_rect_exit, Disc, Rect};
use super::{uniform_noise, NoiseConfig, StepCtx, TaskStep, TerminationCause};
use crate::error::{config_err, Result};

pub const TERMS: [&str; 7] = [
    "action_rate",
    "grasp",
    "hold",
    "object_goal",
    "reach",
    "termination",
    "velocity",
];

pub fn default_weights() -> BTreeMap<String, f64> {
    [
        ("action_rate", -0.01),
        ("grasp", 5.0),
        ("hold", 15.0),
        ("object_goal", 5.0),
        ("reach", 1.0),
        ("termination", -20.0),
        ("velocity", -0.005),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrabHoldParams {
    pub table: Rect,
    pub max_speed: f64,
    pub object_radius: f64,
    pub grasp_radius: f64,
    /// Drop probability per step at full speed; scales with squared speed.
    pub slip_coef: f64,
    /// Velocity retained per step by a free object.
    pub friction: f64,
    /// Relative noise on the skid velocity after a drop.
    pub skid_noise: f64,
    pub goal_tolerance: f64,
    pub effector_start: [f64; 2],
    /// Effector-object distance range over levels.
    pub object_distance: [f64; 2],
    /// Goal x range over levels; larger values are closer to the edge.
    pub goal_x: [f64; 2],
    pub goal_y_spread: f64,
    pub rays: usize,
}

impl Default for GrabHoldParams {
    fn default() -> Self {
        Self {
            table: Rect {
                x0: -0.8,
                x1: 0.6,
                y0: -0.6,
                y1: 0.6,
            },
            max_speed: 0.5,
            object_radius: 0.04,
            grasp_radius: 0.08,
            slip_coef: 0.08,
            friction: 0.7,
            skid_noise: 0.3,
            goal_tolerance: 0.06,
            effector_start: [-0.5, 0.0],
            object_distance: [0.1, 0.5],
            goal_x: [0.1, 0.45],
            goal_y_spread: 0.3,
            rays: 16,
        }
    }
}

impl GrabHoldParams {
    pub fn validate(&self) -> Result<()> {
        let t = &self.table;
        if !(t.x0 < t.x1 && t.y0 < t.y1) {
            return Err(config_err("grabhold.table must have positive extent"));
        }
        for (name, v) in [
            ("max_speed", self.max_speed),
            ("object_radius", self.object_radius),
            ("grasp_radius", self.grasp_radius),
            ("goal_tolerance", self.goal_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("grabhold.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.slip_coef) || !(0.0..1.0).contains(&self.friction) {
            return Err(config_err("grabhold.slip_coef must lie in [0, 1] and friction in [0, 1)"));
        }
        if !t.contains(self.effector_start) || self.goal_x[1] >= t.x1 || self.goal_x[0] > self.goal_x[1] {
            return Err(config_err("grabhold start and goal ranges must lie on the table"));
        }
        if self.rays == 0 {
            return Err(config_err("grabhold.rays must be positive"));
        }
        Ok(())
    }

    fn level_fraction(level: usize) -> f64 {
        let levels = super::Task::GrabHold.levels();
        level as f64 / (levels - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrabScene {
    pub effector: [f64; 2],
    pub object: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrabState {
    pub effector: [f64; 2],
    pub effector_vel: [f64; 2],
    pub object: [f64; 2],
    pub object_vel: [f64; 2],
    pub attached: bool,
    pub goal: [f64; 2],
}

impl GrabState {
    pub(crate) fn placeholder() -> Self {
        Self::from_scene(&GrabScene {
            effector: [-0.5, 0.0],
            object: [-0.3, 0.0],
            goal: [0.3, 0.0],
        })
    }

    pub(crate) fn from_scene(s: &GrabScene) -> Self {
        Self {
            effector: s.effector,
            effector_vel: [0.0; 2],
            object: s.object,
            object_vel: [0.0; 2],
            attached: false,
            goal: s.goal,
        }
    }
}

pub(crate) fn sample_scene<R: Rng + ?Sized>(p: &GrabHoldParams, level: usize, rng: &mut R) -> GrabScene {
    let f = GrabHoldParams::level_fraction(level);
    let lerp = |r: [f64; 2]| r[0] + (r[1] - r[0]) * f;
    let effector = p.effector_start;
    let d = rng.random_range(p.object_distance[0]..=lerp(p.object_distance));
    let angle = uniform_noise(rng, std::f64::consts::FRAC_PI_2 * f.max(0.1));
    let inner = p.table.inset(p.object_radius * 2.0);
    let object = inner.clamp([effector[0] + d * angle.cos(), effector[1] + d * angle.sin()]);
    let goal = [
        rng.random_range(p.goal_x[0]..=lerp(p.goal_x)),
        uniform_noise(rng, p.goal_y_spread * f),
    ];
    GrabScene { effector, object, goal }
}

pub(crate) fn step<R: Rng + ?Sized>(
    p: &GrabHoldParams,
    s: &mut GrabState,
    action: &[f64],
    prev_action: &[f64],
    ctx: &StepCtx,
    rng: &mut R,
) -> TaskStep {
    let a = [
        action[0].clamp(-1.0, 1.0),
        action[1].clamp(-1.0, 1.0),
        action[2].clamp(-1.0, 1.0),
    ];
    let grip = a[2] >= 0.5;
    let mut v = [a[0] * p.max_speed, a[1] * p.max_speed];
    let speed = norm(v);
    if speed > p.max_speed {
        v = [v[0] * p.max_speed / speed, v[1] * p.max_speed / speed];
    }
    let workspace = Rect {
        x0: p.table.x0,
        x1: p.table.x1 + 0.2,
        y0: p.table.y0,
        y1: p.table.y1,
    };
    let old = s.effector;
    s.effector = workspace.clamp([old[0] + v[0] * ctx.dt, old[1] + v[1] * ctx.dt]);
    s.effector_vel = [(s.effector[0] - old[0]) / ctx.dt, (s.effector[1] - old[1]) / ctx.dt];

    let mut grasped_now = false;
    if s.attached {
        let speed_frac = norm(s.effector_vel) / p.max_speed;
        let drop_p = p.slip_coef * speed_frac * speed_frac;
        let slipped = drop_p > 0.0 && rng.random::<f64>() < drop_p;
        if !grip || slipped {
            s.attached = false;
            let jitter = if slipped { p.skid_noise } else { 0.0 };
            s.object_vel = [
                s.effector_vel[0] * (1.0 + uniform_noise(rng, jitter)),
                s.effector_vel[1] * (1.0 + uniform_noise(rng, jitter)),
            ];
            s.object = [s.object[0] + s.object_vel[0] * ctx.dt, s.object[1] + s.object_vel[1] * ctx.dt];
        } else {
            s.object = s.effector;
            s.object_vel = s.effector_vel;
        }
    } else {
        s.object = [s.object[0] + s.object_vel[0] * ctx.dt, s.object[1] + s.object_vel[1] * ctx.dt];
        s.object_vel = [s.object_vel[0] * p.friction, s.object_vel[1] * p.friction];
        if grip && dist(s.effector, s.object) < p.grasp_radius {
            s.attached = true;
            grasped_now = true;
            s.object = s.effector;
            s.object_vel = s.effector_vel;
        } else if !grip && dist(s.effector, s.object) < p.object_radius {
            // an open effector shoves the object along its motion
            s.object_vel = s.effector_vel;
        }
    }

    let lost = !p.table.contains(s.object);
    let d_og = dist(s.object, s.goal);
    let held_at_goal = s.attached && d_og < p.goal_tolerance;
    let reach_after = dist(s.effector, s.object);
    let da = [a[0] - prev_action[0], a[1] - prev_action[1], a[2] - prev_action[2]];
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    TaskStep {
        terms: vec![
            ("action_rate", da.iter().map(|x| x * x).sum()),
            ("grasp", ind(grasped_now)),
            ("hold", ind(held_at_goal && !lost)),
            ("object_goal", if s.attached { 1.0 - (5.0 * d_og).tanh() } else { 0.0 }),
            ("reach", if s.attached { 1.0 } else { 1.0 - (5.0 * reach_after).tanh() }),
            ("termination", ind(lost)),
            ("velocity", a[0] * a[0] + a[1] * a[1]),
        ],
        cause: if lost {
            TerminationCause::ObjectLost
        } else {
            TerminationCause::None
        },
        success: held_at_goal && !lost,
        progress_event: held_at_goal && !lost,
    }
}

/// (teacher extero, student extero, rest without time/beta, critic without time)
pub(crate) fn dims(p: &GrabHoldParams) -> (usize, usize, usize, usize) {
    (9, p.rays, 7, 16)
}

fn edge_distances(p: &GrabHoldParams, c: [f64; 2]) -> [f64; 4] {
    let t = &p.table;
    [t.x1 - c[0], c[0] - t.x0, t.y1 - c[1], c[1] - t.y0]
}

/// Object offset (masked, noisy), object velocity, grasp flag and the
/// object's exact distances to the four table edges.
pub(crate) fn teacher_extero<R: Rng + ?Sized>(
    p: &GrabHoldParams,
    noise: &NoiseConfig,
    s: &GrabState,
    rng: &mut R,
) -> Vec<f64> {
    let rel = [s.object[0] - s.effector[0], s.object[1] - s.effector[1]];
    let mut o = vec![
        rel[0] + uniform_noise(rng, noise.object),
        rel[1] + uniform_noise(rng, noise.object),
        s.object_vel[0],
        s.object_vel[1],
        if s.attached { 1.0 } else { 0.0 },
    ];
    o.extend(edge_distances(p, s.object));
    o
}

/// Ray scan from the effector against the table boundary and the object.
pub(crate) fn student_extero<R: Rng + ?Sized>(
    p: &GrabHoldParams,
    noise: &NoiseConfig,
    s: &GrabState,
    rng: &mut R,
) -> Vec<f64> {
    let obj = Disc {
        x: s.object[0],
        y: s.object[1],
        r: p.object_radius,
    };
    let bounds = Rect {
        x0: p.table.x0.min(s.effector[0]),
        x1: p.table.x1.max(s.effector[0]),
        y0: p.table.y0,
        y1: p.table.y1,
    };
    ray_directions(p.rays)
        .into_iter()
        .map(|dir| {
            let mut t = ray_rect_exit(s.effector, dir, &bounds);
            if let Some(h) = ray_disc(s.effector, dir, &obj) {
                t = t.min(h);
            }
            t + uniform_noise(rng, noise.ray)
        })
        .collect()
}

/// Effector velocity (noisy), previous action and goal offset from effector.
pub(crate) fn rest<R: Rng + ?Sized>(
    p: &GrabHoldParams,
    noise: &NoiseConfig,
    s: &GrabState,
    prev_action: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    let _ = p;
    vec![
        s.effector_vel[0] + uniform_noise(rng, noise.proprio),
        s.effector_vel[1] + uniform_noise(rng, noise.proprio),
        prev_action[0],
        prev_action[1],
        prev_action[2],
        s.goal[0] - s.effector[0],
        s.goal[1] - s.effector[1],
    ]
}

pub(crate) fn critic_obs(p: &GrabHoldParams, s: &GrabState, prev_action: &[f64]) -> Vec<f64> {
    let _ = p;
    vec![
        s.effector[0],
        s.effector[1],
        s.effector_vel[0],
        s.effector_vel[1],
        s.object[0],
        s.object[1],
        s.object[0] - s.effector[0],
        s.object[1] - s.effector[1],
        if s.attached { 1.0 } else { 0.0 },
        s.goal[0],
        s.goal[1],
        s.goal[0] - s.object[0],
        s.goal[1] - s.object[1],
        prev_action[0],
        prev_action[1],
        prev_action[2],
    ]
}

pub(crate) fn geometry(p: &GrabHoldParams, s: &GrabState) -> serde_json::Value {
    serde_json::json!({
        "kind": "table",
        "table": p.table,
        "effector": {"x": s.effector[0], "y": s.effector[1]},
        "object": {"x": s.object[0], "y": s.object[1], "r": p.object_radius, "attached": s.attached},
        "goal": {"x": s.goal[0], "y": s.goal[1], "tolerance": p.goal_tolerance},
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Action, Env, EnvConfig, EnvLayout, Scene, SimState, Task};
    use super::*;
    use crate::seed::Seed;

    fn grab(env: &Env) -> &GrabState {
        match &env.state().sim {
            SimState::GrabHold(s) => s,
            _ => unreachable!(),
        }
    }

    fn env_with(scene: GrabScene, slip: f64) -> Env {
        let mut c = EnvConfig::for_task(Task::GrabHold);
        c.grabhold.slip_coef = slip;
        let mut env = Env::new(c, Seed(4)).unwrap();
        env.reset_to(
            &EnvLayout {
                level: 0,
                seed: 3,
                scene: Scene::GrabHold(scene),
            },
            0,
        )
        .unwrap();
        env
    }

    #[test]
    fn object_pushed_past_edge_is_lost() {
        let mut env = env_with(
            GrabScene {
                effector: [0.5, 0.0],
                object: [0.57, 0.0],
                goal: [0.3, 0.0],
            },
            0.0,
        );
        let mut last = None;
        for _ in 0..10 {
            let r = env.step(&Action::Continuous(vec![1.0, 0.0, 0.0])).unwrap();
            let done = r.terminated;
            last = Some(r);
            if done {
                break;
            }
        }
        let r = last.unwrap();
        assert!(r.terminated);
        assert_eq!(r.cause, TerminationCause::ObjectLost);
        assert_eq!(env.config().reward_weights["termination"], -20.0);
        assert!((r.reward_terms["termination"] - 0.1 * -20.0).abs() < 1e-12);
    }

    #[test]
    fn grasp_carry_and_hold_without_termination() {
        let mut env = env_with(
            GrabScene {
                effector: [0.0, 0.0],
                object: [0.03, 0.0],
                goal: [0.2, 0.0],
            },
            0.0,
        );
        let r = env.step(&Action::Continuous(vec![0.0, 0.0, 1.0])).unwrap();
        assert!(r.reward_terms["grasp"] > 0.0);
        assert!(grab(&env).attached);
        let mut holds = 0;
        for _ in 0..10 {
            let r = env.step(&Action::Continuous(vec![0.4, 0.0, 1.0])).unwrap();
            assert!(!r.terminated);
            if r.success {
                holds += 1;
            }
        }
        // keep holding still at the goal
        let r = env.step(&Action::Continuous(vec![0.0, 0.0, 1.0])).unwrap();
        assert!(r.success && !r.terminated);
        assert!(holds >= 1);
        assert_eq!(env.outcome(), None);
    }

    #[test]
    fn level_ranges_grow() {
        let p = GrabHoldParams::default();
        let mut rng = Seed(1).rng();
        let near = (0..200)
            .map(|_| {
                let s = sample_scene(&p, 0, &mut rng);
                dist(s.effector, s.object)
            })
            .fold(0.0, f64::max);
        let far = (0..200)
            .map(|_| {
                let s = sample_scene(&p, 19, &mut rng);
                dist(s.effector, s.object)
            })
            .fold(0.0, f64::max);
        assert!(near <= 0.1 + 1e-12);
        assert!(far > 0.3);
    }

    #[test]
    fn reward_total_is_sum_of_terms() {
        let mut env = Env::new(EnvConfig::for_task(Task::GrabHold), Seed(17)).unwrap();
        env.reset(19).unwrap();
        let mut k = 0.0_f64;
        loop {
            k += 0.37;
            let a = vec![k.sin(), k.cos(), (2.0 * k).sin()];
            let r = env.step(&Action::Continuous(a)).unwrap();
            let total: f64 = r.reward_terms.values().sum();
            assert_eq!(total, r.reward_total);
            if r.terminated {
                assert_ne!(r.cause, TerminationCause::None);
                break;
            }
        }
    }
}
