//! Tabular cliff grid with slippery moves.
//!
//! Cells are `(row, col)` with row 0 at the top. The agent starts in the
//! bottom-left cell, the goal is the bottom-right cell and the cells between
//! them on the bottom row are cliff. Moves into a wall leave the agent in
//! place. With probability `p_slip` the commanded move is replaced by one
//! drawn uniformly from all four.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_noise, NoiseConfig, TaskStep, TerminationCause};
use crate::error::{config_err, Result};

pub const TERMS: [&str; 3] = ["cliff", "goal", "step"];

/// Up, right, down, left as `(d_row, d_col)`.
pub const MOVES: [(i64, i64); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

pub fn default_weights() -> BTreeMap<String, f64> {
    [("cliff", -100.0), ("goal", 10.0), ("step", -1.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffSlipParams {
    pub rows: usize,
    pub cols: usize,
    pub p_slip: f64,
}

impl Default for CliffSlipParams {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 4,
            p_slip: 0.1,
        }
    }
}

impl CliffSlipParams {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 3 {
            return Err(config_err("cliffslip grid needs at least 2 rows and 3 columns"));
        }
        if !(0.0..=1.0).contains(&self.p_slip) {
            return Err(config_err("cliffslip.p_slip must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn start(&self) -> (usize, usize) {
        (self.rows - 1, 0)
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.rows - 1, self.cols - 1)
    }

    pub fn is_cliff(&self, row: usize, col: usize) -> bool {
        row == self.rows - 1 && col > 0 && col < self.cols - 1
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliffState {
    pub row: usize,
    pub col: usize,
}

pub(crate) fn initial_state(p: &CliffSlipParams) -> CliffState {
    let (row, col) = p.start();
    CliffState { row, col }
}

fn apply_move(p: &CliffSlipParams, s: CliffState, a: usize) -> CliffState {
    let (dr, dc) = MOVES[a];
    let r = s.row as i64 + dr;
    let c = s.col as i64 + dc;
    if r < 0 || c < 0 || r >= p.rows as i64 || c >= p.cols as i64 {
        s
    } else {
        CliffState {
            row: r as usize,
            col: c as usize,
        }
    }
}

pub(crate) fn step<R: Rng + ?Sized>(p: &CliffSlipParams, s: &mut CliffState, action: usize, rng: &mut R) -> TaskStep {
    let slip = p.p_slip > 0.0 && rng.random::<f64>() < p.p_slip;
    let a = if slip { rng.random_range(0..4) } else { action };
    *s = apply_move(p, *s, a);
    let (cliff, goal) = if p.is_cliff(s.row, s.col) {
        (1.0, 0.0)
    } else if (s.row, s.col) == p.goal() {
        (0.0, 1.0)
    } else {
        (0.0, 0.0)
    };
    let step = if cliff == 0.0 && goal == 0.0 { 1.0 } else { 0.0 };
    let cause = if cliff > 0.0 {
        TerminationCause::Collision
    } else if goal > 0.0 {
        TerminationCause::Goal
    } else {
        TerminationCause::None
    };
    TaskStep {
        terms: vec![("cliff", cliff), ("goal", goal), ("step", step)],
        cause,
        success: goal > 0.0,
        progress_event: goal > 0.0,
    }
}

pub(crate) fn dims(p: &CliffSlipParams) -> (usize, usize, usize, usize) {
    (p.n_cells(), 6, 0, p.n_cells())
}

fn one_hot(p: &CliffSlipParams, s: &CliffState) -> Vec<f64> {
    let mut v = vec![0.0; p.n_cells()];
    v[p.index(s.row, s.col)] = 1.0;
    v
}

pub(crate) fn teacher_extero(p: &CliffSlipParams, s: &CliffState) -> Vec<f64> {
    one_hot(p, s)
}

/// Normalised position plus free distance (in cells) to the boundary in each
/// move direction, all with ray noise.
pub(crate) fn student_extero<R: Rng + ?Sized>(
    p: &CliffSlipParams,
    noise: &NoiseConfig,
    s: &CliffState,
    rng: &mut R,
) -> Vec<f64> {
    let clean = [
        s.row as f64 / (p.rows - 1) as f64,
        s.col as f64 / (p.cols - 1) as f64,
        s.row as f64,
        (p.cols - 1 - s.col) as f64,
        (p.rows - 1 - s.row) as f64,
        s.col as f64,
    ];
    clean.iter().map(|x| x + uniform_noise(rng, noise.ray)).collect()
}

pub(crate) fn critic_obs(p: &CliffSlipParams, s: &CliffState) -> Vec<f64> {
    one_hot(p, s)
}

pub(crate) fn geometry(p: &CliffSlipParams, s: &CliffState) -> serde_json::Value {
    let cliff: Vec<[usize; 2]> = (0..p.cols)
        .filter(|&c| p.is_cliff(p.rows - 1, c))
        .map(|c| [p.rows - 1, c])
        .collect();
    serde_json::json!({
        "kind": "grid",
        "rows": p.rows,
        "cols": p.cols,
        "start": [p.start().0, p.start().1],
        "goal": [p.goal().0, p.goal().1],
        "cliff": cliff,
        "agent": [s.row, s.col],
    })
}
