//! Exact finite-horizon oracles for the tabular task.
//!
//! [`env_to_mdp`] builds an explicit model of the cliff grid independently of
//! the simulator code. On that model [`distributional_eval`] computes exact
//! return distributions of a fixed policy by backward induction over finite
//! supports, and [`risk_value_iteration`] solves the recursively distorted
//! control problem.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, Task};
use crate::error::{config_err, Error, Result};
use crate::risk::{distorted_expectation, RiskSpec};

/// Explicit finite MDP. `p[s][a][s']` and `r[s][a][s']` are dense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<Vec<f64>>>,
    /// Absorbing states with zero reward.
    pub terminal: Vec<bool>,
    /// Terminal states that count as failure (cliff cells).
    pub failure: Vec<bool>,
    pub gamma: f64,
    pub horizon: usize,
    pub start: usize,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = &self.p[s][a];
                if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::Contract(format!("P(.|{s},{a}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.p[s][a]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(move |(s2, &p)| (s2, p, self.r[s][a][s2]))
    }
}

/// Builds the cliff-grid MDP from an environment config, including its
/// reward weights, reward scale and horizon. `gamma` is the discount the
/// oracle should use.
pub fn env_to_mdp(config: &EnvConfig, gamma: f64) -> Result<TabularMdp> {
    if config.task != Task::CliffSlip {
        return Err(Error::Unsupported(format!("no tabular model for task {}", config.task)));
    }
    config.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(config_err("oracle gamma must lie in (0, 1]"));
    }
    let g = &config.cliffslip;
    let (rows, cols) = (g.rows, g.cols);
    let n = rows * cols;
    let cell = |r: usize, c: usize| r * cols + c;
    let bottom = rows - 1;
    let is_cliff = |r: usize, c: usize| r == bottom && c >= 1 && c + 1 < cols;
    let is_goal = |r: usize, c: usize| r == bottom && c + 1 == cols;
    let w = |k: &str| config.reward_scale * config.reward_weights[k];
    let (r_step, r_goal, r_cliff) = (w("step"), w("goal"), w("cliff"));

    // intended destination of each move: up, right, down, left
    let dest = |r: usize, c: usize, a: usize| -> usize {
        match a {
            0 if r > 0 => cell(r - 1, c),
            1 if c + 1 < cols => cell(r, c + 1),
            2 if r + 1 < rows => cell(r + 1, c),
            3 if c > 0 => cell(r, c - 1),
            _ => cell(r, c),
        }
    };
    let mut p = vec![vec![vec![0.0; n]; 4]; n];
    let mut rw = vec![vec![vec![0.0; n]; 4]; n];
    let mut terminal = vec![false; n];
    let mut failure = vec![false; n];
    for r in 0..rows {
        for c in 0..cols {
            let s = cell(r, c);
            if is_cliff(r, c) || is_goal(r, c) {
                terminal[s] = true;
                failure[s] = is_cliff(r, c);
                for a in 0..4 {
                    p[s][a][s] = 1.0;
                }
                continue;
            }
            for a in 0..4 {
                p[s][a][dest(r, c, a)] += 1.0 - g.p_slip;
                for b in 0..4 {
                    p[s][a][dest(r, c, b)] += g.p_slip / 4.0;
                }
                for s2 in 0..n {
                    let (r2, c2) = (s2 / cols, s2 % cols);
                    rw[s][a][s2] = if is_cliff(r2, c2) {
                        r_cliff
                    } else if is_goal(r2, c2) {
                        r_goal
                    } else {
                        r_step
                    };
                }
            }
        }
    }
    let mdp = TabularMdp {
        n_states: n,
        n_actions: 4,
        p,
        r: rw,
        terminal,
        failure,
        gamma,
        horizon: config.horizon,
        start: cell(bottom, 0),
    };
    mdp.validate()?;
    Ok(mdp)
}

/// A finite distribution with ascending atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportDistribution {
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
}

impl SupportDistribution {
    pub fn dirac(x: f64) -> Self {
        Self {
            atoms: vec![x],
            probs: vec![1.0],
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Sorts, merges atoms closer than `merge_tol`, prunes tiny masses and
    /// renormalises.
    fn from_pairs(mut pairs: Vec<(f64, f64)>, opts: &SupportOptions) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut probs: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, p) in pairs {
            match atoms.last() {
                Some(&last) if (x - last).abs() <= opts.merge_tol => {
                    *probs.last_mut().expect("aligned") += p;
                }
                _ => {
                    atoms.push(x);
                    probs.push(p);
                }
            }
        }
        let keep: Vec<usize> = (0..atoms.len()).filter(|&i| probs[i] >= opts.prune).collect();
        let total: f64 = keep.iter().map(|&i| probs[i]).sum();
        Self {
            atoms: keep.iter().map(|&i| atoms[i]).collect(),
            probs: keep.iter().map(|&i| probs[i] / total).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportOptions {
    pub merge_tol: f64,
    pub prune: f64,
    pub cap: usize,
}

impl Default for SupportOptions {
    fn default() -> Self {
        Self {
            merge_tol: 1e-9,
            prune: 1e-12,
            cap: 200_000,
        }
    }
}

/// Stationary stochastic policy: `pi[s][a]`.
pub type TabularPolicy = Vec<Vec<f64>>;

pub fn deterministic_policy(actions: &[usize], n_actions: usize) -> TabularPolicy {
    actions
        .iter()
        .map(|&a| (0..n_actions).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Exact return distributions of `pi` with `horizon` steps to go, per state.
pub fn distributional_eval(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    horizon: usize,
    opts: &SupportOptions,
) -> Result<Vec<SupportDistribution>> {
    if pi.len() != mdp.n_states || pi.iter().any(|row| row.len() != mdp.n_actions) {
        return Err(config_err("policy shape does not match the MDP"));
    }
    let mut z: Vec<SupportDistribution> = vec![SupportDistribution::dirac(0.0); mdp.n_states];
    for step in 1..=horizon {
        let mut next = Vec::with_capacity(mdp.n_states);
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                next.push(SupportDistribution::dirac(0.0));
                continue;
            }
            let mut pairs = Vec::new();
            for (a, &pa) in pi[s].iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (s2, p, r) in mdp.successors(s, a) {
                    for (x, q) in z[s2].atoms.iter().zip(&z[s2].probs) {
                        pairs.push((r + mdp.gamma * x, pa * p * q));
                    }
                }
            }
            let d = SupportDistribution::from_pairs(pairs, opts);
            if d.len() > opts.cap {
                return Err(Error::SupportExplosion {
                    state: s,
                    cap: opts.cap,
                    step,
                });
            }
            next.push(d);
        }
        z = next;
    }
    Ok(z)
}

/// Values and greedy actions indexed `[steps_to_go][state]`; index 0 is the
/// zero-steps-to-go boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSolution {
    pub spec: RiskSpec,
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<usize>>,
}

impl RiskSolution {
    /// Greedy action at `state` with `t` steps already taken.
    pub fn action(&self, state: usize, t: usize) -> usize {
        let h = self.policy.len() - 1;
        self.policy[h - t.min(h)][state]
    }
}

/// `V_h(s) = max_a rho_beta[r + gamma V_{h-1}(s')]` with the distortion
/// applied to the exact one-step mixture; ties go to the lowest action.
pub fn risk_value_iteration(mdp: &TabularMdp, spec: &RiskSpec, horizon: usize) -> Result<RiskSolution> {
    let mut values = vec![vec![0.0; mdp.n_states]];
    let mut policy = vec![vec![0; mdp.n_states]];
    for h in 1..=horizon {
        let prev = &values[h - 1];
        let mut v = vec![0.0; mdp.n_states];
        let mut act = vec![0; mdp.n_states];
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                let (atoms, probs): (Vec<f64>, Vec<f64>) = mdp
                    .successors(s, a)
                    .map(|(s2, p, r)| (r + mdp.gamma * prev[s2], p))
                    .unzip();
                let q = distorted_expectation(&atoms, &probs, spec)?;
                if q > best + 1e-12 {
                    best = q;
                    act[s] = a;
                }
            }
            v[s] = best;
        }
        values.push(v);
        policy.push(act);
    }
    Ok(RiskSolution {
        spec: *spec,
        values,
        policy,
    })
}

/// Exact probability of ending in a failure state within `horizon` steps
/// from the start state under a time-dependent greedy policy.
pub fn failure_probability(mdp: &TabularMdp, sol: &RiskSolution, horizon: usize) -> f64 {
    let mut dist = vec![0.0; mdp.n_states];
    dist[mdp.start] = 1.0;
    for t in 0..horizon {
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            if dist[s] == 0.0 {
                continue;
            }
            if mdp.terminal[s] {
                next[s] += dist[s];
                continue;
            }
            let a = sol.action(s, t);
            for (s2, p, _) in mdp.successors(s, a) {
                next[s2] += dist[s] * p;
            }
        }
        dist = next;
    }
    (0..mdp.n_states).filter(|&s| mdp.failure[s]).map(|s| dist[s]).sum()
}

/// Cells visited when following the greedy policy's intended moves without
/// slipping, from the start until a terminal state or the horizon.
pub fn greedy_path(mdp: &TabularMdp, sol: &RiskSolution, horizon: usize) -> Vec<usize> {
    let mut s = mdp.start;
    let mut path = vec![s];
    for t in 0..horizon {
        if mdp.terminal[s] {
            break;
        }
        let a = sol.action(s, t);
        // most likely successor is the intended one
        let row = &mdp.p[s][a];
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        s = best;
        path.push(s);
    }
    path
}

/// Action per cell of the route that climbs to the top row, crosses it and
/// descends to the goal, staying as far from the cliff as the grid allows.
pub fn cliffslip_safe_policy(config: &EnvConfig) -> Vec<usize> {
    let g = &config.cliffslip;
    let mut acts = vec![0; g.rows * g.cols];
    for r in 0..g.rows {
        for c in 0..g.cols {
            acts[r * g.cols + c] = if c + 1 == g.cols {
                2
            } else if r == 0 {
                1
            } else {
                0
            };
        }
    }
    acts
}
