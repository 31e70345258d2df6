//! Evaluation of a checkpoint across a sweep of `beta` values on a fixed set
//! of environment layouts, with percentile bootstrap intervals, and
//! teacher/student reward-term comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::envs::{sample_layouts, Env, EnvLayout, ObsStack, TerminationCause};
use crate::error::{config_err, Result};
use crate::risk::{Metric, RiskSpec};
use crate::seed::{Seed, STREAM_BOOTSTRAP};

/// Smallest CVaR level used in evaluation sweeps.
pub const CVAR_EVAL_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub layouts: Vec<EnvLayout>,
    pub rollouts_per_env: usize,
    pub betas: Vec<f64>,
    /// Tail fraction for the empirical CVaR of returns.
    pub alpha: f64,
    pub bootstrap_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl EvalProtocol {
    /// `envs` layouts at the task's top level with the metric's default sweep.
    pub fn standard(ck: &Checkpoint, envs: usize, rollouts_per_env: usize, seed: u64) -> Result<Self> {
        let env = &ck.metadata.env;
        Ok(Self {
            layouts: sample_layouts(env, env.task.max_level(), envs, Seed(seed).stream("layouts"))?,
            rollouts_per_env,
            betas: ck.metadata.metric.eval_betas(),
            alpha: 0.2,
            bootstrap_iters: 2000,
            confidence: 0.95,
            seed,
        })
    }

    pub fn validate(&self, metric: Metric) -> Result<()> {
        if self.layouts.is_empty() {
            return Err(config_err("eval protocol needs at least one layout"));
        }
        if self.rollouts_per_env == 0 {
            return Err(config_err("eval.rollouts_per_env must be >= 1"));
        }
        if self.betas.is_empty() {
            return Err(config_err("eval protocol needs at least one beta"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config_err("eval.alpha must lie in (0, 1]"));
        }
        if self.bootstrap_iters < 100 {
            return Err(config_err("eval.bootstrap_iters must be >= 100"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(config_err("eval.confidence must lie in (0, 1)"));
        }
        for &b in &self.betas {
            RiskSpec::new(metric, b)?;
            if metric == Metric::Cvar && b < CVAR_EVAL_FLOOR {
                return Err(config_err(format!("cvar sweep beta {b} below the floor {CVAR_EVAL_FLOOR}")));
            }
        }
        Ok(())
    }
}

/// Mean of the `max(1, floor(alpha * M))` smallest samples.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(config_err("empirical CVaR of an empty sample"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(config_err("CVaR alpha must lie in (0, 1]"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((alpha * s.len() as f64 + 1e-9).floor() as usize).max(1);
    Ok(s[..k].iter().sum::<f64>() / k as f64)
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Percentile bootstrap interval of `statistic`. With `strata`, each
/// resample draws within every stratum as many samples as it holds.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    samples: &[f64],
    strata: Option<&[usize]>,
    statistic: &dyn Fn(&[f64]) -> f64,
    iters: usize,
    confidence: f64,
    rng: &mut R,
) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let groups: Vec<Vec<f64>> = match strata {
        Some(labels) => {
            let mut map: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (x, l) in samples.iter().zip(labels) {
                map.entry(*l).or_default().push(*x);
            }
            map.into_values().collect()
        }
        None => vec![samples.to_vec()],
    };
    let mut stats = Vec::with_capacity(iters);
    let mut buf = Vec::with_capacity(samples.len());
    for _ in 0..iters {
        buf.clear();
        for g in &groups {
            for _ in 0..g.len() {
                buf.push(g[rng.random_range(0..g.len())]);
            }
        }
        stats.push(statistic(&buf));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    (percentile(&stats, tail), percentile(&stats, 1.0 - tail))
}

/// Linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutClass {
    Success,
    Failure,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub beta: f64,
    pub env: usize,
    pub rollout: usize,
    pub ret: f64,
    pub length: usize,
    pub cause: TerminationCause,
    pub class: RolloutClass,
    pub time_to_success: Option<usize>,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub beta: f64,
    pub rollouts: usize,
    pub success_rate: Stat,
    /// Collisions or lost objects.
    pub failure_rate: Stat,
    pub collision_rate: Stat,
    pub timeout_rate: Stat,
    pub mean_return: Stat,
    pub cvar_return: Stat,
    pub time_to_success: Option<Stat>,
    pub time_to_failure: Option<Stat>,
    pub terms: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: Metric,
    pub kind: CheckpointKind,
    pub alpha: f64,
    pub confidence: f64,
    pub per_beta: Vec<BetaReport>,
    pub rollouts: Vec<RolloutRecord>,
}

impl EvalReport {
    pub fn at(&self, beta: f64) -> Option<&BetaReport> {
        self.per_beta.iter().find(|b| b.beta == beta)
    }
}

/// Runs one deterministic mean-action rollout.
fn rollout(ck: &Checkpoint, env: &mut Env, layout: &EnvLayout, rollout_seed: u64, beta: f64) -> Result<(f64, usize, TerminationCause, bool, Option<usize>, BTreeMap<String, f64>)> {
    env.reset_to(layout, rollout_seed)?;
    let student = ck.kind == CheckpointKind::Student;
    let extero = |env: &mut Env| if student { env.student_extero() } else { env.teacher_extero() };
    let mut stack = ObsStack::new(ck.metadata.env.stack);
    stack.reset(&extero(env));
    let mut terms: BTreeMap<String, f64> = env.config().term_names().iter().map(|t| (t.to_string(), 0.0)).collect();
    let mut ret = 0.0;
    let mut t = 0;
    let mut first_success = None;
    loop {
        let mut obs = stack.stacked();
        obs.extend(env.rest(beta));
        let a = ck.policy.mean_action(&obs)?;
        let r = env.step(&a)?;
        t += 1;
        ret += r.reward_total;
        for (k, v) in &r.reward_terms {
            *terms.get_mut(k).expect("known term") += v;
        }
        if r.success && first_success.is_none() {
            first_success = Some(t);
        }
        if r.terminated {
            return Ok((ret, t, r.cause, env.state().episode_success, first_success, terms));
        }
        stack.push(&extero(env));
    }
}

pub fn run_eval(ck: &Checkpoint, protocol: &EvalProtocol) -> Result<EvalReport> {
    ck.validate()?;
    protocol.validate(ck.metadata.metric)?;
    let mut env = Env::new(ck.metadata.env.clone(), Seed(protocol.seed))?;
    let rollout_seeds = Seed(protocol.seed).stream("rollouts");
    let mut records = Vec::new();
    for &beta in &protocol.betas {
        for (e, layout) in protocol.layouts.iter().enumerate() {
            for r in 0..protocol.rollouts_per_env {
                let rs = rollout_seeds.index(r as u64).0;
                let (ret, length, cause, success, tts, terms) = rollout(ck, &mut env, layout, rs, beta)?;
                let class = if cause.is_failure() {
                    RolloutClass::Failure
                } else if success {
                    RolloutClass::Success
                } else {
                    RolloutClass::Timeout
                };
                records.push(RolloutRecord {
                    beta,
                    env: e,
                    rollout: r,
                    ret,
                    length,
                    cause,
                    class,
                    time_to_success: tts,
                    terms,
                });
            }
        }
    }
    let mut rng = Seed(protocol.seed).stream(STREAM_BOOTSTRAP).rng();
    let mut per_beta = Vec::new();
    for &beta in &protocol.betas {
        let recs: Vec<&RolloutRecord> = records.iter().filter(|r| r.beta == beta).collect();
        per_beta.push(aggregate(beta, &recs, protocol, &mut rng)?);
    }
    Ok(EvalReport {
        task: ck.metadata.task.to_string(),
        metric: ck.metadata.metric,
        kind: ck.kind,
        alpha: protocol.alpha,
        confidence: protocol.confidence,
        per_beta,
        rollouts: records,
    })
}

fn aggregate<R: Rng + ?Sized>(beta: f64, recs: &[&RolloutRecord], p: &EvalProtocol, rng: &mut R) -> Result<BetaReport> {
    let strata: Vec<usize> = recs.iter().map(|r| r.env).collect();
    let mut stat = |xs: &[f64], labels: &[usize], f: &dyn Fn(&[f64]) -> f64| {
        let (lo, hi) = bootstrap_ci(xs, Some(labels), f, p.bootstrap_iters, p.confidence, rng);
        Stat { value: f(xs), lo, hi }
    };
    let indicator = |pred: &dyn Fn(&RolloutRecord) -> bool| -> Vec<f64> {
        recs.iter().map(|r| if pred(r) { 1.0 } else { 0.0 }).collect()
    };
    let returns: Vec<f64> = recs.iter().map(|r| r.ret).collect();
    let alpha = p.alpha;
    let cvar = move |xs: &[f64]| empirical_cvar(xs, alpha).unwrap_or(f64::NAN);
    let success_rate = stat(&indicator(&|r| r.class == RolloutClass::Success), &strata, &mean);
    let failure_rate = stat(&indicator(&|r| r.class == RolloutClass::Failure), &strata, &mean);
    let collision_rate = stat(&indicator(&|r| r.cause == TerminationCause::Collision), &strata, &mean);
    let timeout_rate = stat(&indicator(&|r| r.class == RolloutClass::Timeout), &strata, &mean);
    let mean_return = stat(&returns, &strata, &mean);
    let cvar_return = stat(&returns, &strata, &cvar);
    let subset = |pick: &dyn Fn(&RolloutRecord) -> Option<f64>| -> (Vec<f64>, Vec<usize>) {
        recs.iter().filter_map(|r| pick(r).map(|x| (x, r.env))).unzip()
    };
    let (tts, tts_l) = subset(&|r| r.time_to_success.map(|t| t as f64));
    let time_to_success = (!tts.is_empty()).then(|| stat(&tts, &tts_l, &mean));
    let (ttf, ttf_l) = subset(&|r| (r.class == RolloutClass::Failure).then_some(r.length as f64));
    let time_to_failure = (!ttf.is_empty()).then(|| stat(&ttf, &ttf_l, &mean));
    let mut terms = BTreeMap::new();
    if let Some(first) = recs.first() {
        for name in first.terms.keys() {
            let xs: Vec<f64> = recs.iter().map(|r| r.terms[name]).collect();
            terms.insert(name.clone(), stat(&xs, &strata, &mean));
        }
    }
    Ok(BetaReport {
        beta,
        rollouts: recs.len(),
        success_rate,
        failure_rate,
        collision_rate,
        timeout_rate,
        mean_return,
        cvar_return,
        time_to_success,
        time_to_failure,
        terms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDifference {
    pub betas: Vec<f64>,
    /// Per term, mean cumulative teacher-minus-student difference per beta.
    pub differences: BTreeMap<String, Vec<f64>>,
    /// Per term, spread of the difference across betas divided by the mean
    /// absolute teacher cumulative value. Absent for a single beta.
    pub flatness: Option<BTreeMap<String, f64>>,
}

/// Compares two reports produced with the same protocol.
pub fn term_difference(teacher: &EvalReport, student: &EvalReport) -> Result<TermDifference> {
    let betas: Vec<f64> = teacher.per_beta.iter().map(|b| b.beta).collect();
    let s_betas: Vec<f64> = student.per_beta.iter().map(|b| b.beta).collect();
    if betas != s_betas {
        return Err(config_err("teacher and student reports use different beta sweeps"));
    }
    let names: Vec<String> = teacher.per_beta.first().map(|b| b.terms.keys().cloned().collect()).unwrap_or_default();
    let mut differences = BTreeMap::new();
    let mut flat = BTreeMap::new();
    for name in &names {
        let mut d = Vec::with_capacity(betas.len());
        let mut scale = 0.0;
        for (t, s) in teacher.per_beta.iter().zip(&student.per_beta) {
            let tv = t.terms[name].value;
            let sv = s.terms.get(name).map(|x| x.value).ok_or_else(|| config_err(format!("student report lacks term {name}")))?;
            d.push(tv - sv);
            scale += tv.abs();
        }
        scale /= betas.len() as f64;
        let spread = d.iter().copied().fold(f64::NEG_INFINITY, f64::max) - d.iter().copied().fold(f64::INFINITY, f64::min);
        flat.insert(name.clone(), spread / scale.max(1e-12));
        differences.insert(name.clone(), d);
    }
    Ok(TermDifference {
        flatness: (betas.len() > 1).then_some(flat),
        betas,
        differences,
    })
}

/// Evaluates both checkpoints under `protocol` and compares their terms.
pub fn reward_term_difference(teacher: &Checkpoint, student: &Checkpoint, protocol: &EvalProtocol) -> Result<(TermDifference, EvalReport, EvalReport)> {
    if teacher.metadata.task != student.metadata.task {
        return Err(config_err("teacher and student checkpoints are for different tasks"));
    }
    let t = run_eval(teacher, protocol)?;
    let s = run_eval(student, protocol)?;
    Ok((term_difference(&t, &s)?, t, s))
}

const CSV_HEADER: &str = "beta,rollouts,success_rate,success_lo,success_hi,failure_rate,failure_lo,failure_hi,collision_rate,collision_lo,collision_hi,timeout_rate,timeout_lo,timeout_hi,mean_return,mean_return_lo,mean_return_hi,cvar_return,cvar_return_lo,cvar_return_hi,time_to_success,time_to_success_lo,time_to_success_hi,time_to_failure,time_to_failure_lo,time_to_failure_hi";

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let opt = |x: &Option<Stat>| match x {
        Some(st) => format!("{},{},{}", st.value, st.lo, st.hi),
        None => ",,".to_string(),
    };
    let st = |x: &Stat| format!("{},{},{}", x.value, x.lo, x.hi);
    for b in &report.per_beta {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            b.beta,
            b.rollouts,
            st(&b.success_rate),
            st(&b.failure_rate),
            st(&b.collision_rate),
            st(&b.timeout_rate),
            st(&b.mean_return),
            st(&b.cvar_return),
            opt(&b.time_to_success),
            opt(&b.time_to_failure)
        );
    }
    s
}

/// Line chart of one statistic against beta with a shaded interval band.
pub fn line_chart_svg(title: &str, points: &[(f64, Stat)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    );
    let pts: Vec<&(f64, Stat)> = points.iter().filter(|(_, st)| st.value.is_finite()).collect();
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let finite = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
    let ymin = pts.iter().map(|p| finite(p.1.lo, p.1.value).min(p.1.value)).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| finite(p.1.hi, p.1.value).max(p.1.value)).fold(f64::NEG_INFINITY, f64::max);
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yspan = if ymax > ymin { ymax - ymin } else { 1.0 };
    let px = |x: f64| m + (x - xmin) / xspan * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - ymin) / yspan * (h - 2.0 * m);
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    let mut band: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(finite(p.1.hi, p.1.value)))).collect();
    band.extend(pts.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.0), py(finite(p.1.lo, p.1.value)))));
    let _ = writeln!(s, "<polygon points=\"{}\" fill=\"steelblue\" fill-opacity=\"0.25\" stroke=\"none\"/>", band.join(" "));
    let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1.value))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>", line.join(" "));
    for p in &pts {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>", px(p.0), py(p.1.value));
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            px(p.0),
            h - m + 16.0,
            p.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>",
        m - 4.0,
        py(ymax) + 4.0,
        ymax,
        m - 4.0,
        py(ymin) + 4.0,
        ymin
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">beta</text>",
        w / 2.0,
        h - 8.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.json`, `metrics.csv`, `raw_rollouts.jsonl` and one SVG
/// chart per statistic under `charts/`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("charts"))?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    let mut raw = String::new();
    for r in &report.rollouts {
        raw.push_str(&serde_json::to_string(r)?);
        raw.push('\n');
    }
    fs::write(dir.join("raw_rollouts.jsonl"), raw)?;
    let series: [(&str, &dyn Fn(&BetaReport) -> Option<Stat>); 8] = [
        ("success_rate", &|b| Some(b.success_rate)),
        ("failure_rate", &|b| Some(b.failure_rate)),
        ("collision_rate", &|b| Some(b.collision_rate)),
        ("timeout_rate", &|b| Some(b.timeout_rate)),
        ("mean_return", &|b| Some(b.mean_return)),
        ("cvar_return", &|b| Some(b.cvar_return)),
        ("time_to_success", &|b| b.time_to_success),
        ("time_to_failure", &|b| b.time_to_failure),
    ];
    for (name, f) in series {
        let pts: Vec<(f64, Stat)> = report.per_beta.iter().filter_map(|b| f(b).map(|s| (b.beta, s))).collect();
        fs::write(dir.join("charts").join(format!("{name}.svg")), line_chart_svg(name, &pts))?;
    }
    Ok(())
}
