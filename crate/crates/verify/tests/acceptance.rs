//! Acceptance gate: one pass/fail line per primary criterion. Runs as a plain
//! binary so the lines show up in `cargo test` output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use distrisk_core::checkpoint::Checkpoint;
use distrisk_core::distill::{dagger_distill, DistillConfig};
use distrisk_core::envs::{curriculum_update, obs_dims, Action, Env, EnvConfig, Outcome, SimState, Task};
use distrisk_core::evalsuite::{run_eval, term_difference, EvalProtocol, EvalReport};
use distrisk_core::gradcheck;
use distrisk_core::nn::{AdamConfig, MlpGrads};
use distrisk_core::oracle::{
    cliffslip_safe_policy, deterministic_policy, distributional_eval, env_to_mdp, failure_probability,
    risk_value_iteration, SupportOptions,
};
use distrisk_core::policy::{new_critic, NetworkConfig};
use distrisk_core::quantile::{dist_mean, pinball_loss, project_discrete};
use distrisk_core::risk::{distorted_value_slice, distortion, distortion_weights, normal_cdf, Metric, RiskSpec};
use distrisk_core::rollout::{lambda_return_targets, RolloutBatch};
use distrisk_core::seed::Seed;
use distrisk_core::trainer::{train_teacher, TeacherSetup, TrainerConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

type Verdict = Result<(bool, String), String>;

struct Gate {
    filters: Vec<String>,
    list: bool,
    ran: usize,
    failures: usize,
}

impl Gate {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn check(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) {
        if !self.wants(name) {
            return;
        }
        if self.list {
            println!("{name}: test");
            return;
        }
        self.ran += 1;
        let t0 = Instant::now();
        let res = f();
        let dt = t0.elapsed();
        let (ok, detail) = match res {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = budget.is_none_or(|b| dt <= b);
        let ok = ok && in_time;
        let budget = budget.map(|b| format!(" budget {:.0}s", b.as_secs_f64())).unwrap_or_default();
        println!(
            "{} {name} [{:.2}s{budget}] {detail}",
            if ok { "PASS" } else { "FAIL" },
            dt.as_secs_f64()
        );
        if !ok {
            self.failures += 1;
        }
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn spec(metric: Metric, beta: f64) -> RiskSpec {
    RiskSpec::new(metric, beta).expect("valid spec")
}

fn risk_units() -> Verdict {
    let z = [3.5, -1.25, 8.0, 0.5, -7.0, 2.25, 4.0, -0.5];
    let mean = dist_mean(&z);
    let wang0 = distorted_value_slice(&z, &spec(Metric::Wang, 0.0));
    let cvar1 = distorted_value_slice(&z, &spec(Metric::Cvar, 1.0));
    let g = distortion(&spec(Metric::Wang, 1.0), 0.5).map_err(s)?;
    let w = distortion_weights(&spec(Metric::Cvar, 0.5), 4).map_err(s)?;
    let v = distorted_value_slice(&[1.0, 2.0, 3.0, 4.0], &spec(Metric::Cvar, 0.5));
    let ok = wang0 == mean
        && cvar1 == mean
        && (g - 0.841345).abs() <= 1e-6
        && (g - normal_cdf(1.0)).abs() <= 1e-15
        && w == [0.5, 0.5, 0.0, 0.0]
        && v == 1.5;
    Ok((ok, format!("wang0-mean {:e} cvar1-mean {:e} g(0.5) {g:.7} weights {w:?} V {v}", wang0 - mean, cvar1 - mean)))
}

fn runner() -> TestRunner {
    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn any_spec() -> impl Strategy<Value = RiskSpec> {
    (0..3usize, 0.0..=1.0f64).prop_map(|(m, u)| {
        let metric = [Metric::Neutral, Metric::Wang, Metric::Cvar][m];
        let (lo, hi) = metric.training_range();
        spec(metric, lo + u * (hi - lo))
    })
}

fn quantiles() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, 1..64)
}

fn properties() -> Verdict {
    let mut failed = Vec::new();
    let mut run = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failed.push(format!("{name}: {e}"));
        }
    };
    run(
        "simplex",
        runner()
            .run(&(any_spec(), 1..256usize), |(sp, n)| {
                let w = distortion_weights(&sp, n).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                Ok(())
            })
            .map_err(s),
    );
    run(
        "monotone g",
        runner()
            .run(&(any_spec(), 0.0..=1.0f64, 0.0..=1.0f64), |(sp, a, b)| {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let g = |t| distortion(&sp, t).map_err(|e| TestCaseError::fail(e.to_string()));
                let (glo, ghi) = (g(lo)?, g(hi)?);
                prop_assert!(glo <= ghi, "g({lo})={glo} > g({hi})={ghi}");
                prop_assert!((0.0..=1.0).contains(&glo) && (0.0..=1.0).contains(&ghi));
                Ok(())
            })
            .map_err(s),
    );
    run(
        "translation",
        runner()
            .run(&(any_spec(), quantiles(), -100.0..100.0f64), |(sp, z, c)| {
                let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
                let d = distorted_value_slice(&shifted, &sp) - (distorted_value_slice(&z, &sp) + c);
                prop_assert!(d.abs() <= 1e-9, "{d}");
                Ok(())
            })
            .map_err(s),
    );
    run(
        "homogeneity",
        runner()
            .run(&(any_spec(), quantiles(), 1e-3..10.0f64), |(sp, z, k)| {
                let scaled: Vec<f64> = z.iter().map(|x| x * k).collect();
                let d = distorted_value_slice(&scaled, &sp) - k * distorted_value_slice(&z, &sp);
                prop_assert!(d.abs() <= 1e-9, "{d}");
                Ok(())
            })
            .map_err(s),
    );
    run(
        "wang nonincreasing",
        runner()
            .run(&(quantiles(), -1.0..=1.0f64, -1.0..=1.0f64), |(z, a, b)| {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let vlo = distorted_value_slice(&z, &spec(Metric::Wang, lo));
                let vhi = distorted_value_slice(&z, &spec(Metric::Wang, hi));
                prop_assert!(vhi <= vlo + 1e-12, "V({hi})={vhi} > V({lo})={vlo}");
                Ok(())
            })
            .map_err(s),
    );
    run(
        "cvar nondecreasing",
        runner()
            .run(&(quantiles(), 0.01..=1.0f64, 0.01..=1.0f64), |(z, a, b)| {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let vlo = distorted_value_slice(&z, &spec(Metric::Cvar, lo));
                let vhi = distorted_value_slice(&z, &spec(Metric::Cvar, hi));
                prop_assert!(vlo <= vhi + 1e-12, "V({lo})={vlo} > V({hi})={vhi}");
                prop_assert!(vhi <= dist_mean(&z) + 1e-12);
                Ok(())
            })
            .map_err(s),
    );
    let ok = failed.is_empty();
    Ok((ok, if ok { "6 properties x 1000 cases".into() } else { failed.join("; ") }))
}

fn gradients() -> Verdict {
    let r = gradcheck::run(50, 0).map_err(s)?;
    let e = r.max_error();
    Ok((
        e < 1e-4,
        format!(
            "max relative error {e:.2e} over {} specs (mlp {:.1e}, pinball {:.1e}, critic {:.1e})",
            r.specs, r.mlp, r.pinball, r.critic
        ),
    ))
}

/// Exact Wasserstein-1 distance between two finite distributions.
fn w1(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = a.iter().copied().chain(b.iter().map(|&(x, p)| (x, -p))).collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for w in pts.windows(2) {
        diff += w[0].1;
        total += diff.abs() * (w[1].0 - w[0].0);
    }
    total
}

const ORACLE_EPISODES: usize = 4000;
const ORACLE_UPDATES: usize = 10_000;
const ORACLE_MINIBATCH: usize = 64;

fn oracle_equivalence() -> Verdict {
    let cfg = EnvConfig::for_task(Task::CliffSlip);
    let g = &cfg.cliffslip;
    if (g.rows, g.cols, g.p_slip, cfg.horizon) != (3, 4, 0.1, 40) {
        return Err(format!("unexpected cliffslip defaults {}x{} p_slip {} T {}", g.rows, g.cols, g.p_slip, cfg.horizon));
    }
    let gamma = TrainerConfig::for_task(Task::CliffSlip).gamma;
    let mdp = env_to_mdp(&cfg, gamma).map_err(s)?;
    let safe = cliffslip_safe_policy(&cfg);
    let exact = distributional_eval(&mdp, &deterministic_policy(&safe, mdp.n_actions), cfg.horizon, &SupportOptions::default())
        .map_err(s)?;

    // Monte Carlo rollouts of the fixed policy, turned into lambda = 1 returns.
    let n = 32;
    let mut env = Env::new(cfg.clone(), Seed(21)).map_err(s)?;
    let mut obs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..ORACLE_EPISODES {
        env.reset(0).map_err(s)?;
        let mut b = RolloutBatch {
            num_envs: 1,
            bootstrap: vec![vec![0.0; n]],
            ..RolloutBatch::default()
        };
        loop {
            let SimState::CliffSlip(st) = &env.state().sim else {
                return Err("not a grid state".into());
            };
            let a = safe[st.row * g.cols + st.col];
            obs.push(env.observe_critic());
            let r = env.step(&Action::Discrete(a)).map_err(s)?;
            b.rewards.push(r.reward_total);
            b.dones.push(r.terminated);
            b.values.push(vec![0.0; n]);
            if r.terminated {
                break;
            }
        }
        b.steps = b.rewards.len();
        targets.extend(lambda_return_targets(&b, gamma, 1.0));
    }

    let mut rng = Seed(22).rng();
    let mut critic = new_critic(obs_dims(&cfg).critic, n, &NetworkConfig::default(), &mut rng).map_err(s)?;
    let adam = AdamConfig::default();
    let mut grads = MlpGrads::zeros_like(critic.spec());
    for k in 0..ORACLE_UPDATES {
        grads.fill_zero();
        for _ in 0..ORACLE_MINIBATCH {
            let i = rng.random_range(0..obs.len());
            let (z, cache) = critic.forward(&obs[i]).map_err(s)?;
            let (_, dz) = pinball_loss(&z, &targets[i..=i], 0.0).map_err(s)?;
            let dz: Vec<f64> = dz.iter().map(|d| d / ORACLE_MINIBATCH as f64).collect();
            critic.backward_accumulate(&cache, &dz, &mut grads).map_err(s)?;
        }
        let lr = if k < ORACLE_UPDATES / 2 { 1e-2 } else { 3e-3 };
        critic.adam_step(&grads, lr, &adam).map_err(s)?;
    }

    env.reset(0).map_err(s)?;
    let mut z = critic.predict(&env.observe_critic()).map_err(s)?;
    z.sort_by(f64::total_cmp);
    let learned: Vec<(f64, f64)> = z.iter().map(|&x| (x, 1.0 / n as f64)).collect();
    let d = &exact[mdp.start];
    let truth: Vec<(f64, f64)> = d.atoms.iter().copied().zip(d.probs.iter().copied()).collect();
    let dist = w1(&learned, &truth);
    let best = project_discrete(&d.atoms, &d.probs, n).map_err(s)?;
    let best: Vec<(f64, f64)> = best.quantiles().iter().map(|&x| (x, 1.0 / n as f64)).collect();
    let floor = w1(&best, &truth);
    let max_reward = cfg.reward_weights.values().fold(f64::NEG_INFINITY, |m, &w| m.max(cfg.reward_scale * w));
    let tol = 0.1 * max_reward.abs();
    Ok((
        dist <= tol,
        format!(
            "W1 {dist:.3} <= {tol:.3} (best {n}-quantile fit {floor:.3}; mean learned {:.3} exact {:.3})",
            dist_mean(&z),
            d.mean()
        ),
    ))
}

fn dynamic_risk() -> Verdict {
    let cfg = EnvConfig::for_task(Task::CliffSlip);
    let gamma = TrainerConfig::for_task(Task::CliffSlip).gamma;
    let mdp = env_to_mdp(&cfg, gamma).map_err(s)?;
    let pf = |sp: RiskSpec| -> Result<f64, String> {
        let sol = risk_value_iteration(&mdp, &sp, cfg.horizon).map_err(s)?;
        Ok(failure_probability(&mdp, &sol, cfg.horizon))
    };
    let averse = pf(spec(Metric::Cvar, 0.1))?;
    let neutral = pf(RiskSpec::neutral())?;
    let seeking = pf(spec(Metric::Wang, -1.0))?;
    let tol = 1e-12;
    let ok = averse <= neutral + tol && neutral <= seeking + tol && seeking - averse > 1e-9;
    Ok((ok, format!("P_fall cvar0.1 {averse:.6} <= neutral {neutral:.6} <= wang-1 {seeking:.6}")))
}

fn curriculum() -> Verdict {
    use Outcome::{Failure as F, Success as S};
    let outcomes = [F, S, S, F, S, S, S, S, S, S, S, S, S, F, F, S];
    let expected = [0, 1, 2, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 8, 7, 8];
    let max = Task::RiskyNav.max_level();
    if max != 9 {
        return Err(format!("riskynav max level {max}"));
    }
    let mut level = 0;
    let mut got = Vec::new();
    for o in outcomes {
        level = curriculum_update(level, max, o);
        got.push(level);
    }
    let transitions = got == expected;

    // below the top the level is used as is; at the top it is drawn uniformly
    let mut env = Env::new(EnvConfig::for_task(Task::RiskyNav), Seed(5)).map_err(s)?;
    let mut fixed = true;
    for l in 0..max {
        for _ in 0..20 {
            fixed &= env.reset(l).map_err(s)?.effective_level == l;
        }
    }
    let draws = 5000;
    let mut counts = vec![0usize; max + 1];
    for _ in 0..draws {
        let st = env.reset(max).map_err(s)?;
        fixed &= st.level == max;
        counts[st.effective_level] += 1;
    }
    let e = draws as f64 / (max + 1) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // chi-square with 9 degrees of freedom, p = 0.001
    let uniform = chi2 < 27.877;
    Ok((
        transitions && fixed && uniform,
        format!("levels {got:?}; top-level draws chi2 {chi2:.2} (9 dof, crit 27.88)"),
    ))
}

/// The `distrisk` binary from the same target directory as this test
/// (`target/<profile>/deps/acceptance-*`), unless `DISTRISK_BIN` is set.
fn distrisk_bin() -> Result<PathBuf, String> {
    if let Some(p) = std::env::var_os("DISTRISK_BIN") {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe().map_err(s)?;
    let bin = exe
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join(format!("distrisk{}", std::env::consts::EXE_SUFFIX)))
        .ok_or("cannot locate target directory")?;
    if bin.is_file() {
        Ok(bin)
    } else {
        Err(format!("{} not found; build it with `cargo build -p distrisk-cli` or set DISTRISK_BIN", bin.display()))
    }
}

fn distrisk(args: &[&str]) -> Result<(), String> {
    let out = Command::new(distrisk_bin()?).args(args).output().map_err(s)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn same_bytes(a: &Path, b: &Path, files: &[&str]) -> Result<Vec<String>, String> {
    let mut differ = Vec::new();
    for f in files {
        if fs::read(a.join(f)).map_err(s)? != fs::read(b.join(f)).map_err(s)? {
            differ.push(f.to_string());
        }
    }
    Ok(differ)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(s)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (a, b) = (p("a"), p("b"));
    distrisk(&[
        "train", "--task", "riskynav", "--seed", "3", "--out", &a,
        "--set", "trainer.iterations=4", "--set", "trainer.num_envs=8", "--set", "trainer.steps=32",
        "--set", "trainer.checkpoint_every=2",
    ])?;
    let resolved = format!("{a}/resolved_config.json");
    distrisk(&["train", "--config", &resolved, "--out", &b])?;
    let mut differ = same_bytes(
        Path::new(&a),
        Path::new(&b),
        &["teacher.json", "metrics.jsonl", "checkpoints/teacher_00002.json"],
    )?;
    let teacher = format!("{a}/teacher.json");
    let (e1, e2) = (p("e1"), p("e2"));
    for e in [&e1, &e2] {
        distrisk(&[
            "eval", "--checkpoint", &teacher, "--out", e,
            "--set", "eval.layouts=6", "--set", "eval.rollouts_per_env=3", "--set", "eval.bootstrap_iters=200",
        ])?;
    }
    differ.extend(same_bytes(
        Path::new(&e1),
        Path::new(&e2),
        &["report.json", "metrics.csv", "raw_rollouts.jsonl"],
    )?);
    let ok = differ.is_empty();
    Ok((ok, if ok { "checkpoints, metrics and eval reports byte-identical".into() } else { format!("differ: {differ:?}") }))
}

const TEACHER_SEED: u64 = 1;
const EVAL_LAYOUTS: usize = 100;
const EVAL_ROLLOUTS: usize = 8;
const EVAL_SEED: u64 = 2024;

fn train_riskynav_teacher() -> Result<Checkpoint, String> {
    let setup = TeacherSetup {
        env: EnvConfig::for_task(Task::RiskyNav),
        trainer: TrainerConfig::for_task(Task::RiskyNav),
        network: NetworkConfig::default(),
        seed: TEACHER_SEED,
    };
    if setup.trainer.metric != Metric::Wang {
        return Err("riskynav teacher is expected to train with the Wang metric".into());
    }
    train_teacher(&setup, |_| Ok(()), |_| Ok(())).map_err(s)
}

fn protocol(ck: &Checkpoint) -> Result<EvalProtocol, String> {
    EvalProtocol::standard(ck, EVAL_LAYOUTS, EVAL_ROLLOUTS, EVAL_SEED).map_err(s)
}

fn teacher_behaviour(report: &EvalReport) -> Verdict {
    let (Some(seek), Some(avert)) = (report.at(-1.0), report.at(1.0)) else {
        return Err("sweep lacks beta = -1 or +1".into());
    };
    let (cs, ca) = (seek.collision_rate, avert.collision_rate);
    let (vs, va) = (seek.cvar_return, avert.cvar_return);
    let (ms, ma) = (seek.mean_return, avert.mean_return);
    let collisions = ca.hi < cs.lo;
    let tail = va.lo > vs.hi;
    // the mean may favour either side as long as it is not significantly
    // worse for the risk-seeking policy
    let mean = ms.value >= ma.value || ms.hi >= ma.lo;
    let f = |x: distrisk_core::evalsuite::Stat| format!("{:.3} [{:.3}, {:.3}]", x.value, x.lo, x.hi);
    Ok((
        collisions && tail && mean,
        format!(
            "{} rollouts/beta; collision +1 {} vs -1 {}; cvar0.2 +1 {} vs -1 {}; mean -1 {} vs +1 {}",
            avert.rollouts,
            f(ca),
            f(cs),
            f(va),
            f(vs),
            f(ms),
            f(ma)
        ),
    ))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of average ranks; NaN when either side is constant.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn distillation(teacher: &Checkpoint, teacher_report: &EvalReport) -> Verdict {
    let net = NetworkConfig::default();
    let cfg = DistillConfig::default();
    let full = dagger_distill(teacher, &net, &cfg, |_| Ok(())).map_err(s)?;
    let ablation = DistillConfig { rounds: 0, ..cfg };
    let phase_a = dagger_distill(teacher, &net, &ablation, |_| Ok(())).map_err(s)?;
    let mse = full.heldout_mse < phase_a.heldout_mse;

    let student_report = run_eval(&full.checkpoint, &protocol(teacher)?).map_err(s)?;
    let rates = |r: &EvalReport| r.per_beta.iter().map(|b| b.collision_rate.value).collect::<Vec<_>>();
    let (tr, sr) = (rates(teacher_report), rates(&student_report));
    let rho = spearman(&tr, &sr);
    let ranked = rho >= 0.8;

    let diff = term_difference(teacher_report, &student_report).map_err(s)?;
    let flat = diff.flatness.ok_or("single-beta sweep")?;
    let mut by_weight: Vec<(&String, f64)> = teacher.metadata.env.reward_weights.iter().map(|(k, w)| (k, w.abs())).collect();
    by_weight.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let pair = |names: &[(&String, f64)]| names.iter().map(|(k, _)| flat[*k]).sum::<f64>() / names.len() as f64;
    let top = &by_weight[..2];
    let bottom = &by_weight[by_weight.len() - 2..];
    let (ft, fb) = (pair(top), pair(bottom));
    let stable = ft < fb;
    let names = |v: &[(&String, f64)]| v.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join("+");
    Ok((
        mse && ranked && stable,
        format!(
            "heldout mse {:.4} < phase-A-only {:.4}; spearman {rho:.2} (teacher {tr:.3?}, student {sr:.3?}); flatness {} {ft:.3} < {} {fb:.3}",
            full.heldout_mse,
            phase_a.heldout_mse,
            names(top),
            names(bottom)
        ),
    ))
}

fn main() {
    // like libtest, positional arguments select criteria by substring
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut gate = Gate {
        filters: args.iter().filter(|a| !a.starts_with('-')).cloned().collect(),
        list: args.iter().any(|a| a == "--list"),
        ran: 0,
        failures: 0,
    };
    let secs = Duration::from_secs;
    gate.check("risk-metric unit suite", Some(secs(1)), risk_units);
    gate.check("coherence/property suite", Some(secs(10)), properties);
    gate.check("gradient suite", Some(secs(30)), gradients);
    gate.check("oracle equivalence", Some(secs(300)), oracle_equivalence);
    gate.check("dynamic-risk direction", Some(secs(10)), dynamic_risk);
    gate.check("curriculum bookkeeping", Some(secs(1)), curriculum);
    gate.check("determinism", None, determinism);

    const BEHAVIOUR: &str = "teacher behavioural reproduction";
    const DISTILL: &str = "distillation fidelity";
    if gate.list {
        gate.check(BEHAVIOUR, None, || unreachable!());
        gate.check(DISTILL, None, || unreachable!());
        return;
    }
    if gate.wants(BEHAVIOUR) || gate.wants(DISTILL) {
        let t0 = Instant::now();
        let teacher = train_riskynav_teacher();
        let report = teacher.as_ref().map_err(Clone::clone).and_then(|t| run_eval(t, &protocol(t)?).map_err(s));
        println!("---- riskynav teacher trained and evaluated in {:.0}s", t0.elapsed().as_secs_f64());
        gate.check(BEHAVIOUR, None, || teacher_behaviour(report.as_ref().map_err(Clone::clone)?));
        gate.check(DISTILL, Some(secs(1800)), || {
            distillation(teacher.as_ref().map_err(Clone::clone)?, report.as_ref().map_err(Clone::clone)?)
        });
    }

    println!("{} of {} primary criteria failed", gate.failures, gate.ran);
    if gate.failures > 0 {
        std::process::exit(1);
    }
}
