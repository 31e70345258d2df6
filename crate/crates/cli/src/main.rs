mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distrisk_core::checkpoint::{Checkpoint, CheckpointKind};
use distrisk_core::distill::dagger_distill;
use distrisk_core::envs::Task;
use distrisk_core::evalsuite::{export_report, reward_term_difference, run_eval, EvalProtocol, EvalReport};
use distrisk_core::gradcheck;
use distrisk_core::oracle::{env_to_mdp, failure_probability, greedy_path, risk_value_iteration, RiskSolution};
use distrisk_core::risk::{Metric, RiskSpec};
use distrisk_core::trainer::{train_teacher, TeacherSetup};
use serde::Serialize;

use config::{resolve, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "distrisk", version, about = "Risk-aware distributional actor-critic toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration deep-merged over the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a single field, e.g. `--set trainer.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            task: self.task,
            seed: self.seed,
            output_dir: self.out.clone(),
            sets: self.sets.clone(),
        }
    }

    fn resolve(&self, fallback: Option<Task>) -> Result<RunConfig, Failure> {
        resolve(self.config.as_deref(), fallback, &self.overrides()).map_err(Failure::Config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher policy and critic.
    Train(Common),
    /// Distil a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint across a beta sweep and write a report directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Teacher to compare a student against, per reward term.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Exact risk-sensitive value iteration on the tabular task.
    Oracle {
        #[arg(long)]
        metric: Metric,
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
        /// Defaults to the environment horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Defaults to `trainer.gamma`.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Serve live rollouts over HTTP and WebSocket.
    Serve {
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 20.0)]
        hz: f64,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        specs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Config failures exit with 2 before anything is written; everything else
/// exits with 1.
enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": one_line(message) }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            report_error("config", &m);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            report_error("runtime", &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(common) => train(&common),
        Command::Distill { teacher, common } => distill(&teacher, &common),
        Command::Eval {
            checkpoint,
            teacher,
            common,
        } => eval(&checkpoint, teacher.as_deref(), &common),
        Command::Oracle {
            metric,
            beta,
            horizon,
            gamma,
            common,
        } => oracle(metric, beta, horizon, gamma, &common),
        Command::Serve { checkpoints, addr, hz } => serve(checkpoints, addr, hz),
        Command::Gradcheck { specs, seed, tol } => gradcheck(specs, seed, tol),
    }
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("resolved_config.json"), cfg)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self, Failure> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn push<T: Serialize>(&mut self, v: &T) -> distrisk_core::Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

fn train(common: &Common) -> Result<(), Failure> {
    let cfg = common.resolve(None)?;
    let dir = prepare_output(&cfg)?;
    let setup = TeacherSetup {
        env: cfg.env.clone(),
        trainer: cfg.trainer.clone(),
        network: cfg.network.clone(),
        seed: cfg.seed,
    };
    let ck_dir = dir.join("checkpoints");
    let mut metrics = JsonLines::create(&dir.join("metrics.jsonl"))?;
    let final_ck = train_teacher(
        &setup,
        |log| {
            if log.iteration % 10 == 0 {
                tracing::info!(
                    iteration = log.iteration,
                    mean_return = ?log.mean_return,
                    success = ?log.success_rate,
                    level = log.mean_level,
                    "train"
                );
            }
            metrics.push(log)
        },
        |ck| {
            fs::create_dir_all(&ck_dir)?;
            ck.save(&ck_dir.join(format!("teacher_{:05}.json", ck.metadata.iteration))).map(|_| ())
        },
    )?;
    metrics.0.flush()?;
    let sha = final_ck.save(&dir.join("teacher.json"))?;
    println!("{}", serde_json::json!({ "checkpoint": dir.join("teacher.json"), "sha256": sha }));
    Ok(())
}

fn distill(teacher: &Path, common: &Common) -> Result<(), Failure> {
    let t = load(teacher)?;
    if t.kind != CheckpointKind::Teacher {
        return Err(Failure::Config(format!("{} is not a teacher checkpoint", teacher.display())));
    }
    let cfg = common.resolve(Some(t.metadata.task))?;
    if cfg.task != t.metadata.task {
        return Err(Failure::Config(format!(
            "task {} does not match the teacher's {}",
            cfg.task.as_str(),
            t.metadata.task.as_str()
        )));
    }
    let dir = prepare_output(&cfg)?;
    let mut log = JsonLines::create(&dir.join("distill.jsonl"))?;
    let out = dagger_distill(&t, &cfg.network, &cfg.distill, |l| {
        tracing::info!(round = l.round, phase = ?l.phase, train_mse = l.train_mse, validation = ?l.validation_mse, "distill");
        log.push(l)
    })?;
    log.0.flush()?;
    let sha = out.checkpoint.save(&dir.join("student.json"))?;
    let summary = serde_json::json!({
        "checkpoint": dir.join("student.json"),
        "sha256": sha,
        "teacher_sha256": out.checkpoint.metadata.teacher_sha256,
        "heldout_mse": out.heldout_mse,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn protocol(cfg: &RunConfig, ck: &Checkpoint) -> Result<EvalProtocol, Failure> {
    let e = &cfg.eval;
    let mut p = EvalProtocol::standard(ck, e.layouts, e.rollouts_per_env, cfg.seed)?;
    if let Some(b) = &e.betas {
        p.betas = b.clone();
    }
    p.alpha = e.alpha;
    p.bootstrap_iters = e.bootstrap_iters;
    p.confidence = e.confidence;
    p.validate(ck.metadata.metric).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(p)
}

fn summarize(r: &EvalReport) -> serde_json::Value {
    let rows: Vec<_> = r
        .per_beta
        .iter()
        .map(|b| {
            serde_json::json!({
                "beta": b.beta,
                "success": b.success_rate.value,
                "collision": b.collision_rate.value,
                "mean_return": b.mean_return.value,
                "cvar_return": b.cvar_return.value,
            })
        })
        .collect();
    serde_json::Value::Array(rows)
}

fn eval(checkpoint: &Path, teacher: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let ck = load(checkpoint)?;
    let cfg = common.resolve(Some(ck.metadata.task))?;
    if cfg.task != ck.metadata.task {
        return Err(Failure::Config(format!(
            "task {} does not match the checkpoint's {}",
            cfg.task.as_str(),
            ck.metadata.task.as_str()
        )));
    }
    cfg.check_betas(ck.metadata.metric).map_err(Failure::Config)?;
    let teacher = teacher.map(load).transpose()?;
    if let Some(t) = &teacher {
        if t.kind != CheckpointKind::Teacher || ck.kind != CheckpointKind::Student {
            return Err(Failure::Config("--teacher compares a student checkpoint against a teacher".into()));
        }
    }
    let p = protocol(&cfg, &ck)?;
    let dir = prepare_output(&cfg)?;
    let report = match &teacher {
        Some(t) => {
            let (diff, t_report, s_report) = reward_term_difference(t, &ck, &p)?;
            export_report(&t_report, &dir.join("teacher"))?;
            write_json(&dir.join("term_difference.json"), &diff)?;
            s_report
        }
        None => run_eval(&ck, &p)?,
    };
    export_report(&report, &dir)?;
    println!("{}", summarize(&report));
    Ok(())
}

#[derive(Serialize)]
struct OracleDump {
    task: Task,
    gamma: f64,
    horizon: usize,
    start: usize,
    failure_probability: f64,
    greedy_path: Vec<usize>,
    start_value: f64,
    solution: RiskSolution,
}

fn oracle(metric: Metric, beta: f64, horizon: Option<usize>, gamma: Option<f64>, common: &Common) -> Result<(), Failure> {
    let cfg = common.resolve(Some(Task::CliffSlip))?;
    if cfg.task != Task::CliffSlip {
        return Err(Failure::Config(format!("oracle supports cliffslip only, got {}", cfg.task.as_str())));
    }
    let spec = RiskSpec::new(metric, beta).map_err(|e| Failure::Config(e.to_string()))?;
    let gamma = gamma.unwrap_or(cfg.trainer.gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Failure::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let horizon = horizon.unwrap_or(cfg.env.horizon);
    let mdp = env_to_mdp(&cfg.env, gamma).map_err(|e| Failure::Config(e.to_string()))?;
    let dir = prepare_output(&cfg)?;
    let sol = risk_value_iteration(&mdp, &spec, horizon)?;
    let dump = OracleDump {
        task: cfg.task,
        gamma,
        horizon,
        start: mdp.start,
        failure_probability: failure_probability(&mdp, &sol, horizon),
        greedy_path: greedy_path(&mdp, &sol, horizon),
        start_value: sol.values[horizon][mdp.start],
        solution: sol,
    };
    write_json(&dir.join("oracle.json"), &dump)?;
    println!(
        "{}",
        serde_json::json!({
            "output": dir.join("oracle.json"),
            "failure_probability": dump.failure_probability,
            "start_value": dump.start_value,
        })
    );
    Ok(())
}

fn serve(checkpoints: PathBuf, addr: SocketAddr, hz: f64) -> Result<(), Failure> {
    if !checkpoints.is_dir() {
        return Err(Failure::Config(format!("{} is not a directory", checkpoints.display())));
    }
    let mut cfg = distrisk_serve::ServeConfig::new(checkpoints);
    if !(hz > 0.0 && hz <= cfg.max_hz) {
        return Err(Failure::Config(format!("hz must lie in (0, {}]", cfg.max_hz)));
    }
    cfg.default_hz = hz;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(distrisk_serve::serve(addr, cfg))?;
    Ok(())
}

fn gradcheck(specs: usize, seed: u64, tol: f64) -> Result<(), Failure> {
    if specs == 0 || !(tol > 0.0) {
        return Err(Failure::Config("gradcheck needs specs >= 1 and tol > 0".into()));
    }
    let r = gradcheck::run(specs, seed)?;
    let pass = r.max_error() < tol;
    println!(
        "{}",
        serde_json::json!({ "pass": pass, "max_error": r.max_error(), "tol": tol, "report": r })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: max relative error {:e} >= {tol:e}",
            r.max_error()
        )))
    }
}
