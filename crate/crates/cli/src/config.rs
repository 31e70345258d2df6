//! Resolved run configuration: task defaults, then a JSON file deep-merged on
//! top, then command-line overrides.

use std::path::{Path, PathBuf};

use distrisk_core::distill::DistillConfig;
use distrisk_core::envs::{EnvConfig, Task};
use distrisk_core::evalsuite::CVAR_EVAL_FLOOR;
use distrisk_core::policy::NetworkConfig;
use distrisk_core::risk::{Metric, RiskSpec};
use distrisk_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub layouts: usize,
    pub rollouts_per_env: usize,
    /// Defaults to the metric's standard sweep.
    pub betas: Option<Vec<f64>>,
    pub alpha: f64,
    pub bootstrap_iters: usize,
    pub confidence: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            layouts: 100,
            rollouts_per_env: 8,
            betas: None,
            alpha: 0.2,
            bootstrap_iters: 2000,
            confidence: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub task: Task,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub distill: DistillConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task,
            seed: 0,
            output_dir: PathBuf::from("runs").join(task.as_str()),
            env: EnvConfig::for_task(task),
            network: NetworkConfig::default(),
            trainer: TrainerConfig::for_task(task),
            distill: DistillConfig::default(),
            eval: EvalSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.env.task != self.task {
            return Err(format!(
                "env.task {} does not match task {}",
                self.env.task.as_str(),
                self.task.as_str()
            ));
        }
        self.env.validate().map_err(|e| e.to_string())?;
        self.network.validate().map_err(|e| e.to_string())?;
        self.trainer.validate().map_err(|e| e.to_string())?;
        self.distill.validate().map_err(|e| e.to_string())?;
        let e = &self.eval;
        if e.layouts == 0 || e.rollouts_per_env == 0 {
            return Err("eval.layouts and eval.rollouts_per_env must be positive".into());
        }
        if !(e.alpha > 0.0 && e.alpha <= 1.0) {
            return Err(format!("eval.alpha must lie in (0, 1], got {}", e.alpha));
        }
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(format!("eval.confidence must lie in (0, 1), got {}", e.confidence));
        }
        if e.bootstrap_iters < 100 {
            return Err("eval.bootstrap_iters must be >= 100".into());
        }
        Ok(())
    }

    /// Checks an eval sweep against `metric`, which may differ from the
    /// training metric when evaluating a loaded checkpoint.
    pub fn check_betas(&self, metric: Metric) -> Result<(), String> {
        for &b in self.eval.betas.iter().flatten() {
            RiskSpec::new(metric, b).map_err(|e| e.to_string())?;
            if metric == Metric::Cvar && b < CVAR_EVAL_FLOOR {
                return Err(format!("eval beta {b} below the cvar floor {CVAR_EVAL_FLOOR}"));
            }
        }
        Ok(())
    }
}

/// Objects merge key by key; anything else in `top` replaces `base`.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value` becomes `{"a":{"b":{"c":value}}}`. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn parse_set(s: &str) -> Result<Value, String> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("--set expects key.path=value, got {s:?}"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(format!("--set has an empty key in {path:?}"));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub sets: Vec<String>,
}

pub fn read_file(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if !v.is_object() {
        return Err(format!("{}: top level must be an object", path.display()));
    }
    Ok(v)
}

/// Precedence: flags, then file, then the defaults of the chosen task.
pub fn resolve(file: Option<&Path>, fallback_task: Option<Task>, o: &Overrides) -> Result<RunConfig, String> {
    let file = file.map(read_file).transpose()?.unwrap_or_else(|| Value::Object(Map::new()));
    let mut flags = Value::Object(Map::new());
    for s in &o.sets {
        deep_merge(&mut flags, parse_set(s)?);
    }
    let named = |v: &Value| v.get("task").cloned();
    let task = match (o.task, named(&flags).or_else(|| named(&file))) {
        (Some(t), _) => t,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|_| format!("task: unknown task {v}"))?,
        (None, None) => fallback_task.ok_or("task is required (--task or \"task\" in the config file)")?,
    };
    let mut merged = serde_json::to_value(RunConfig::defaults(task)).map_err(|e| e.to_string())?;
    deep_merge(&mut merged, file);
    deep_merge(&mut merged, flags);
    let top = merged.as_object_mut().expect("object");
    top.insert("task".into(), serde_json::to_value(task).map_err(|e| e.to_string())?);
    if let Some(seed) = o.seed {
        top.insert("seed".into(), seed.into());
    }
    if let Some(dir) = &o.output_dir {
        top.insert("output_dir".into(), Value::String(dir.to_string_lossy().into_owned()));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        format!("{path}: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}
