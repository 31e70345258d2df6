//! Versioned JSON checkpoints for teachers and students.
//!
//! Files are compact JSON with a trailing newline. Floats round-trip exactly,
//! so a save/load cycle reproduces forward outputs bit for bit and identical
//! training runs produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{obs_dims, EnvConfig, Task};
use crate::error::{config_err, ensure_dim, Result};
use crate::nn::Mlp;
use crate::policy::Policy;
use crate::risk::Metric;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub task: Task,
    pub metric: Metric,
    /// Range of `beta` seen in training.
    pub beta_range: [f64; 2],
    pub seed: u64,
    pub iteration: usize,
    /// Environment configuration at save time, including reward weights.
    pub env: EnvConfig,
    /// SHA-256 of the teacher checkpoint a student was distilled from.
    pub teacher_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub metadata: Metadata,
    pub policy: Policy,
    /// Quantile critic; teachers only.
    pub critic: Option<Mlp>,
}

impl Checkpoint {
    /// Checks version, dimensions and that the policy matches the task.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(config_err(format!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.metadata.env.validate()?;
        if self.metadata.env.task != self.metadata.task {
            return Err(config_err("checkpoint task does not match its env config"));
        }
        self.policy.validate()?;
        let d = obs_dims(&self.metadata.env);
        let extero = match self.kind {
            CheckpointKind::Teacher => d.teacher_extero,
            CheckpointKind::Student => d.student_extero,
        };
        ensure_dim("checkpoint extero width", extero, self.policy.layout.extero)?;
        ensure_dim("checkpoint stack", self.metadata.env.stack, self.policy.layout.stack)?;
        ensure_dim("checkpoint rest width", d.rest, self.policy.layout.rest)?;
        if self.policy.action_space() != self.metadata.task.action_space() {
            return Err(config_err("checkpoint action head does not match its task"));
        }
        match (&self.kind, &self.critic) {
            (CheckpointKind::Teacher, Some(c)) => ensure_dim("critic input", d.critic, c.spec().input_dim()),
            (CheckpointKind::Teacher, None) => Err(config_err("teacher checkpoint without critic")),
            (CheckpointKind::Student, _) => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
