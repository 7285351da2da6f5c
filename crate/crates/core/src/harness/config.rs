//! Run configuration: a sectioned TOML file with strict keys and a
//! normalized dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::rewards::{make_reward, RewardParams, RewardSpec, DEFAULT_ANNEAL_FRACTION, DEFAULT_BETA_MAX};

/// Name of the built-in 2D mixture dataset.
pub const EIGHT_GAUSSIANS: &str = "eight-gaussians";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub dim: usize,
    pub schedule: ScheduleKind,
    /// Defaults to 20 for continuous and 5 for discrete chains.
    pub horizon: Option<usize>,
    pub hidden: Vec<usize>,
    /// `eight-gaussians` or a CSV path.
    pub dataset: String,
    pub dataset_size: usize,
    pub conditions: Option<usize>,
    pub states: usize,
    pub stay: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKind::Continuous,
            dim: 2,
            schedule: ScheduleKind::Cosine,
            horizon: None,
            hidden: vec![64, 64, 64],
            dataset: EIGHT_GAUSSIANS.to_string(),
            dataset_size: 8192,
            conditions: None,
            states: 16,
            stay: 0.3,
        }
    }
}

impl TaskSection {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.kind {
            TaskKind::Continuous => 20,
            TaskKind::Discrete => 5,
        })
    }

    /// Stable digest of the task, used to match checkpoints to configs.
    pub fn hash(&self) -> String {
        let mut t = self.clone();
        t.horizon = Some(self.horizon());
        hex(&Sha256::digest(toml::to_string(&t).expect("task serializes").as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub id: String,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_anneal")]
    pub anneal_fraction: f64,
    #[serde(default)]
    pub params: RewardParams,
}

fn default_beta_max() -> f64 {
    DEFAULT_BETA_MAX
}

fn default_anneal() -> f64 {
    DEFAULT_ANNEAL_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 2000, batch_size: 256, learning_rate: 1e-3, weight_decay: 0.0, clip_norm: 1.0, log_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub epochs: usize,
    /// Evaluate every this many epochs and after the last one; 0 disables.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the last.
    pub checkpoint_every: usize,
    /// Histogram bins per axis for 2D evaluation.
    pub bins: usize,
    /// Histogram grid half-width.
    pub range: f64,
    /// Record elapsed seconds in metrics (breaks byte-identical reruns).
    pub wall_clock: bool,
    /// Pretrained checkpoint to start alignment from.
    pub pretrained: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("runs/default"),
            epochs: 100,
            eval_every: 10,
            eval_samples: 4096,
            checkpoint_every: 10,
            bins: 32,
            range: 4.0,
            wall_clock: false,
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub reward: RewardSection,
    #[serde(default)]
    pub algorithm: AlignConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub run: RunSection,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    cfg.check_files()?;
    Ok(cfg)
}

/// Parses and validates config text without touching the filesystem.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.task.horizon = Some(cfg.task.horizon());
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.task;
        if t.horizon() == 0 {
            return bad("task.horizon must be positive".into());
        }
        match t.kind {
            TaskKind::Continuous => {
                if t.dim == 0 || t.hidden.is_empty() || t.hidden.contains(&0) {
                    return bad("task.dim and every task.hidden width must be positive".into());
                }
                if t.dataset == EIGHT_GAUSSIANS {
                    if t.dim != 2 {
                        return bad(format!("{EIGHT_GAUSSIANS} is 2-dimensional, task.dim = {}", t.dim));
                    }
                    if t.conditions.is_some_and(|k| k != 8) {
                        return bad(format!("{EIGHT_GAUSSIANS} has 8 conditions"));
                    }
                }
                if t.conditions == Some(0) {
                    return bad("task.conditions must be positive".into());
                }
            }
            TaskKind::Discrete => {
                if t.states < 2 {
                    return bad("task.states must be at least 2".into());
                }
                if t.conditions.is_some() {
                    return bad("discrete tasks are unconditional".into());
                }
            }
        }
        let reward = self.reward_spec()?;
        if reward.reward.is_discrete() != (t.kind == TaskKind::Discrete) {
            return bad(format!("reward '{}' does not fit a {:?} task", reward.id, t.kind));
        }
        if let Some(d) = reward.reward.input_dim() {
            if t.kind == TaskKind::Continuous && d != t.dim {
                return bad(format!("reward '{}' expects dimension {d}, task.dim = {}", reward.id, t.dim));
            }
        }
        if reward.reward.conditions() != t.conditions {
            return bad(format!(
                "reward conditions {:?} do not match task.conditions {:?}",
                reward.reward.conditions(),
                t.conditions
            ));
        }
        self.align_config().validate()?;
        let p = &self.pretrain;
        if p.batch_size == 0 || !(p.learning_rate > 0.0) || !(p.clip_norm > 0.0) || !(p.weight_decay >= 0.0) {
            return bad("pretrain batch_size, learning_rate and clip_norm must be positive".into());
        }
        let r = &self.run;
        if r.bins == 0 || !(r.range > 0.0) {
            return bad("run.bins and run.range must be positive".into());
        }
        Ok(())
    }

    /// Referenced files must exist (relative paths are taken from the
    /// working directory).
    pub fn check_files(&self) -> Result<()> {
        let mut files = Vec::new();
        if self.task.kind == TaskKind::Continuous && self.task.dataset != EIGHT_GAUSSIANS {
            files.push(("task.dataset", PathBuf::from(&self.task.dataset)));
        }
        if let Some(p) = &self.run.pretrained {
            files.push(("run.pretrained", p.clone()));
        }
        for (key, p) in files {
            if !p.is_file() {
                return Err(Error::Config(format!("{key}: file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn reward_spec(&self) -> Result<RewardSpec> {
        let states = (self.task.kind == TaskKind::Discrete).then_some(self.task.states);
        let reward = make_reward(&self.reward.id, &self.reward.params, states)?;
        RewardSpec::new(&self.reward.id, reward, self.reward.beta_max, self.reward.anneal_fraction)
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig { epochs: self.run.epochs, ..self.algorithm.clone() }
    }

    /// Canonical TOML with every default filled in.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.dump().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
