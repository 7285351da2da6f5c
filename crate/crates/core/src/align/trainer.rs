use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{annotate_rewards, TransitionBatch};
use super::losses::{ddpo_loss_from, kl_policy_loss_from, kl_regularizer, Terms};
use super::model::AlignModel;
use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState, ParamSet, Tape, Var};
use crate::rewards::{beta_at, RewardSpec};
use crate::rng::{stream_rng, RolloutKey, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    DagDb,
    DagKl,
    Ddpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DagDb => "dag-db",
            Algorithm::DagKl => "dag-kl",
            Algorithm::Ddpo => "ddpo",
        }
    }

    pub fn uses_flow(self) -> bool {
        !matches!(self, Algorithm::Ddpo)
    }

    /// Whether batches must come from the current snapshot.
    pub fn on_policy(self) -> bool {
        !matches!(self, Algorithm::DagDb)
    }
}

/// Constant factor on the DAG-KL policy loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScaling {
    /// Factor 1.
    Unit,
    /// Factor `beta_max`.
    PaperScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub algorithm: Algorithm,
    pub clip_eps: f64,
    pub ppo_clip_eps: f64,
    pub kl_reg: f64,
    pub kl_scaling: KlScaling,
    pub learning_rate: f64,
    pub flow_learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub rollouts_per_epoch: usize,
    pub opt_steps_per_epoch: usize,
    /// Annealing horizon; run configs set it from their run section.
    #[serde(skip)]
    pub epochs: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            algorithm: Algorithm::DagDb,
            clip_eps: 1e-4,
            ppo_clip_eps: 1e-4,
            kl_reg: 1.0,
            kl_scaling: KlScaling::Unit,
            learning_rate: 3e-4,
            flow_learning_rate: 3e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            rollouts_per_epoch: 512,
            opt_steps_per_epoch: 8,
            epochs: 100,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0) || !(self.ppo_clip_eps > 0.0) {
            return bad("clip epsilons must be positive".into());
        }
        if !(self.kl_reg >= 0.0) {
            return bad(format!("kl_reg must be >= 0, got {}", self.kl_reg));
        }
        if !(self.learning_rate > 0.0) || !(self.flow_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and clip_norm > 0".into());
        }
        if self.opt_steps_per_epoch == 0 || self.rollouts_per_epoch == 0 {
            return bad("rollouts_per_epoch and opt_steps_per_epoch must be positive".into());
        }
        if !self.rollouts_per_epoch.is_multiple_of(self.opt_steps_per_epoch) {
            return bad(format!(
                "rollouts_per_epoch {} is not divisible into {} minibatches",
                self.rollouts_per_epoch, self.opt_steps_per_epoch
            ));
        }
        Ok(())
    }

    pub fn kl_factor(&self, reward: &RewardSpec) -> f64 {
        match self.kl_scaling {
            KlScaling::Unit => 1.0,
            KlScaling::PaperScaling => reward.beta_max,
        }
    }
}

/// Everything that evolves during alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub opt_theta: OptimizerState,
    pub opt_phi: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl AlignState {
    pub fn new(theta: ParamSet, phi: ParamSet, config: &AlignConfig) -> Self {
        let opt = |lr| AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::with_lr(lr) };
        AlignState {
            opt_theta: OptimizerState::new(&theta, opt(config.learning_rate)),
            opt_phi: OptimizerState::new(&phi, opt(config.flow_learning_rate)),
            theta,
            phi,
            epoch: 0,
            step: 0,
        }
    }

    /// Version tag of rollouts drawn from the current `theta`.
    pub fn version(&self) -> u64 {
        self.epoch as u64
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: usize,
    pub trajectories: usize,
    pub beta: f64,
    pub reward_mean: f64,
    pub reward_max: f64,
    pub reward_std: f64,
    pub fl_db: Option<f64>,
    pub dag_kl: Option<f64>,
    pub kl_reg: Option<f64>,
    pub ddpo: Option<f64>,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: Option<f64>,
}

/// Condition ids for the rollouts of `epoch`.
pub fn draw_conditions(n: usize, conditions: Option<usize>, seed: u64, epoch: u64) -> Vec<Option<usize>> {
    match conditions {
        None => vec![None; n],
        Some(k) => {
            let mut rng = stream_rng(seed, Stream::Conditions, &[epoch]);
            (0..n).map(|_| Some(rng.random_range(0..k))).collect()
        }
    }
}

/// Shuffled `(trajectory, t)` pairs split into `chunks` minibatches.
pub fn minibatches(n_traj: usize, horizon: usize, chunks: usize, seed: u64, epoch: u64) -> Vec<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = (0..n_traj).flat_map(|i| (1..=horizon).map(move |t| (i, t))).collect();
    all.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[epoch]));
    let size = all.len() / chunks;
    all.chunks(size).map(<[_]>::to_vec).collect()
}

fn mean_std_max(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt(), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

struct StepLosses {
    fl_db: Option<f64>,
    dag_kl: Option<f64>,
    kl_reg: Option<f64>,
    ddpo: Option<f64>,
    grad_theta: ParamSet,
    grad_phi: Option<ParamSet>,
}

fn finite(v: Var<'_>, what: &str, epoch: usize, step: usize) -> Result<f64> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFiniteLoss { what: what.to_string(), epoch, step });
    }
    Ok(x)
}

/// Losses and raw gradients of one minibatch at the current parameters.
fn step_gradients(
    model: &dyn AlignModel,
    config: &AlignConfig,
    reward: &RewardSpec,
    state: &AlignState,
    theta_old: &ParamSet,
    batch: &TransitionBatch,
) -> Result<StepLosses> {
    let (epoch, step) = (state.epoch, state.step);
    let tape = Tape::new();
    let theta = tape.bind(&state.theta, true);
    let phi = tape.bind(&state.phi, config.algorithm.uses_flow());
    match config.algorithm {
        Algorithm::DagDb => {
            let terms = Terms::new(model, batch, &theta, &phi)?;
            let loss = terms.fl_residual(batch)?.square().mean();
            let value = finite(loss, "fl_db loss", epoch, step)?;
            let grads = tape.backward(loss)?;
            Ok(StepLosses {
                fl_db: Some(value),
                dag_kl: None,
                kl_reg: None,
                ddpo: None,
                grad_theta: theta.gradients(&grads),
                grad_phi: Some(phi.gradients(&grads)),
            })
        }
        Algorithm::DagKl => {
            let terms = Terms::new(model, batch, &theta, &phi)?;
            let flow_loss = terms.fl_residual(batch)?.square().mean();
            let kl = kl_policy_loss_from(&terms, batch, config.clip_eps, config.kl_factor(reward))?;
            let reg = kl_regularizer(model, batch, &theta, theta_old, config.kl_reg)?;
            let policy_loss = kl + reg;
            let fl_value = finite(flow_loss, "fl_db loss", epoch, step)?;
            let kl_value = finite(kl, "dag_kl loss", epoch, step)?;
            let reg_value = finite(reg, "kl_reg", epoch, step)?;
            let g_flow = tape.backward(flow_loss)?;
            let g_policy = tape.backward(policy_loss)?;
            Ok(StepLosses {
                fl_db: Some(fl_value),
                dag_kl: Some(kl_value),
                kl_reg: Some(reg_value),
                ddpo: None,
                grad_theta: theta.gradients(&g_policy),
                grad_phi: Some(phi.gradients(&g_flow)),
            })
        }
        Algorithm::Ddpo => {
            let loss = ddpo_loss_from(model.log_prob(&theta, batch)?, batch, config.ppo_clip_eps)?;
            let reg = kl_regularizer(model, batch, &theta, theta_old, config.kl_reg)?;
            let total = loss + reg;
            let value = finite(loss, "ddpo loss", epoch, step)?;
            let reg_value = finite(reg, "kl_reg", epoch, step)?;
            let grads = tape.backward(total)?;
            Ok(StepLosses {
                fl_db: None,
                dag_kl: None,
                kl_reg: Some(reg_value),
                ddpo: Some(value),
                grad_theta: theta.gradients(&grads),
                grad_phi: None,
            })
        }
    }
}

/// Rollouts of one epoch with rewards attached.
pub fn collect_rollouts(
    model: &dyn AlignModel,
    config: &AlignConfig,
    reward: &RewardSpec,
    theta: &ParamSet,
    version: u64,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Trajectory>> {
    let conds = draw_conditions(config.rollouts_per_epoch, model.conditions(), seed, epoch);
    let mut trajs = model.rollout(theta, &conds, version, RolloutKey::train(seed, epoch))?;
    annotate_rewards(&mut trajs, reward, config.algorithm.uses_flow())?;
    Ok(trajs)
}

/// One epoch: roll out from a frozen snapshot, then take
/// `opt_steps_per_epoch` clipped AdamW steps over shuffled transitions.
pub fn align_epoch(
    model: &dyn AlignModel,
    config: &AlignConfig,
    reward: &RewardSpec,
    seed: u64,
    state: &mut AlignState,
) -> Result<EpochStats> {
    config.validate()?;
    let epoch = state.epoch;
    let theta_old = state.theta.clone();
    let version = state.version();
    let trajs = collect_rollouts(model, config, reward, &theta_old, version, seed, epoch as u64)?;
    let beta = beta_at(reward, epoch, config.epochs);
    let chunks = minibatches(trajs.len(), model.horizon(), config.opt_steps_per_epoch, seed, epoch as u64);

    let mut sums = [0.0f64; 4];
    let mut seen = [false; 4];
    let (mut norm_theta, mut norm_phi) = (0.0, 0.0);
    for picks in &chunks {
        let batch = TransitionBatch::from_trajectories(model, &trajs, picks, beta)?;
        if config.algorithm.on_policy() {
            batch.check_version(version)?;
        }
        let mut out = step_gradients(model, config, reward, state, &theta_old, &batch)?;
        for (k, v) in [out.fl_db, out.dag_kl, out.kl_reg, out.ddpo].into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                seen[k] = true;
            }
        }
        norm_theta += clip_global_norm(&mut out.grad_theta, config.clip_norm);
        adamw_step(&mut state.theta, &out.grad_theta, &mut state.opt_theta)?;
        if let Some(mut g) = out.grad_phi {
            norm_phi += clip_global_norm(&mut g, config.clip_norm);
            adamw_step(&mut state.phi, &g, &mut state.opt_phi)?;
        }
        state.step += 1;
    }
    state.epoch += 1;

    let n = chunks.len() as f64;
    let avg = |k: usize| seen[k].then(|| sums[k] / n);
    let raw: Vec<f64> = trajs.iter().map(|t| t.terminal_reward.expect("annotated")).collect();
    let (reward_mean, reward_std, reward_max) = mean_std_max(&raw);
    Ok(EpochStats {
        epoch,
        step: state.step,
        trajectories: state.epoch * config.rollouts_per_epoch,
        beta,
        reward_mean,
        reward_max,
        reward_std,
        fl_db: avg(0),
        dag_kl: avg(1),
        kl_reg: avg(2),
        ddpo: avg(3),
        grad_norm_theta: norm_theta / n,
        grad_norm_phi: config.algorithm.uses_flow().then(|| norm_phi / n),
    })
}
