//! Oracle checks behind the `oracle-check` command: gradient identities,
//! detailed-balance soundness of the exact solution and finite differences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{
    annotate_rewards, db_residual, ddpo_loss, dag_kl_policy_loss, fl_db_loss, fl_db_residual, kl_regularizer, AlignModel,
    ContinuousModel, DiscreteModel, FlowNet, States, TransitionBatch,
};
use crate::diffusion::{
    denoising_loss, draw_noise, eight_gaussians, make_schedule, DataPredictionNet, DiscreteChainSpec, GaussianChain,
    ScheduleKind,
};
use crate::error::Result;
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::oracle::{
    db_identity_residual, exact_flows_log, finite_diff, gaussian_reinforce_check, max_rel_err, prop1_check,
    random_prop1_instance,
};
use crate::rewards::{default_table, make_reward, RewardParams, RewardSpec};
use crate::rng::{stream_rng, RolloutKey, Stream};

pub const PROP1_TOL: f64 = 1e-10;
pub const DB_TOL: f64 = 1e-10;
pub const KL_GRAD_TOL: f64 = 1e-8;
pub const FD_TOL: f64 = 1e-4;
/// Central-difference step, relative to `max(1, |p|)`.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the finite-difference relative error.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(check: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        CheckResult { check: check.to_string(), cases, max_error, tolerance, pass: max_error <= tolerance }
    }
}

/// Discrete chain and log-rewards used by the detailed-balance check.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOptions {
    pub seed: u64,
    pub spec: DiscreteChainSpec,
    pub log_rewards: Vec<f64>,
    /// Added to every learnable log-flow before the detailed-balance check.
    pub perturb_flows: f64,
}

impl OracleOptions {
    /// `S = 16`, `T = 5`, stay probability 0.3, default lookup table at `beta = 1`.
    pub fn default_chain(seed: u64) -> Self {
        OracleOptions {
            seed,
            spec: DiscreteChainSpec::lazy_uniform(16, 5, 0.3).expect("valid default chain"),
            log_rewards: default_table(16),
            perturb_flows: 0.0,
        }
    }
}

pub fn run_oracle_checks(opts: &OracleOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        prop1_suite(opts.seed, 100)?,
        db_soundness(&opts.spec, &opts.log_rewards, opts.perturb_flows)?,
        db_identity_exact(&opts.spec, &opts.log_rewards)?,
        kl_gradient_identity(opts.seed, 20)?,
        fd_suite(FdLoss::Denoising, opts.seed, 10)?,
        fd_suite(FdLoss::FlDb, opts.seed, 10)?,
        fd_suite(FdLoss::DagKl, opts.seed, 10)?,
        fd_suite(FdLoss::Ddpo, opts.seed, 10)?,
        gaussian_reinforce_suite(opts.seed)?,
    ])
}

/// KL gradient versus its REINFORCE expectation on `n` random enumerable
/// transitions with `2 <= S <= 8`.
pub fn prop1_suite(seed: u64, n: usize) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, Stream::Oracle, &[0]);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let inst = random_prop1_instance(2 + i % 7, &mut rng);
        worst = worst.max(prop1_check(&inst)?.discrepancy);
    }
    Ok(CheckResult::new("prop1", n, worst, PROP1_TOL))
}

/// Every transition `(t, x_t -> x_(t-1))` with `q > 0`, anchored by the
/// log-reward at `t = 1` (`beta = 1`, raw reward = log-reward).
pub fn all_transitions(spec: &DiscreteChainSpec, log_rewards: &[f64]) -> TransitionBatch {
    let s = spec.states();
    let (mut parents, mut children, mut steps, mut log_q, mut terminal) = (vec![], vec![], vec![], vec![], vec![]);
    for t in 1..=spec.horizon() {
        for x in 0..s {
            for y in 0..s {
                let lq = spec.log_q(t, x, y);
                if lq == f64::NEG_INFINITY {
                    continue;
                }
                parents.push(x);
                children.push(y);
                steps.push(t);
                log_q.push(lq);
                terminal.push(if t == 1 { log_rewards[y] } else { 0.0 });
            }
        }
    }
    let n = steps.len();
    TransitionBatch {
        parents: States::Indices(parents),
        children: States::Indices(children),
        steps,
        conds: vec![None; n],
        logp_old: vec![0.0; n],
        log_q,
        r_parent: vec![f64::NAN; n],
        r_child: vec![f64::NAN; n],
        terminal_raw: terminal,
        traj: vec![0; n],
        version: 0,
        beta: 1.0,
    }
}

/// Exact flows and policy plugged into the training-side DB residual.
pub fn db_soundness(spec: &DiscreteChainSpec, log_rewards: &[f64], perturb: f64) -> Result<CheckResult> {
    let sol = exact_flows_log(spec, log_rewards)?;
    let model = DiscreteModel::new(spec.clone());
    let theta = spec.policy_from_log_tables(&sol.log_policy)?;
    let flows: Vec<Vec<f64>> =
        sol.log_flows.iter().enumerate().map(|(t, row)| row.iter().map(|f| if t == 0 { *f } else { f + perturb }).collect()).collect();
    let phi = model.flows_from_table(&flows)?;
    let batch = all_transitions(spec, log_rewards);
    let tape = Tape::new();
    let (th, ph) = (tape.bind(&theta, false), tape.bind(&phi, false));
    let delta = db_residual(&model, &batch, &th, &ph)?.value();
    let worst = delta.data().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(CheckResult::new("db-identity", batch.len(), worst, DB_TOL))
}

/// The same identity evaluated directly on the oracle's tables.
pub fn db_identity_exact(spec: &DiscreteChainSpec, log_rewards: &[f64]) -> Result<CheckResult> {
    let sol = exact_flows_log(spec, log_rewards)?;
    let worst = db_identity_residual(spec, &sol.log_flows, &sol.log_policy);
    Ok(CheckResult::new("db-identity-exact", spec.horizon() * spec.states() * spec.states(), worst, DB_TOL))
}

/// Small conditional-free chain used by the gradient suites.
pub fn small_continuous() -> (ContinuousModel, RewardSpec) {
    let chain = GaussianChain {
        schedule: make_schedule(ScheduleKind::Cosine, 4).expect("valid schedule"),
        net: DataPredictionNet::new(2, None, &[6]),
    };
    let model = ContinuousModel { chain, flow: FlowNet::new(2, None, &[6]) };
    let reward = make_reward("ring", &RewardParams::default(), None).expect("built-in reward");
    (model, RewardSpec::new("ring", reward, 1.0, 0.5).expect("valid reward"))
}

fn small_discrete() -> (DiscreteModel, RewardSpec) {
    let model = DiscreteModel::new(DiscreteChainSpec::lazy_uniform(6, 3, 0.3).expect("valid chain"));
    let reward = make_reward("table", &RewardParams::default(), Some(6)).expect("built-in reward");
    (model, RewardSpec::new("table", reward, 1.0, 0.5).expect("valid reward"))
}

fn jitter(p: &ParamSet, scale: f64, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// A random batch of `size` transitions from rollouts of `theta`.
pub fn random_batch(
    model: &dyn AlignModel,
    reward: &RewardSpec,
    theta: &ParamSet,
    trajectories: usize,
    size: usize,
    key: RolloutKey,
    rng: &mut ChaCha8Rng,
) -> Result<TransitionBatch> {
    let conds = vec![None; trajectories];
    let mut trajs = model.rollout(theta, &conds, 0, key)?;
    annotate_rewards(&mut trajs, reward, true)?;
    let mut picks: Vec<(usize, usize)> = (0..trajectories).flat_map(|i| (1..=model.horizon()).map(move |t| (i, t))).collect();
    picks.shuffle(rng);
    picks.truncate(size);
    TransitionBatch::from_trajectories(model, &trajs, &picks, reward.beta_max)
}

fn theta_grad(
    theta: &ParamSet,
    phi: &ParamSet,
    f: impl for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
) -> Result<ParamSet> {
    let tape = Tape::new();
    let (th, ph) = (tape.bind(theta, true), tape.bind(phi, false));
    let loss = f(&th, &ph)?;
    Ok(th.gradients(&tape.backward(loss)?))
}

/// `max |a - b| / max |a|` over all coordinates.
fn rel_err_inf(a: &ParamSet, b: &ParamSet) -> f64 {
    let scale = a.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}

/// At `theta = theta_old`: grad of the DAG-KL loss, `mean(b grad log p)` and
/// half the FL-DB gradient coincide. Alternates continuous and discrete
/// chains over `n` random batches.
pub fn kl_gradient_identity(seed: u64, n: usize) -> Result<CheckResult> {
    let (cont, cont_reward) = small_continuous();
    let (disc, disc_reward) = small_discrete();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let mut rng = stream_rng(seed, Stream::Oracle, &[1, k as u64]);
        let (model, reward, theta, phi): (&dyn AlignModel, &RewardSpec, ParamSet, ParamSet) = if k % 2 == 0 {
            let theta = cont.chain.net.init(&mut rng);
            let phi = jitter(&cont.flow.arch.init(&mut rng, false), 0.1, &mut rng);
            (&cont, &cont_reward, theta, phi)
        } else {
            let theta = jitter(&disc.spec.uniform_policy(), 1.0, &mut rng);
            let phi = jitter(&disc.zero_flows(), 1.0, &mut rng);
            (&disc, &disc_reward, theta, phi)
        };
        let key = RolloutKey { seed, stream: Stream::Oracle, index: 1000 + k as u64 };
        let batch = random_batch(model, reward, &theta, 8, 16, key, &mut rng)?;
        let g_kl = theta_grad(&theta, &phi, |th, ph| dag_kl_policy_loss(model, &batch, th, ph, 1e-4, 1.0))?;
        let g_b = theta_grad(&theta, &phi, |th, ph| {
            let b = fl_db_residual(model, &batch, th, ph)?.stop_gradient();
            Ok((b * model.log_prob(th, &batch)?).mean())
        })?;
        let g_half = theta_grad(&theta, &phi, |th, ph| Ok(fl_db_loss(model, &batch, th, ph)?.scale(0.5)))?;
        worst = worst.max(rel_err_inf(&g_b, &g_kl)).max(rel_err_inf(&g_b, &g_half));
    }
    Ok(CheckResult::new("kl-gradient-identity", n, worst, KL_GRAD_TOL))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdLoss {
    Denoising,
    FlDb,
    DagKl,
    Ddpo,
}

impl FdLoss {
    pub fn name(self) -> &'static str {
        match self {
            FdLoss::Denoising => "fd-denoising",
            FdLoss::FlDb => "fd-fl-db",
            FdLoss::DagKl => "fd-dag-kl",
            FdLoss::Ddpo => "fd-ddpo",
        }
    }
}

fn scalar_loss(
    theta: &ParamSet,
    phi: &ParamSet,
    f: &dyn for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::new();
    let (th, ph) = (tape.bind(theta, false), tape.bind(phi, false));
    Ok(f(&th, &ph)?.item())
}

fn fd_compare(
    theta: &ParamSet,
    phi: &ParamSet,
    wrt_phi: bool,
    f: &dyn for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::new();
    let (th, ph) = (tape.bind(theta, !wrt_phi), tape.bind(phi, wrt_phi));
    let loss = f(&th, &ph)?;
    let grads = tape.backward(loss)?;
    if wrt_phi {
        let fd = finite_diff(|p| scalar_loss(theta, p, f), phi, FD_STEP)?;
        Ok(max_rel_err(&ph.gradients(&grads), &fd, FD_FLOOR))
    } else {
        let fd = finite_diff(|p| scalar_loss(p, phi, f), theta, FD_STEP)?;
        Ok(max_rel_err(&th.gradients(&grads), &fd, FD_FLOOR))
    }
}

/// Pins a closure to the higher-ranked loss signature.
fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
{
    f
}

/// Tape `theta`-gradient of `analytic` against central differences of `reference`.
fn fd_against(
    theta: &ParamSet,
    phi: &ParamSet,
    analytic: &dyn for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
    reference: &dyn for<'t> Fn(&Bound<'t>, &Bound<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let g = theta_grad(theta, phi, analytic)?;
    let fd = finite_diff(|p| scalar_loss(p, phi, reference), theta, FD_STEP)?;
    Ok(max_rel_err(&g, &fd, FD_FLOOR))
}

/// Tape gradients against central differences at `points` random parameter
/// settings of the small continuous chain.
pub fn fd_suite(loss: FdLoss, seed: u64, points: usize) -> Result<CheckResult> {
    let (model, reward) = small_continuous();
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let mut rng = stream_rng(seed, Stream::Oracle, &[2, loss as u64, k as u64]);
        let theta_old = model.chain.net.init(&mut rng);
        let phi = jitter(&model.flow.arch.init(&mut rng, false), 0.1, &mut rng);
        let key = RolloutKey { seed, stream: Stream::Oracle, index: 2000 + 100 * loss as u64 + k as u64 };
        match loss {
            FdLoss::Denoising => {
                let data = eight_gaussians(12, false, &mut rng);
                let (steps, eps) = draw_noise(model.horizon(), data.len(), 2, &mut rng);
                let f = loss_fn(|th, _| denoising_loss(&model.chain, th, &data.points, &steps, &eps, &data.conditions));
                worst = worst.max(fd_compare(&theta_old, &phi, false, &f)?);
            }
            FdLoss::FlDb => {
                let batch = random_batch(&model, &reward, &theta_old, 6, 12, key, &mut rng)?;
                let f = loss_fn(|th, ph| fl_db_loss(&model, &batch, th, ph));
                worst = worst.max(fd_compare(&theta_old, &phi, false, &f)?);
                worst = worst.max(fd_compare(&theta_old, &phi, true, &f)?);
            }
            FdLoss::DagKl => {
                let batch = random_batch(&model, &reward, &theta_old, 6, 12, key, &mut rng)?;
                let theta = jitter(&theta_old, 0.01, &mut rng);
                let f = loss_fn(|th, ph| {
                    Ok(dag_kl_policy_loss(&model, &batch, th, ph, 0.5, 1.0)? + kl_regularizer(&model, &batch, th, &theta_old, 1.0)?)
                });
                // differences must see b frozen, as the stop-gradient does
                let b = {
                    let tape = Tape::new();
                    let (th, ph) = (tape.bind(&theta, false), tape.bind(&phi, false));
                    fl_db_residual(&model, &batch, &th, &ph)?.value()
                };
                let frozen = loss_fn(|th, _| {
                    let tape = th.tape();
                    let ratio = (model.log_prob(th, &batch)? - tape.constant(Tensor::column(batch.logp_old.clone()))).exp();
                    Ok((tape.constant(b.clone()) * ratio.clamp(0.5, 1.5)).mean() + kl_regularizer(&model, &batch, th, &theta_old, 1.0)?)
                });
                worst = worst.max(fd_against(&theta, &phi, &f, &frozen)?);
            }
            FdLoss::Ddpo => {
                let batch = random_batch(&model, &reward, &theta_old, 6, 12, key, &mut rng)?;
                let theta = jitter(&theta_old, 0.01, &mut rng);
                let f = loss_fn(|th, _| {
                    Ok(ddpo_loss(&model, &batch, th, 0.5)? + kl_regularizer(&model, &batch, th, &theta_old, 1.0)?)
                });
                worst = worst.max(fd_compare(&theta, &phi, false, &f)?);
            }
        }
    }
    Ok(CheckResult::new(loss.name(), points, worst, FD_TOL))
}

/// Monte Carlo REINFORCE estimate on a Gaussian policy against the closed
/// form; error is reported in standard errors and must stay below 4.
pub fn gaussian_reinforce_suite(seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, Stream::Oracle, &[3]);
    let g = gaussian_reinforce_check(0.4, 0.8, -0.3, 1.3, 0.7, 200_000, &mut rng)?;
    Ok(CheckResult::new("gaussian-reinforce", 1, (g.estimate - g.analytic).abs() / g.std_error, 4.0))
}

/// One JSON object per check.
pub fn report_lines(results: &[CheckResult]) -> String {
    results.iter().map(|r| serde_json::to_string(r).expect("result serializes") + "\n").collect()
}
