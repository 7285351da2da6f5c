//! The five subcommands, as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{align_epoch, AlignState};
use crate::diffusion::{pretrain_from, PretrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState};
use crate::rewards::RewardSpec;
use crate::rng::RolloutKey;

use super::checkpoint::Checkpoint;
use super::checks::{run_oracle_checks, CheckResult, OracleOptions};
use super::config::{hex, parse_config_str, RunConfig, TaskKind};
use super::eval::{draw_samples, evaluate_samples, write_samples, EvalOptions};
use super::metrics::{EvalMetrics, MetricsRecord, MetricsWriter, RecordKind};
use super::plot::{compare_files, write_compare, CompareOutput};
use super::task::{task_dataset, Task};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain.jsonl";
pub const ALIGN_CHECKPOINT: &str = "align.ckpt";
pub const ALIGN_METRICS: &str = "metrics.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.run.out.join("config.toml");
    std::fs::write(&path, cfg.dump()).map_err(|e| Error::io(&path, e))
}

fn base_checkpoint(cfg: &RunConfig, kind: &str, task: &Task) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.hash());
    ck.set_meta("kind", kind);
    ck.set_meta("task_hash", cfg.task.hash());
    ck.set_meta("config", cfg.dump());
    ck.set_meta("model", task.describe());
    ck.set_meta("seed", cfg.run.seed);
    if let Task::Continuous(m) = task {
        ck.arrays.insert("schedule/alpha".into(), crate::numerics::Tensor::column(m.chain.schedule.alphas().to_vec()));
    }
    ck
}

fn check_task(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let found = ck.meta("task_hash")?;
    let expected = cfg.task.hash();
    if found != expected {
        return Err(Error::Compatibility(format!("checkpoint task {found} does not match config task {expected}")));
    }
    Ok(())
}

fn warn_config_drift(ck: &Checkpoint, cfg: &RunConfig) {
    if ck.config_hash != cfg.hash() {
        eprintln!("warning: config differs from the one the checkpoint was written with");
    }
}

fn elapsed(cfg: &RunConfig, start: Instant) -> Option<f64> {
    cfg.run.wall_clock.then(|| start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Trains the data-prediction network on the task dataset.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let start_time = Instant::now();
    let task = Task::build(&cfg.task)?;
    let Task::Continuous(model) = &task else {
        return Err(Error::Config("pretraining applies to continuous tasks only".into()));
    };
    let data = task_dataset(&cfg.task, cfg.run.seed)?;
    if data.is_empty() {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    let out = &cfg.run.out;
    create_dir(out)?;
    write_config(cfg)?;
    let metrics_path = out.join(PRETRAIN_METRICS);
    let opt_config = AdamWConfig { weight_decay: cfg.pretrain.weight_decay, ..AdamWConfig::with_lr(cfg.pretrain.learning_rate) };
    let (mut theta, mut opt, start, mut writer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_task(&ck, cfg)?;
            warn_config_drift(&ck, cfg);
            if ck.meta("kind")? != "pretrain" {
                return Err(Error::Compatibility(format!("{} is not a pretraining checkpoint", path.display())));
            }
            let theta = ck.params("theta");
            task.check_theta(&theta)?;
            let step: usize = ck.meta_parse("step")?;
            (theta, ck.optimizer("opt_theta")?, step, MetricsWriter::resume(&metrics_path, 0, step)?)
        }
        None => {
            let (theta, _) = task.init_params(cfg.run.seed);
            let opt = OptimizerState::new(&theta, opt_config);
            (theta, opt, 0, MetricsWriter::create(&metrics_path)?)
        }
    };
    let pc = PretrainConfig { steps: cfg.pretrain.steps, batch_size: cfg.pretrain.batch_size, clip_norm: cfg.pretrain.clip_norm };
    let task_hash = cfg.task.hash();
    let every = cfg.pretrain.log_every.max(1);
    let mut final_loss = None;
    pretrain_from(&model.chain, &mut theta, &mut opt, &data, &pc, cfg.run.seed, start, |k, loss| {
        final_loss = Some(loss);
        let step = k + 1;
        if step % every == 0 || k == 0 || step == pc.steps {
            let rec = MetricsRecord {
                step,
                loss: Some(loss),
                wall_clock: elapsed(cfg, start_time),
                ..MetricsRecord::empty(RecordKind::Pretrain, &task_hash)
            };
            writer.write(&rec)?;
        }
        Ok(())
    })?;
    let mut ck = base_checkpoint(cfg, "pretrain", &task);
    ck.put_params("theta", &theta);
    ck.put_optimizer("opt_theta", &opt);
    ck.set_meta("epoch", 0);
    ck.set_meta("step", pc.steps.max(start));
    let path = out.join(PRETRAIN_CHECKPOINT);
    ck.save(&path)?;
    Ok(PretrainOutcome { checkpoint: path, metrics: metrics_path, steps: pc.steps.max(start), final_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOutcome {
    pub state: AlignState,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<MetricsRecord>,
}

impl AlignOutcome {
    pub fn last_eval(&self) -> Option<&EvalMetrics> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

fn initial_state(cfg: &RunConfig, task: &Task) -> Result<AlignState> {
    let (mut theta, phi) = task.init_params(cfg.run.seed);
    match (&cfg.run.pretrained, cfg.task.kind) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            check_task(&ck, cfg)?;
            theta = ck.params("theta");
            task.check_theta(&theta)?;
        }
        (None, TaskKind::Continuous) => {
            return Err(Error::Config("continuous alignment needs a pretrained checkpoint (run.pretrained)".into()));
        }
        (None, TaskKind::Discrete) => {}
    }
    Ok(AlignState::new(theta, phi, &cfg.align_config()))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { samples: cfg.run.eval_samples, bins: cfg.run.bins, range: cfg.run.range }
}

/// Evaluates `theta` and dumps its samples under `out/samples`.
fn eval_snapshot(cfg: &RunConfig, task: &Task, reward: &RewardSpec, state: &AlignState) -> Result<EvalMetrics> {
    let key = RolloutKey::eval(cfg.run.seed, state.epoch as u64);
    let samples = draw_samples(task, reward, &state.theta, cfg.run.eval_samples, key)?;
    let dir = cfg.run.out.join("samples");
    create_dir(&dir)?;
    write_samples(&dir.join(format!("epoch-{:04}.csv", state.epoch)), &samples)?;
    evaluate_samples(task, reward, &state.theta, &eval_options(cfg), &samples)
}

/// Runs alignment epochs up to `run.epochs`, from the pretrained policy or
/// from a checkpoint written by an earlier run.
pub fn cmd_align(cfg: &RunConfig, resume: Option<&Path>) -> Result<AlignOutcome> {
    let start_time = Instant::now();
    let task = Task::build(&cfg.task)?;
    let reward = cfg.reward_spec()?;
    let config = cfg.align_config();
    let out = &cfg.run.out;
    create_dir(out)?;
    write_config(cfg)?;
    let metrics_path = out.join(ALIGN_METRICS);
    let (mut state, mut writer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_task(&ck, cfg)?;
            warn_config_drift(&ck, cfg);
            if ck.meta("kind")? != "align" {
                return Err(Error::Compatibility(format!("{} is not an alignment checkpoint", path.display())));
            }
            let state = ck.align_state()?;
            task.check_theta(&state.theta)?;
            let writer = MetricsWriter::resume(&metrics_path, state.epoch, state.step)?;
            (state, writer)
        }
        None => (initial_state(cfg, &task)?, MetricsWriter::create(&metrics_path)?),
    };
    let task_hash = cfg.task.hash();
    let alg = config.algorithm.name();
    let mut records = Vec::new();
    let mut emit = |writer: &mut MetricsWriter, rec: MetricsRecord| -> Result<()> {
        writer.write(&rec)?;
        records.push(rec);
        Ok(())
    };
    let eval_due = |epoch: usize| cfg.run.eval_every > 0 && (epoch.is_multiple_of(cfg.run.eval_every) || epoch == cfg.run.epochs);
    if resume.is_none() && eval_due(0) {
        let m = eval_snapshot(cfg, &task, &reward, &state)?;
        let rec = MetricsRecord {
            algorithm: Some(alg.to_string()),
            wall_clock: elapsed(cfg, start_time),
            eval: Some(m),
            ..MetricsRecord::empty(RecordKind::Eval, &task_hash)
        };
        emit(&mut writer, rec)?;
    }
    let save = |state: &AlignState, path: &Path| -> Result<()> {
        let mut ck = base_checkpoint(cfg, "align", &task);
        ck.set_meta("algorithm", alg);
        ck.put_align_state(state);
        ck.save(path)
    };
    let latest = out.join(ALIGN_CHECKPOINT);
    while state.epoch < cfg.run.epochs {
        let stats = align_epoch(task.model(), &config, &reward, cfg.run.seed, &mut state)?;
        let mut rec = MetricsRecord::from_epoch(&stats, alg, &task_hash);
        rec.wall_clock = elapsed(cfg, start_time);
        emit(&mut writer, rec.clone())?;
        if eval_due(state.epoch) {
            let m = eval_snapshot(cfg, &task, &reward, &state)?;
            let eval = MetricsRecord { kind: RecordKind::Eval, eval: Some(m), wall_clock: elapsed(cfg, start_time), ..rec };
            emit(&mut writer, eval)?;
        }
        let every = cfg.run.checkpoint_every;
        if every > 0 && state.epoch % every == 0 {
            save(&state, &out.join("checkpoints").join(format!("epoch-{:04}.ckpt", state.epoch)))?;
            save(&state, &latest)?;
        }
    }
    save(&state, &latest)?;
    Ok(AlignOutcome { state, checkpoint: latest, metrics: metrics_path, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
    pub metrics: EvalMetrics,
}

/// Evaluates a checkpoint. Task and reward come from the checkpoint unless
/// `cfg` is given, in which case its task must match.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: Option<&RunConfig>,
    samples: usize,
    bins: Option<usize>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let stored = parse_config_str(ck.meta("config")?)?;
    let cfg = match cfg {
        Some(c) => {
            check_task(&ck, c)?;
            c.clone()
        }
        None => stored,
    };
    let task = Task::build(&cfg.task)?;
    let reward = cfg.reward_spec()?;
    let theta = ck.params("theta");
    task.check_theta(&theta)?;
    let epoch: usize = ck.meta_parse("epoch")?;
    let opts = EvalOptions { samples, bins: bins.unwrap_or(cfg.run.bins), range: cfg.run.range };
    let key = RolloutKey::eval(seed.unwrap_or(cfg.run.seed), epoch as u64);
    let drawn = draw_samples(&task, &reward, &theta, samples, key)?;
    let metrics = evaluate_samples(&task, &reward, &theta, &opts, &drawn)?;
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        kind: ck.meta("kind")?.to_string(),
        epoch,
        step: ck.meta_parse("step")?,
        config_hash: hex(&ck.config_hash),
        metrics,
    })
}

/// Merges metrics files into `out/compare.svg` and `out/compare.csv`.
pub fn cmd_compare(files: &[PathBuf], out: &Path) -> Result<CompareOutput> {
    let result = compare_files(files)?;
    write_compare(out, &result)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(result)
}

/// Oracle checks on the configured discrete chain, or the default one.
pub fn cmd_oracle_check(cfg: Option<&RunConfig>, seed: u64, perturb_flows: f64) -> Result<Vec<CheckResult>> {
    let mut opts = OracleOptions::default_chain(seed);
    if let Some(cfg) = cfg.filter(|c| c.task.kind == TaskKind::Discrete) {
        let Task::Discrete(model) = Task::build(&cfg.task)? else { unreachable!("discrete task") };
        let reward = cfg.reward_spec()?;
        opts.log_rewards = (0..model.spec.states())
            .map(|x| reward.reward.eval(&crate::diffusion::State::Index(x), None).map(|r| reward.beta_max * r))
            .collect::<Result<Vec<_>>>()?;
        opts.spec = model.spec;
    }
    opts.perturb_flows = perturb_flows;
    run_oracle_checks(&opts)
}
