use std::path::Path;
use std::process::Command;

use diffalign::harness::checkpoint::Checkpoint;
use diffalign::harness::eval::{draw_samples, evaluate_samples};
use diffalign::harness::{
    cmd_align, cmd_compare, cmd_eval, cmd_pretrain, parse_config_str, read_metrics, EvalOptions, RecordKind, RunConfig,
    Task,
};
use diffalign::oracle::exact_flows_log;
use diffalign::rng::RolloutKey;
use diffalign::Error;

const DISCRETE: &str = r#"
[task]
kind = "discrete"
states = 8
horizon = 3

[reward]
id = "table"
beta_max = 1.0

[algorithm]
algorithm = "dag-kl"
rollouts_per_epoch = 64
opt_steps_per_epoch = 4
learning_rate = 0.03
flow_learning_rate = 0.03

[run]
seed = 5
epochs = 4
eval_every = 2
eval_samples = 256
checkpoint_every = 2
"#;

const CONTINUOUS: &str = r#"
[task]
kind = "continuous"
horizon = 5
hidden = [8]
dataset_size = 256

[reward]
id = "ring"
beta_max = 2.0

[algorithm]
rollouts_per_epoch = 16
opt_steps_per_epoch = 2

[pretrain]
steps = 40
batch_size = 32
log_every = 5

[run]
seed = 2
epochs = 2
eval_every = 1
eval_samples = 128
"#;

fn config(text: &str, out: &Path) -> RunConfig {
    let mut c = parse_config_str(text).unwrap();
    c.run.out = out.to_path_buf();
    c
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn align_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_align(&config(DISCRETE, &dir.path().join("a")), None).unwrap();
    let b = cmd_align(&config(DISCRETE, &dir.path().join("b")), None).unwrap();
    assert_eq!(read(&a.metrics), read(&b.metrics));
    assert_eq!(a.state, b.state);
    assert_eq!(read(dir.path().join("a/samples/epoch-0004.csv")), read(dir.path().join("b/samples/epoch-0004.csv")));

    let recs = read_metrics(&a.metrics).unwrap();
    let kinds: Vec<(RecordKind, usize)> = recs.iter().map(|r| (r.kind, r.epoch)).collect();
    use RecordKind::*;
    assert_eq!(kinds, vec![(Eval, 0), (Align, 1), (Align, 2), (Eval, 2), (Align, 3), (Align, 4), (Eval, 4)]);
    assert!(recs.iter().all(|r| r.wall_clock.is_none()));
    assert_eq!(recs[6].trajectories, 4 * 64);
}

#[test]
fn align_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = cmd_align(&config(DISCRETE, &dir.path().join("full")), None).unwrap();

    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    std::fs::copy(&full.metrics, part.join("metrics.jsonl")).unwrap();
    let ck = dir.path().join("full/checkpoints/epoch-0002.ckpt");
    let resumed = cmd_align(&config(DISCRETE, &part), Some(&ck)).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(read(&resumed.metrics), read(&full.metrics));
}

#[test]
fn resume_rejects_other_tasks_and_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_align(&config(DISCRETE, &dir.path().join("a")), None).unwrap();
    let other = DISCRETE.replace("states = 8", "states = 6");
    let err = cmd_align(&config(&other, &dir.path().join("b")), Some(&run.checkpoint)).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)), "{err}");
}

#[test]
fn pretrain_resume_and_task_hash() {
    let dir = tempfile::tempdir().unwrap();
    let full = cmd_pretrain(&config(CONTINUOUS, &dir.path().join("full")), None).unwrap();
    let half = CONTINUOUS.replace("steps = 40", "steps = 20");
    let first = cmd_pretrain(&config(&half, &dir.path().join("part")), None).unwrap();
    let resumed = cmd_pretrain(&config(CONTINUOUS, &dir.path().join("part")), Some(&first.checkpoint)).unwrap();
    assert_eq!(resumed.steps, 40);
    assert_eq!(resumed.final_loss, full.final_loss);
    let (a, b) = (Checkpoint::load(&full.checkpoint).unwrap(), Checkpoint::load(&resumed.checkpoint).unwrap());
    assert_eq!(a.params("theta"), b.params("theta"));
    assert_eq!(read(&full.metrics), read(&resumed.metrics));

    // alignment from the pretrained chain, then a chain of another width
    let mut cfg = config(CONTINUOUS, &dir.path().join("align"));
    cfg.run.pretrained = Some(full.checkpoint.clone());
    let out = cmd_align(&cfg, None).unwrap();
    assert!(out.last_eval().unwrap().hist_kl.is_some());

    let mut wide = config(&CONTINUOUS.replace("hidden = [8]", "hidden = [12]"), &dir.path().join("wide"));
    wide.run.pretrained = Some(full.checkpoint.clone());
    assert!(matches!(cmd_align(&wide, None), Err(Error::Compatibility(_))));

    let mut missing = config(CONTINUOUS, &dir.path().join("none"));
    missing.run.pretrained = None;
    assert!(cmd_align(&missing, None).is_err());
}

#[test]
fn eval_reproduces_the_logged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_align(&config(DISCRETE, &dir.path().join("a")), None).unwrap();
    let report = cmd_eval(&run.checkpoint, None, 256, None, None).unwrap();
    assert_eq!(report.epoch, 4);
    assert_eq!(report.kind, "align");
    assert_eq!(&report.metrics, run.last_eval().unwrap());
    assert!(matches!(cmd_eval(&run.checkpoint, None, 0, None, None), Err(Error::Contract(_))));
}

#[test]
fn optimal_policy_evaluates_to_zero_gap() {
    let cfg = config(DISCRETE, Path::new("unused"));
    let task = Task::build(&cfg.task).unwrap();
    let reward = cfg.reward_spec().unwrap();
    let Task::Discrete(model) = &task else { panic!("discrete task") };
    let log_r: Vec<f64> = (0..8)
        .map(|x| reward.beta_max * reward.reward.eval(&diffalign::diffusion::State::Index(x), None).unwrap())
        .collect();
    let sol = exact_flows_log(&model.spec, &log_r).unwrap();
    let theta = model.spec.policy_from_log_tables(&sol.log_policy).unwrap();
    let opts = EvalOptions { samples: 20000, bins: 32, range: 4.0 };
    let samples = draw_samples(&task, &reward, &theta, opts.samples, RolloutKey::eval(1, 0)).unwrap();
    let m = evaluate_samples(&task, &reward, &theta, &opts, &samples).unwrap();
    assert!(m.tv_optimal.unwrap() < 1e-9);
    assert!(m.kl_optimal.unwrap().abs() < 1e-9);
    assert!((m.tv_target.unwrap() - sol.floor).abs() < 1e-12);
    assert_eq!(m.floor, Some(sol.floor));
    assert!(m.tv_optimal_mc.unwrap() <= 2.0 * m.tv_mc_se.unwrap(), "{m:?}");
    assert!(draw_samples(&task, &reward, &theta, 0, RolloutKey::eval(1, 0)).is_err());
}

#[test]
fn compare_outputs_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_align(&config(DISCRETE, &dir.path().join("kl")), None).unwrap();
    let b = cmd_align(&config(&DISCRETE.replace("dag-kl", "ddpo"), &dir.path().join("ddpo")), None).unwrap();
    let files = vec![a.metrics.clone(), b.metrics.clone()];
    let (o1, o2) = (dir.path().join("c1"), dir.path().join("c2"));
    let r = cmd_compare(&files, &o1).unwrap();
    cmd_compare(&files, &o2).unwrap();
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
    for f in ["compare.svg", "compare.csv"] {
        assert_eq!(read(o1.join(f)), read(o2.join(f)));
    }
    let csv = String::from_utf8(read(o1.join("compare.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 14);
    let svg = String::from_utf8(read(o1.join("compare.svg"))).unwrap();
    assert!(svg.contains("<svg") && svg.contains("dag-kl") && svg.contains("ddpo"));
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_diffalign")).args(args).current_dir(cwd).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("ok.toml"), DISCRETE.replace("epochs = 4", "epochs = 1")).unwrap();
    std::fs::write(d.join("typo.toml"), DISCRETE.replace("eval_every", "eval_evry")).unwrap();

    let (code, out) = cli(&["oracle-check"], d);
    assert_eq!(code, 0);
    let checks: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(checks.len() >= 8);
    assert!(checks.iter().all(|c| c["pass"] == true), "{out}");
    assert_eq!(cli(&["oracle-check", "--perturb-flows", "0.5"], d).0, 3);

    assert_eq!(cli(&["align"], d).0, 1);
    assert_eq!(cli(&["--config", "typo.toml", "align"], d).0, 1);
    assert_eq!(cli(&["--config", "missing.toml", "align"], d).0, 1);

    let (code, out) = cli(&["--config", "ok.toml", "--out", "run", "align"], d);
    assert_eq!(code, 0, "{out}");
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["epoch"], 1);
    assert!(d.join("run/align.ckpt").is_file());
    assert!(d.join("run/config.toml").is_file());

    let (code, out) = cli(&["eval", "--checkpoint", "run/align.ckpt", "--samples", "64"], d);
    assert_eq!(code, 0, "{out}");
    assert_eq!(cli(&["eval", "--checkpoint", "run/align.ckpt", "--samples", "0"], d).0, 1);
    assert_eq!(cli(&["eval", "--checkpoint", "nope.ckpt"], d).0, 1);

    let (code, _) = cli(&["--out", "cmp", "compare", "run/metrics.jsonl"], d);
    assert_eq!(code, 0);
    assert!(d.join("cmp/compare.svg").is_file());
}

#[test]
fn numerical_failures_map_to_exit_code_two() {
    let e = Error::NonFiniteLoss { what: "fl_db".into(), epoch: 0, step: 3 };
    assert_eq!(e.exit_code(), 2);
    assert_eq!(Error::Config("x".into()).exit_code(), 1);
}
