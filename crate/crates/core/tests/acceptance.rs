//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use diffalign::harness::checks::{db_soundness, fd_suite, kl_gradient_identity, prop1_suite, FdLoss, OracleOptions};
use diffalign::harness::{cmd_align, cmd_pretrain, parse_config_str, read_metrics, AlignOutcome, EvalMetrics, RunConfig};
use diffalign::rewards::{beta_at, make_reward, RewardParams, RewardSpec};

const SEED: u64 = 0;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, out: &Path) -> RunConfig {
    let text = std::fs::read_to_string(configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    let mut c = parse_config_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    c.run.out = out.to_path_buf();
    c
}

fn first_eval(run: &AlignOutcome) -> &EvalMetrics {
    run.records.iter().find_map(|r| r.eval.as_ref()).expect("initial evaluation")
}

fn final_eval(run: &AlignOutcome) -> &EvalMetrics {
    run.last_eval().expect("final evaluation")
}

fn sd(m: &EvalMetrics) -> f64 {
    m.reward_se * (m.samples as f64).sqrt()
}

fn prop1() -> Line {
    let t = Instant::now();
    let r = prop1_suite(SEED, 100).unwrap();
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: 1,
        name: "prop1-identity",
        pass: r.max_error <= 1e-10 && r.cases == 100 && secs < 10.0,
        detail: format!("cases={} max_err={:.3e} tol=1e-10 time={secs:.2}s", r.cases, r.max_error),
    }
}

fn db_optimum() -> Line {
    let opts = OracleOptions::default_chain(SEED);
    let t = Instant::now();
    let r = db_soundness(&opts.spec, &opts.log_rewards, 0.0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: 2,
        name: "db-optimum-soundness",
        pass: r.max_error <= 1e-10 && secs < 1.0,
        detail: format!("transitions={} max_abs_delta={:.3e} tol=1e-10 time={secs:.3}s", r.cases, r.max_error),
    }
}

fn discrete_matching(id: usize, name: &'static str, config: &str, tol: f64, dir: &Path) -> Line {
    let cfg = load(config, &dir.join(config));
    let t = Instant::now();
    let run = cmd_align(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let m = final_eval(&run);
    let tv = m.tv_optimal.expect("discrete metrics");
    Line {
        id,
        name,
        pass: tv <= tol && cfg.run.epochs <= 60 && secs < 600.0,
        detail: format!(
            "epochs={} tv_optimal={tv:.4} tol={tol} floor={:.3e} tv_target={:.4} time={secs:.1}s",
            cfg.run.epochs,
            m.floor.unwrap(),
            m.tv_target.unwrap()
        ),
    }
}

fn gradient_agreement() -> Line {
    let r = kl_gradient_identity(SEED, 20).unwrap();
    Line {
        id: 5,
        name: "kl-gradient-agreement",
        pass: r.max_error <= 1e-8 && r.cases == 20,
        detail: format!("batches={} max_rel_err={:.3e} tol=1e-8", r.cases, r.max_error),
    }
}

fn finite_differences() -> Line {
    let mut parts = Vec::new();
    let mut pass = true;
    for loss in [FdLoss::Denoising, FdLoss::FlDb, FdLoss::DagKl, FdLoss::Ddpo] {
        let r = fd_suite(loss, SEED, 10).unwrap();
        pass &= r.max_error <= 1e-4 && r.cases >= 10;
        parts.push(format!("{}={:.2e}", r.check, r.max_error));
    }
    Line { id: 6, name: "finite-difference-suite", pass, detail: format!("{} tol=1e-4", parts.join(" ")) }
}

fn continuous_alignment(dir: &Path, pretrained: &Path) -> Line {
    let t = Instant::now();
    let mut runs = Vec::new();
    for alg in ["dag-db", "dag-kl", "ddpo"] {
        let name = format!("ring-{alg}.toml");
        let mut cfg = load(&name, &dir.join(&name));
        cfg.run.pretrained = Some(pretrained.to_path_buf());
        runs.push((alg, cfg.run.epochs * cfg.algorithm.rollouts_per_epoch, cmd_align(&cfg, None).unwrap()));
    }
    let secs = t.elapsed().as_secs_f64();
    let base = first_eval(&runs[0].2);
    let margin = 5.0 * sd(base);
    let finals: Vec<f64> = runs.iter().map(|(_, _, r)| final_eval(r).reward_mean).collect();
    let budgets_match = runs.iter().all(|(_, b, _)| *b == 100 * 512);
    let same_base = runs.iter().all(|(_, _, r)| first_eval(r) == base);
    let ordered = finals[0] >= finals[2] && finals[1] >= finals[2];
    let improved = finals.iter().all(|f| f - base.reward_mean >= margin);
    let (kl0, kl1) = (base.hist_kl.unwrap(), final_eval(&runs[0].2).hist_kl.unwrap());
    Line {
        id: 7,
        name: "continuous-alignment",
        pass: budgets_match && same_base && ordered && improved && kl1 < kl0 && secs < 3600.0,
        detail: format!(
            "baseline={:.4} (sd {:.4}, need +{margin:.4}) dag-db={:.4} dag-kl={:.4} ddpo={:.4} hist_kl {kl0:.3}->{kl1:.3} time={secs:.0}s",
            base.reward_mean,
            sd(base),
            finals[0],
            finals[1],
            finals[2]
        ),
    }
}

fn null_signal(dir: &Path, pretrained: &Path) -> Line {
    let mut parts = Vec::new();
    let mut pass = true;
    for alg in ["dag-db", "dag-kl", "ddpo"] {
        let name = format!("ring-{alg}.toml");
        let mut cfg = load(&name, &dir.join(format!("null-{alg}")));
        cfg.run.pretrained = Some(pretrained.to_path_buf());
        cfg.reward.beta_max = 0.0;
        cfg.run.epochs = 10;
        let run = cmd_align(&cfg, None).unwrap();
        let (a, b) = (first_eval(&run), final_eval(&run));
        let se = (a.reward_se.powi(2) + b.reward_se.powi(2)).sqrt();
        let z = (b.reward_mean - a.reward_mean).abs() / se;
        pass &= z <= 3.0;
        parts.push(format!("{alg}: {:.4}->{:.4} ({z:.1} se)", a.reward_mean, b.reward_mean));
    }
    Line { id: 8, name: "null-signal-control", pass, detail: format!("{} tol=3 se", parts.join(", ")) }
}

fn annealing() -> Line {
    let reward = make_reward("ring", &RewardParams::default(), None).unwrap();
    let spec = RewardSpec::new("ring", reward, 100.0, 0.5).unwrap();
    let total = 100;
    let mut pass = beta_at(&spec, 0, total) == 0.0 && beta_at(&spec, total / 2, total) == 100.0;
    for e in 0..=total {
        let want = if e <= total / 2 { 100.0 * e as f64 / 50.0 } else { 100.0 };
        pass &= (beta_at(&spec, e, total) - want).abs() <= 1e-12;
    }
    pass &= beta_at(&spec, 25, total) == 50.0 && beta_at(&spec, 75, total) == 100.0;
    Line {
        id: 9,
        name: "beta-annealing",
        pass,
        detail: format!(
            "beta(0)={} beta(25)={} beta(50)={} beta(100)={}",
            beta_at(&spec, 0, total),
            beta_at(&spec, 25, total),
            beta_at(&spec, 50, total),
            beta_at(&spec, 100, total)
        ),
    }
}

fn persistence(dir: &Path, pretrained: &Path) -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, continuous) in [("discrete-dag-kl.toml", false), ("ring-dag-db.toml", true)] {
        let prep = |out: &str| {
            let mut cfg = load(name, &dir.join(out));
            cfg.run.epochs = 4;
            cfg.run.eval_every = 1;
            cfg.run.checkpoint_every = 2;
            if continuous {
                cfg.run.pretrained = Some(pretrained.to_path_buf());
                cfg.run.eval_samples = 512;
            }
            cfg
        };
        let tag = name.trim_end_matches(".toml");
        let a = cmd_align(&prep(&format!("{tag}-a")), None).unwrap();
        let b = cmd_align(&prep(&format!("{tag}-b")), None).unwrap();
        let same = std::fs::read(&a.metrics).unwrap() == std::fs::read(&b.metrics).unwrap() && a.state == b.state;

        let part = dir.join(format!("{tag}-resumed"));
        std::fs::create_dir_all(&part).unwrap();
        std::fs::copy(&a.metrics, part.join("metrics.jsonl")).unwrap();
        let ck = dir.join(format!("{tag}-a/checkpoints/epoch-0002.ckpt"));
        let mut cfg = prep(&format!("{tag}-resumed"));
        cfg.run.out = part.clone();
        let r = cmd_align(&cfg, Some(&ck)).unwrap();
        let resumed = r.state == a.state
            && std::fs::read(&r.metrics).unwrap() == std::fs::read(&a.metrics).unwrap()
            && read_metrics(&r.metrics).unwrap().len() == read_metrics(&a.metrics).unwrap().len();
        pass &= same && resumed;
        parts.push(format!("{tag}: rerun={same} resume={resumed}"));
    }
    Line { id: 10, name: "determinism-and-resume", pass, detail: parts.join(", ") }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let mut lines = vec![prop1(), db_optimum()];
    lines.push(discrete_matching(3, "dag-db-distribution-matching", "discrete-dag-db.toml", 0.05, d));
    lines.push(discrete_matching(4, "dag-kl-distribution-matching", "discrete-dag-kl.toml", 0.07, d));
    lines.push(gradient_agreement());
    lines.push(finite_differences());

    let pre = cmd_pretrain(&load("pretrain.toml", &d.join("pretrain")), None).expect("pretraining");
    lines.push(continuous_alignment(d, &pre.checkpoint));
    lines.push(null_signal(d, &pre.checkpoint));
    lines.push(annealing());
    lines.push(persistence(d, &pre.checkpoint));

    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!("{} {:>2} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
