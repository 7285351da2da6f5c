use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffalign::harness::checks::report_lines;
use diffalign::harness::{cmd_align, cmd_compare, cmd_eval, cmd_oracle_check, cmd_pretrain, parse_config, RunConfig};
use diffalign::{Error, Result};

/// Reward alignment of diffusion samplers.
#[derive(Parser, Debug)]
#[command(name = "diffalign", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser on the task dataset.
    Pretrain,
    /// Align a pretrained chain to the configured reward.
    Align {
        /// Pretrained checkpoint; overrides `run.pretrained`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Sample from a checkpoint and report distribution metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Plot and merge metrics files.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run gradient and detailed-balance oracle checks.
    OracleCheck {
        /// Shift every learnable log-flow by this amount (fault injection).
        #[arg(long, default_value_t = 0.0)]
        perturb_flows: f64,
    },
}

fn load(cli: &Cli, required: bool) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else {
        return if required { Err(Error::Config("--config is required for this command".into())) } else { Ok(None) };
    };
    let mut cfg = parse_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    Ok(Some(cfg))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable summary")
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = load(cli, true)?.expect("required");
            let out = cmd_pretrain(&cfg, cli.resume.as_deref())?;
            println!("{}", json(&out));
        }
        Command::Align { pretrained } => {
            let mut cfg = load(cli, true)?.expect("required");
            if let Some(p) = pretrained {
                if !p.is_file() {
                    return Err(Error::Config(format!("pretrained checkpoint {} does not exist", p.display())));
                }
                cfg.run.pretrained = Some(p.clone());
            }
            let out = cmd_align(&cfg, cli.resume.as_deref())?;
            let summary = serde_json::json!({
                "checkpoint": out.checkpoint,
                "metrics": out.metrics,
                "epoch": out.state.epoch,
                "step": out.state.step,
                "eval": out.last_eval(),
            });
            println!("{summary}");
        }
        Command::Eval { checkpoint, samples, bins } => {
            let cfg = load(cli, false)?;
            let report = cmd_eval(checkpoint, cfg.as_ref(), *samples, *bins, cli.seed)?;
            println!("{}", json(&report));
        }
        Command::Compare { files } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let res = cmd_compare(files, &out)?;
            let summary = serde_json::json!({
                "svg": out.join("compare.svg"),
                "csv": out.join("compare.csv"),
                "records": res.records,
                "warnings": res.warnings,
            });
            println!("{summary}");
        }
        Command::OracleCheck { perturb_flows } => {
            let cfg = load(cli, false)?;
            let seed = cli.seed.or(cfg.as_ref().map(|c| c.run.seed)).unwrap_or(0);
            let results = cmd_oracle_check(cfg.as_ref(), seed, *perturb_flows)?;
            print!("{}", report_lines(&results));
            if results.iter().any(|r| !r.pass) {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
