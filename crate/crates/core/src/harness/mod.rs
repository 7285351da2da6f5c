//! Command-line orchestration: configuration, metrics, checkpoints,
//! evaluation, plots and oracle checks.

pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod task;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use checks::{run_oracle_checks, CheckResult, OracleOptions};
pub use commands::{cmd_align, cmd_compare, cmd_eval, cmd_oracle_check, cmd_pretrain, AlignOutcome, EvalReport, PretrainOutcome};
pub use config::{parse_config, parse_config_str, RunConfig, TaskKind};
pub use eval::{evaluate, histogram_kl, EvalOptions};
pub use metrics::{read_metrics, EvalMetrics, MetricsRecord, MetricsWriter, RecordKind};
pub use plot::{compare_files, compare_runs, CompareOutput};
pub use task::Task;
