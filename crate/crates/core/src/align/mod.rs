//! Alignment objectives and the per-epoch training loop.

pub mod batch;
pub mod losses;
pub mod model;
pub mod trainer;

pub use batch::{annotate_rewards, States, TransitionBatch};
pub use losses::{
    advantage_b, dag_kl_policy_loss, db_residual, ddpo_advantages, ddpo_loss, fl_db_loss, fl_db_residual,
    kl_regularizer, Terms,
};
pub use model::{AlignModel, ContinuousModel, DiscreteModel, FlowNet, FLOW_TABLE_PARAM};
pub use trainer::{
    align_epoch, collect_rollouts, draw_conditions, minibatches, AlignConfig, AlignState, Algorithm, EpochStats,
    KlScaling,
};
