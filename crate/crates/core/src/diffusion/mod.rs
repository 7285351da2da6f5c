//! Forward and reverse chains, rollouts and denoising pretraining.

pub mod discrete;
pub mod gaussian;
pub mod pretrain;
pub mod schedule;
pub mod trajectory;

pub use discrete::{discrete_reverse_logpmf, sample_categorical, DiscreteChainSpec, POLICY_PARAM};
pub use gaussian::{p_theta_logpdf, p_theta_params, p_theta_reparam, p_theta_sample, DataPredictionNet, GaussianChain};
pub use pretrain::{
    denoising_loss, denoising_pretrain_step, draw_noise, eight_gaussians, eight_gaussians_centers, load_dataset, pretrain, pretrain_from, Dataset, PretrainConfig,
};
pub use schedule::{
    gaussian_logpdf, make_schedule, q_marginal_sample, q_transition_logpdf, NoiseSchedule, ScheduleKind,
};
pub use trajectory::{State, Trajectory};
