//! Exact and statistical reference computations used to verify training
//! code: dynamic-programming flows on discrete chains, gradient identities
//! and finite differences.

pub mod exact;
pub mod fd;
pub mod prop1;

pub use exact::{
    check_size, db_identity_residual, exact_flows, exact_flows_log, kl_divergence, optimal_floor, target_distribution,
    terminal_distribution, total_variation, ExactSolution, MAX_HORIZON, MAX_STATES,
};
pub use fd::{finite_diff, max_rel_err};
pub use prop1::{gaussian_reinforce_check, prop1_check, random_prop1_instance, GaussianReinforce, Prop1Instance, Prop1Report};

/// `log sum_i exp(x_i)`, stable for large magnitudes; `-inf` for an empty
/// or all `-inf` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_cases() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp(&[-1000.0, f64::NEG_INFINITY]) + 1000.0).abs() < 1e-12);
    }
}
