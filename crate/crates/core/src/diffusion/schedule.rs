use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the cumulative signal level so no kernel degenerates.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha_bar_t = cos^2((t/T) * pi/2)`.
    Cosine,
    /// `alpha_bar_t` linear in `t` from 1 down to the floor.
    LinearCumulative,
}

/// Signal/noise ladder `(alpha_t, sigma_t)` for `t = 0..=T` with
/// `alpha_t^2 + sigma_t^2 = 1`, `alpha_0 = 1` and `alpha` strictly decreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, horizon: usize) -> Result<NoiseSchedule> {
    if horizon < 1 {
        return Err(Error::Contract("schedule horizon must be at least 1".into()));
    }
    let alpha_bar = |t: usize| -> f64 {
        let s = t as f64 / horizon as f64;
        let ab = match kind {
            ScheduleKind::Cosine => (s * PI / 2.0).cos().powi(2),
            ScheduleKind::LinearCumulative => 1.0 - (1.0 - ALPHA_BAR_FLOOR) * s,
        };
        ab.clamp(ALPHA_BAR_FLOOR, 1.0)
    };
    let alphas: Vec<f64> = (0..=horizon).map(|t| if t == 0 { 1.0 } else { alpha_bar(t).sqrt() }).collect();
    NoiseSchedule::from_alphas(alphas)
}

impl NoiseSchedule {
    /// Builds a schedule from `alpha_0..=alpha_T`, validating the invariants.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Contract("schedule needs alpha_0 and at least one step".into()));
        }
        if alphas[0] != 1.0 {
            return Err(Error::Contract(format!("alpha_0 must be 1, got {}", alphas[0])));
        }
        for t in 1..alphas.len() {
            if !(alphas[t] > 0.0 && alphas[t] <= 1.0) {
                return Err(Error::Contract(format!("alpha_{t} = {} outside (0, 1]", alphas[t])));
            }
            if alphas[t] >= alphas[t - 1] {
                return Err(Error::DegenerateKernel { t });
            }
        }
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(NoiseSchedule { alphas, sigmas })
    }

    pub fn horizon(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", self.horizon())));
        }
        Ok(())
    }

    /// `1 - alpha_t^2 / alpha_(t-1)^2`, the variance of both the forward
    /// kernel and the reverse kernel at step `t`.
    pub fn kernel_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let r = self.alphas[t] / self.alphas[t - 1];
        let v = 1.0 - r * r;
        if v <= 0.0 {
            return Err(Error::DegenerateKernel { t });
        }
        Ok(v)
    }

    /// Coefficients `(a, c)` of the reverse mean `a * x_t + c * x_hat`.
    pub fn reverse_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let (a_prev, a_t) = (self.alphas[t - 1], self.alphas[t]);
        let (s_prev, s_t) = (self.sigmas[t - 1], self.sigmas[t]);
        let denom = s_t * s_t * a_prev;
        Ok((s_prev * s_prev * a_t / denom, (a_prev * a_prev - a_t * a_t) / denom))
    }
}

/// Isotropic Gaussian log-density with per-dimension variance `var`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / var - 0.5 * d * (2.0 * PI * var).ln()
}

/// `log q(x_t | x_(t-1))` for the forward kernel
/// `N(x_t; (alpha_t/alpha_(t-1)) x_(t-1), (1 - alpha_t^2/alpha_(t-1)^2) I)`.
pub fn q_transition_logpdf(schedule: &NoiseSchedule, x_t: &[f64], x_prev: &[f64], t: usize) -> Result<f64> {
    if x_t.len() != x_prev.len() {
        return Err(Error::Contract("state dimensions differ".into()));
    }
    let var = schedule.kernel_variance(t)?;
    let r = schedule.alpha(t) / schedule.alpha(t - 1);
    let mean: Vec<f64> = x_prev.iter().map(|v| r * v).collect();
    Ok(gaussian_logpdf(x_t, &mean, var))
}

/// `x_t = alpha_t x_0 + sigma_t eps`.
pub fn q_marginal_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cosine_two_steps() {
        let s = make_schedule(ScheduleKind::Cosine, 2).unwrap();
        assert!((s.alpha(1) * s.alpha(1) - 0.5).abs() < 1e-15);
        assert!((s.alpha(1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        assert!(matches!(make_schedule(ScheduleKind::Cosine, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn flat_alphas_are_degenerate() {
        assert!(matches!(
            NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.5]),
            Err(Error::DegenerateKernel { t: 2 })
        ));
    }

    #[test]
    fn kernel_logpdf_at_mean() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.8]).unwrap();
        let lp = q_transition_logpdf(&s, &[0.8], &[1.0], 1).unwrap();
        assert!((lp - (-0.5 * (2.0 * PI * 0.36).ln())).abs() < 1e-14);
        assert!((lp - (-0.408_112_909_438_682)).abs() < 1e-12);
    }

    #[test]
    fn kernel_logpdf_symmetric_and_factorised() {
        let s = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        let r = s.alpha(4) / s.alpha(3);
        let prev = [0.3, -1.2, 2.0];
        let mean: Vec<f64> = prev.iter().map(|v| v * r).collect();
        let plus: Vec<f64> = mean.iter().map(|m| m + 0.37).collect();
        let minus: Vec<f64> = mean.iter().map(|m| m - 0.37).collect();
        let a = q_transition_logpdf(&s, &plus, &prev, 4).unwrap();
        let b = q_transition_logpdf(&s, &minus, &prev, 4).unwrap();
        assert!((a - b).abs() < 1e-13);
        let sum: f64 = (0..3).map(|i| q_transition_logpdf(&s, &plus[i..=i], &prev[i..=i], 4).unwrap()).sum();
        assert!((a - sum).abs() < 1e-12);
    }

    #[test]
    fn marginal_sample_edges() {
        let s = make_schedule(ScheduleKind::Cosine, 5).unwrap();
        assert_eq!(q_marginal_sample(&s, &[1.5, -2.0], 0, &[0.3, 0.4]), vec![1.5, -2.0]);
        let x = q_marginal_sample(&s, &[0.0, 0.0], 3, &[0.3, 0.4]);
        assert_eq!(x, vec![s.sigma(3) * 0.3, s.sigma(3) * 0.4]);
    }

    #[test]
    fn marginal_variance_monte_carlo() {
        let s = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        let t = 6;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                q_marginal_sample(&s, &[0.7], t, &[e])[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = s.sigma(t).powi(2);
        // standard error of a Gaussian sample variance: sigma^2 sqrt(2/(n-1))
        let se = target * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - target).abs() < 3.0 * se, "var {var} target {target}");
    }

    #[test]
    fn reverse_coefficients_collapse_at_first_step() {
        let s = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let (a, c) = s.reverse_mean_coeffs(1).unwrap();
        assert_eq!(a, 0.0);
        assert!((c - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..200, cosine in any::<bool>()) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::LinearCumulative };
            let s = make_schedule(kind, t).unwrap();
            prop_assert_eq!(s.horizon(), t);
            prop_assert_eq!(s.alpha(0), 1.0);
            for k in 0..=t {
                prop_assert!((s.alpha(k).powi(2) + s.sigma(k).powi(2) - 1.0).abs() < 1e-12);
                if k > 0 {
                    prop_assert!(s.alpha(k) < s.alpha(k - 1));
                    prop_assert!(s.kernel_variance(k).unwrap() > 0.0);
                }
            }
        }
    }
}
