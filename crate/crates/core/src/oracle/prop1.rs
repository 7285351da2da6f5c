//! The per-transition KL gradient equals the expectation of `b * grad log p`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::logsumexp;
use crate::error::{Error, Result};
use crate::numerics::{grad, ParamSet, Tensor};

/// One enumerable transition: categorical policy logits over `x_(t-1)` and
/// the unnormalised log-target `log F(x_(t-1)) + log q(x_t | x_(t-1)) - log F(x_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Instance {
    pub logits: Vec<f64>,
    pub log_target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    /// Gradient of the enumerated KL by automatic differentiation.
    pub kl_grad: Vec<f64>,
    /// `sum_x p(x) b(x) grad log p(x)`, in closed form.
    pub estimator_grad: Vec<f64>,
    pub discrepancy: f64,
}

/// Random logits, flows and a random kernel column over `states` outcomes.
pub fn random_prop1_instance(states: usize, rng: &mut ChaCha8Rng) -> Prop1Instance {
    let logits = (0..states).map(|_| rng.random_range(-2.0..2.0)).collect();
    let log_flow_t: f64 = rng.random_range(0.1f64..5.0).ln();
    let log_target = (0..states)
        .map(|_| {
            let flow: f64 = rng.random_range(0.1..5.0);
            let q: f64 = rng.random_range(0.01..1.0);
            flow.ln() + q.ln() - log_flow_t
        })
        .collect();
    Prop1Instance { logits, log_target }
}

/// Compares the exact gradient of `KL(p_theta || target)` with the
/// REINFORCE expectation, both by full enumeration.
pub fn prop1_check(inst: &Prop1Instance) -> Result<Prop1Report> {
    let s = inst.logits.len();
    if s == 0 || inst.log_target.len() != s {
        return Err(Error::Contract("logits and target must be non-empty and aligned".into()));
    }
    let mut params = ParamSet::new();
    params.insert("logits", Tensor::matrix(1, s, inst.logits.clone()));
    let target = Tensor::matrix(1, s, inst.log_target.clone());
    let (_, g) = grad(&params, |tape, b| {
        let logp = b.get("logits").log_softmax();
        (logp.exp() * (logp - tape.constant(target.clone()))).sum()
    })?;
    let kl_grad = g.get("logits").expect("bound").data().to_vec();

    let lse = logsumexp(&inst.logits);
    let logp: Vec<f64> = inst.logits.iter().map(|l| l - lse).collect();
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let b: Vec<f64> = logp.iter().zip(&inst.log_target).map(|(lp, lt)| lp - lt).collect();
    let pb: f64 = p.iter().zip(&b).map(|(a, c)| a * c).sum();
    // d log p(x) / d logit_k = [x = k] - p_k
    let estimator_grad: Vec<f64> = (0..s).map(|k| p[k] * b[k] - p[k] * pb).collect();
    let discrepancy = kl_grad.iter().zip(&estimator_grad).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    Ok(Prop1Report { kl_grad, estimator_grad, discrepancy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianReinforce {
    pub estimate: f64,
    pub std_error: f64,
    pub analytic: f64,
}

/// Policy `N(mu, sigma^2)` against the unnormalised target
/// `exp(log_scale) N(m, s^2)`: Monte Carlo mean of `b(x) d/dmu log p(x)`
/// versus the closed form `d/dmu KL = (mu - m) / s^2`.
pub fn gaussian_reinforce_check(
    mu: f64,
    sigma: f64,
    m: f64,
    s: f64,
    log_scale: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianReinforce> {
    if !(sigma > 0.0 && s > 0.0) || n < 2 {
        return Err(Error::Contract("need positive scales and at least two draws".into()));
    }
    let logn = |x: f64, mean: f64, sd: f64| -0.5 * ((x - mean) / sd).powi(2) - (sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let x = mu + sigma * e;
        let b = logn(x, mu, sigma) - (log_scale + logn(x, m, s));
        let v = b * (x - mu) / (sigma * sigma);
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let estimate = sum / nf;
    let var = (sum_sq / nf - estimate * estimate) * nf / (nf - 1.0);
    Ok(GaussianReinforce { estimate, std_error: (var / nf).sqrt(), analytic: (mu - m) / (s * s) })
}
