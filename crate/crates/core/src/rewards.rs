//! Black-box terminal rewards and the annealed temperature `beta`.
//!
//! Rewards are plain functions of a terminal state; nothing here touches a
//! tape, so no gradient can leak through them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffusion::State;
use crate::error::{Error, Result};
use crate::oracle::logsumexp;

pub const DEFAULT_BETA_MAX: f64 = 100.0;
pub const DEFAULT_ANNEAL_FRACTION: f64 = 0.5;

/// Registered reward ids.
pub const REWARD_IDS: [&str; 5] = ["gmm-logdensity", "ring", "quadrant", "table", "classifier"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reward {
    /// `log sum_k w_k N(x; mu_k, s^2 I)`.
    Gmm { centers: Vec<Vec<f64>>, log_weights: Vec<f64>, var: f64 },
    /// `-(||x|| - radius)^2`.
    Ring { radius: f64 },
    /// Minus the squared distance to the orthant `{x : signs_i x_i >= 0}`.
    Quadrant { signs: Vec<f64> },
    /// `values[x]` on a finite alphabet.
    Table { values: Vec<f64> },
    /// `log p(class = c | x)` of a Gaussian-class-conditional logistic model.
    Classifier { weights: Vec<Vec<f64>>, biases: Vec<f64> },
}

/// Optional parameters accepted by the registry; absent fields take the
/// reward's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

/// `ln(1 + 9k/(S-1))`: rewards spanning a factor of 10 across the alphabet.
pub fn default_table(states: usize) -> Vec<f64> {
    if states == 1 {
        return vec![0.0];
    }
    (0..states).map(|k| (1.0 + 9.0 * k as f64 / (states - 1) as f64).ln()).collect()
}

fn default_centers() -> Vec<Vec<f64>> {
    (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect()
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what} must be finite")));
    }
    Ok(())
}

/// Builds reward `id`. `states` sizes the default lookup table.
pub fn make_reward(id: &str, params: &RewardParams, states: Option<usize>) -> Result<Reward> {
    let std = params.std.unwrap_or(0.5);
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("reward std must be positive, got {std}")));
    }
    match id {
        "gmm-logdensity" => {
            let centers = params.centers.clone().unwrap_or_else(|| vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
            let n = centers.len();
            let weights = params.weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
            if n == 0 || weights.len() != n || weights.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::Config("gmm needs one positive weight per centre".into()));
            }
            for c in &centers {
                check_finite("gmm centres", c)?;
            }
            let total: f64 = weights.iter().sum();
            Ok(Reward::Gmm {
                centers,
                log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
                var: std * std,
            })
        }
        "ring" => {
            let radius = params.radius.unwrap_or(1.0);
            if !(radius >= 0.0 && radius.is_finite()) {
                return Err(Error::Config(format!("ring radius must be non-negative, got {radius}")));
            }
            Ok(Reward::Ring { radius })
        }
        "quadrant" => {
            let signs = params.quadrant.clone().unwrap_or_else(|| vec![1.0, 1.0]);
            if signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
                return Err(Error::Config("quadrant entries must be +1 or -1".into()));
            }
            Ok(Reward::Quadrant { signs })
        }
        "table" => {
            let values = match (&params.table, states) {
                (Some(v), _) => v.clone(),
                (None, Some(s)) => default_table(s),
                (None, None) => return Err(Error::Config("table reward needs `table` or a discrete task".into())),
            };
            check_finite("table rewards", &values)?;
            if values.is_empty() {
                return Err(Error::Config("table reward is empty".into()));
            }
            Ok(Reward::Table { values })
        }
        "classifier" => {
            let means = params.centers.clone().unwrap_or_else(default_centers);
            if means.len() < 2 {
                return Err(Error::Config("classifier needs at least two classes".into()));
            }
            for m in &means {
                check_finite("classifier means", m)?;
            }
            let var = std * std;
            let weights = means.iter().map(|m| m.iter().map(|v| v / var).collect()).collect();
            let biases = means.iter().map(|m| -m.iter().map(|v| v * v).sum::<f64>() / (2.0 * var)).collect();
            Ok(Reward::Classifier { weights, biases })
        }
        other => Err(Error::UnknownReward(other.to_string())),
    }
}

impl Reward {
    /// Number of condition ids the reward expects, if conditional.
    pub fn conditions(&self) -> Option<usize> {
        match self {
            Reward::Classifier { weights, .. } => Some(weights.len()),
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Reward::Table { .. })
    }

    /// Dimension of continuous inputs, when fixed by the parameters.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Reward::Gmm { centers, .. } => Some(centers[0].len()),
            Reward::Quadrant { signs } => Some(signs.len()),
            Reward::Classifier { weights, .. } => Some(weights[0].len()),
            Reward::Ring { .. } | Reward::Table { .. } => None,
        }
    }

    fn point<'a>(&self, x: &'a State) -> Result<&'a [f64]> {
        let p = x.as_point().ok_or_else(|| Error::Contract("continuous reward given a discrete state".into()))?;
        if let Some(d) = self.input_dim() {
            if p.len() != d {
                return Err(Error::Contract(format!("reward expects dimension {d}, got {}", p.len())));
            }
        }
        Ok(p)
    }

    /// `r_raw(x_0, c)`.
    pub fn eval(&self, x: &State, c: Option<usize>) -> Result<f64> {
        if let Some(n) = self.conditions() {
            match c {
                Some(c) if c < n => {}
                _ => return Err(Error::Contract(format!("conditional reward needs a condition id in 0..{n}"))),
            }
        } else if c.is_some() {
            return Err(Error::Contract("unconditional reward got a condition id".into()));
        }
        let r = match self {
            Reward::Gmm { centers, log_weights, var } => {
                let p = self.point(x)?;
                let d = p.len() as f64;
                let terms: Vec<f64> = centers
                    .iter()
                    .zip(log_weights)
                    .map(|(m, lw)| {
                        let sq: f64 = p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                        lw - 0.5 * sq / var - 0.5 * d * (2.0 * PI * var).ln()
                    })
                    .collect();
                logsumexp(&terms)
            }
            Reward::Ring { radius } => {
                let p = self.point(x)?;
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                -(norm - radius).powi(2)
            }
            Reward::Quadrant { signs } => {
                let p = self.point(x)?;
                -p.iter().zip(signs).map(|(v, s)| (v * s).min(0.0).powi(2)).sum::<f64>()
            }
            Reward::Table { values } => {
                let k = x.as_index().ok_or_else(|| Error::Contract("table reward given a continuous state".into()))?;
                *values.get(k).ok_or_else(|| Error::Contract(format!("state {k} outside reward table")))?
            }
            Reward::Classifier { weights, biases } => {
                let p = self.point(x)?;
                let logits: Vec<f64> =
                    weights.iter().zip(biases).map(|(w, b)| b + w.iter().zip(p).map(|(a, v)| a * v).sum::<f64>()).collect();
                logits[c.expect("checked above")] - logsumexp(&logits)
            }
        };
        if !r.is_finite() {
            return Err(Error::Contract("reward is non-finite at this input".into()));
        }
        Ok(r)
    }
}

/// A reward together with its temperature settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub id: String,
    pub reward: Reward,
    pub beta_max: f64,
    pub anneal_fraction: f64,
}

impl RewardSpec {
    pub fn new(id: &str, reward: Reward, beta_max: f64, anneal_fraction: f64) -> Result<Self> {
        if !(beta_max >= 0.0 && beta_max.is_finite()) {
            return Err(Error::Config(format!("beta_max must be finite and >= 0, got {beta_max}")));
        }
        if !(anneal_fraction > 0.0 && anneal_fraction <= 1.0) {
            return Err(Error::Config(format!("anneal_fraction must be in (0, 1], got {anneal_fraction}")));
        }
        Ok(RewardSpec { id: id.to_string(), reward, beta_max, anneal_fraction })
    }
}

pub fn eval_raw_reward(spec: &RewardSpec, x0: &State, c: Option<usize>) -> Result<f64> {
    spec.reward.eval(x0, c)
}

/// `beta_max * min(1, step / (anneal_fraction * total_steps))`.
pub fn beta_at(spec: &RewardSpec, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return spec.beta_max;
    }
    let ramp = spec.anneal_fraction * total_steps as f64;
    spec.beta_max * (step as f64 / ramp).min(1.0)
}

/// `beta(step) * r_raw(x_0, c)`, kept in the log domain.
pub fn log_reward(spec: &RewardSpec, x0: &State, c: Option<usize>, step: usize, total_steps: usize) -> Result<f64> {
    let beta = beta_at(spec, step, total_steps);
    let r = eval_raw_reward(spec, x0, c)?;
    Ok(if beta == 0.0 { 0.0 } else { beta * r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(id: &str, params: RewardParams) -> RewardSpec {
        RewardSpec::new(id, make_reward(id, &params, Some(4)).unwrap(), DEFAULT_BETA_MAX, DEFAULT_ANNEAL_FRACTION)
            .unwrap()
    }

    fn pt(v: &[f64]) -> State {
        State::Point(v.to_vec())
    }

    #[test]
    fn gmm_single_unit_component() {
        let s = spec(
            "gmm-logdensity",
            RewardParams { centers: Some(vec![vec![0.0, 0.0]]), std: Some(1.0), ..Default::default() },
        );
        let r = eval_raw_reward(&s, &pt(&[0.0, 0.0]), None).unwrap();
        assert!((r - (-(2.0 * PI).ln())).abs() < 1e-14);
    }

    #[test]
    fn gmm_two_components_at_centre() {
        let s = spec(
            "gmm-logdensity",
            RewardParams {
                centers: Some(vec![vec![0.0, 0.0], vec![3.0, 4.0]]),
                weights: Some(vec![3.0, 1.0]),
                std: Some(0.5),
                ..Default::default()
            },
        );
        let var: f64 = 0.25;
        let own = (0.75 / (2.0 * PI * var)).ln();
        let other = (0.25 / (2.0 * PI * var)).ln() - 25.0 / (2.0 * var);
        let want = own + (1.0 + (other - own).exp()).ln();
        let r = eval_raw_reward(&s, &pt(&[0.0, 0.0]), None).unwrap();
        assert!((r - want).abs() < 1e-13);
    }

    #[test]
    fn ring_maximum_on_circle() {
        let s = spec("ring", RewardParams { radius: Some(1.5), ..Default::default() });
        assert_eq!(eval_raw_reward(&s, &pt(&[0.9, 1.2]), None).unwrap(), 0.0);
        assert!(eval_raw_reward(&s, &pt(&[0.0, 0.3]), None).unwrap() < 0.0);
    }

    #[test]
    fn quadrant_distance() {
        let s = spec("quadrant", RewardParams::default());
        assert_eq!(eval_raw_reward(&s, &pt(&[0.5, 2.0]), None).unwrap(), 0.0);
        assert_eq!(eval_raw_reward(&s, &pt(&[-3.0, 2.0]), None).unwrap(), -9.0);
        assert_eq!(eval_raw_reward(&s, &pt(&[-3.0, -4.0]), None).unwrap(), -25.0);
    }

    #[test]
    fn table_lookup() {
        let s = spec("table", RewardParams { table: Some(vec![1.0, 2.0, 3.0]), ..Default::default() });
        assert_eq!(eval_raw_reward(&s, &State::Index(2), None).unwrap(), 3.0);
        assert!(matches!(eval_raw_reward(&s, &State::Index(3), None), Err(Error::Contract(_))));
        let d = default_table(16);
        assert!((d[15].exp() / d[0].exp() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_is_log_posterior() {
        let s = spec("classifier", RewardParams::default());
        let x = pt(&[1.9, 0.1]);
        let probs: Vec<f64> = (0..8).map(|c| eval_raw_reward(&s, &x, Some(c)).unwrap().exp()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 0);
        assert!(eval_raw_reward(&s, &x, None).is_err());
        assert!(eval_raw_reward(&s, &x, Some(8)).is_err());
    }

    #[test]
    fn unknown_id() {
        assert!(matches!(make_reward("aesthetic", &RewardParams::default(), None), Err(Error::UnknownReward(_))));
    }

    #[test]
    fn beta_schedule() {
        let s = spec("ring", RewardParams::default());
        assert_eq!(beta_at(&s, 0, 100), 0.0);
        assert_eq!(beta_at(&s, 50, 100), 100.0);
        assert_eq!(beta_at(&s, 25, 100), 50.0);
        assert_eq!(beta_at(&s, 100, 100), 100.0);
    }

    #[test]
    fn log_reward_examples() {
        let s = spec("table", RewardParams { table: Some(vec![0.5, -3.0]), ..Default::default() });
        assert_eq!(log_reward(&s, &State::Index(0), None, 50, 100).unwrap(), 50.0);
        assert_eq!(log_reward(&s, &State::Index(1), None, 0, 100).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn log_reward_is_beta_times_raw(x in -5.0f64..5.0, y in -5.0f64..5.0, step in 0usize..=200) {
            let s = spec("ring", RewardParams::default());
            let p = pt(&[x, y]);
            let lr = log_reward(&s, &p, None, step, 200).unwrap();
            let want = beta_at(&s, step, 200) * eval_raw_reward(&s, &p, None).unwrap();
            prop_assert_eq!(lr, want);
            prop_assert_eq!(eval_raw_reward(&s, &p, None).unwrap(), eval_raw_reward(&s, &p, None).unwrap());
        }

        #[test]
        fn beta_monotone_and_capped(a in 0usize..=1000, b in 0usize..=1000, frac in 0.01f64..=1.0) {
            let mut s = spec("ring", RewardParams::default());
            s.anneal_fraction = frac;
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(beta_at(&s, lo, 1000) <= beta_at(&s, hi, 1000));
            prop_assert!(beta_at(&s, hi, 1000) <= s.beta_max);
            prop_assert!(beta_at(&s, lo, 1000) >= 0.0);
        }

        #[test]
        fn monotone_in_raw(a in -5.0f64..0.0, b in -5.0f64..0.0, step in 1usize..=100) {
            let s = spec("table", RewardParams { table: Some(vec![a, b]), ..Default::default() });
            let (ra, rb) = (log_reward(&s, &State::Index(0), None, step, 100).unwrap(), log_reward(&s, &State::Index(1), None, step, 100).unwrap());
            if a > b { prop_assert!(ra > rb); }
        }
    }
}
