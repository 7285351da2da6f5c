//! Small finite-state chains with tabular reverse policies. These admit
//! exact enumeration and back the oracle checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::{State, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::oracle::logsumexp;
use crate::rng::RolloutKey;

pub const POLICY_PARAM: &str = "policy.logits";

const ROW_TOL: f64 = 1e-12;

/// Forward kernels `Q_t[x_(t-1)][x_t] = q(x_t | x_(t-1))` and a source
/// distribution over `x_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChainSpec {
    states: usize,
    kernels: Vec<Vec<f64>>,
    source: Vec<f64>,
}

impl DiscreteChainSpec {
    /// `kernels[t-1]` is `Q_t`, row-major `S x S`.
    pub fn new(states: usize, kernels: Vec<Vec<f64>>, source: Vec<f64>) -> Result<Self> {
        if states == 0 || kernels.is_empty() {
            return Err(Error::Contract("discrete chain needs S >= 1 and T >= 1".into()));
        }
        for (k, q) in kernels.iter().enumerate() {
            if q.len() != states * states {
                return Err(Error::Contract(format!("Q_{} has {} entries, want {}", k + 1, q.len(), states * states)));
            }
            for r in 0..states {
                let row = &q[r * states..(r + 1) * states];
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::Contract(format!("Q_{} row {r} has a negative or non-finite entry", k + 1)));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_TOL {
                    return Err(Error::Contract(format!("Q_{} row {r} sums to {s}", k + 1)));
                }
            }
        }
        if source.len() != states || source.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Contract("source must be a distribution over S states".into()));
        }
        let s: f64 = source.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(Error::Contract(format!("source sums to {s}")));
        }
        Ok(DiscreteChainSpec { states, kernels, source })
    }

    /// Stay with probability `stay`, otherwise jump uniformly over all states.
    pub fn lazy_uniform(states: usize, horizon: usize, stay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&stay) {
            return Err(Error::Contract(format!("stay probability {stay} outside [0, 1]")));
        }
        let jump = (1.0 - stay) / states as f64;
        let mut q = vec![jump; states * states];
        for i in 0..states {
            q[i * states + i] += stay;
        }
        Self::new(states, vec![q; horizon], vec![1.0 / states as f64; states])
    }

    /// Same kernels, different source.
    pub fn with_source(&self, source: Vec<f64>) -> Result<Self> {
        Self::new(self.states, self.kernels.clone(), source)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn horizon(&self) -> usize {
        self.kernels.len()
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    /// `q(x_t | x_(t-1))`.
    pub fn q(&self, t: usize, x_t: usize, x_prev: usize) -> f64 {
        self.kernels[t - 1][x_prev * self.states + x_t]
    }

    pub fn log_q(&self, t: usize, x_t: usize, x_prev: usize) -> f64 {
        self.q(t, x_t, x_prev).ln()
    }

    pub fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.states {
            return Err(Error::Contract(format!("state {x} outside 0..{}", self.states)));
        }
        Ok(())
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", self.horizon())));
        }
        Ok(())
    }

    /// Row of the policy table for `(t, x_t)`.
    pub fn policy_row(&self, t: usize, x_t: usize) -> usize {
        (t - 1) * self.states + x_t
    }

    /// Uniform logits: every reverse step picks `x_(t-1)` uniformly.
    pub fn uniform_policy(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(POLICY_PARAM, Tensor::zeros(&[self.horizon() * self.states, self.states]));
        p
    }

    /// Logits equal to the given log-probability tables `[t-1][x_t][x_(t-1)]`.
    pub fn policy_from_log_tables(&self, tables: &[Vec<Vec<f64>>]) -> Result<ParamSet> {
        if tables.len() != self.horizon() {
            return Err(Error::Contract("one table per step required".into()));
        }
        let mut d = Vec::with_capacity(self.horizon() * self.states * self.states);
        for table in tables {
            if table.len() != self.states || table.iter().any(|r| r.len() != self.states) {
                return Err(Error::Contract("policy table must be S x S".into()));
            }
            for row in table {
                // very negative stands in for log 0 so logits stay finite
                d.extend(row.iter().map(|v| v.max(-1e4)));
            }
        }
        let mut p = ParamSet::new();
        p.insert(POLICY_PARAM, Tensor::matrix(self.horizon() * self.states, self.states, d));
        Ok(p)
    }

    fn logits<'a>(&self, theta: &'a ParamSet) -> Result<&'a Tensor> {
        let l = theta
            .get(POLICY_PARAM)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{POLICY_PARAM}`")))?;
        if l.shape() != [self.horizon() * self.states, self.states] {
            return Err(Error::Contract(format!("policy logits have shape {:?}", l.shape())));
        }
        Ok(l)
    }

    /// `log p_theta(. | x_t)` at step `t` as a vector over `x_(t-1)`.
    pub fn reverse_log_probs(&self, theta: &ParamSet, t: usize, x_t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        self.check_state(x_t)?;
        let row = self.logits(theta)?.row(self.policy_row(t, x_t));
        let lse = logsumexp(row);
        Ok(row.iter().map(|v| v - lse).collect())
    }

    /// Reverse policy probability tables `[t-1][x_t][x_(t-1)]`.
    pub fn policy_tables(&self, theta: &ParamSet) -> Result<Vec<Vec<Vec<f64>>>> {
        (1..=self.horizon())
            .map(|t| {
                (0..self.states)
                    .map(|x| Ok(self.reverse_log_probs(theta, t, x)?.into_iter().map(f64::exp).collect()))
                    .collect()
            })
            .collect()
    }

    /// `log p_theta(child | parent)` per row, `[b, 1]`.
    pub fn log_prob_batch<'t>(
        &self,
        theta: &Bound<'t>,
        parents: &[usize],
        children: &[usize],
        steps: &[usize],
    ) -> Result<Var<'t>> {
        if parents.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(parents.len());
        for ((&p, &c), &t) in parents.iter().zip(children).zip(steps) {
            self.check_step(t)?;
            self.check_state(p)?;
            self.check_state(c)?;
            rows.push(self.policy_row(t, p));
        }
        Ok(theta.get(POLICY_PARAM).gather_rows(&rows).log_softmax().pick_cols(children))
    }

    /// `n` rollouts from the source.
    pub fn rollout(&self, theta: &ParamSet, n: usize, version: u64, key: RolloutKey) -> Result<Vec<Trajectory>> {
        if n == 0 {
            return Err(Error::Contract("rollout needs at least one trajectory".into()));
        }
        let tables = self.policy_tables(theta)?;
        let horizon = self.horizon();
        (0..n)
            .map(|i| {
                let mut rng = key.trajectory_rng(i);
                let mut x = sample_categorical(&self.source, &mut rng);
                let mut states = vec![State::Index(x)];
                let mut log_probs = Vec::with_capacity(horizon);
                let mut predictions = Vec::with_capacity(horizon);
                for t in (1..=horizon).rev() {
                    let probs = &tables[t - 1][x];
                    let next = sample_categorical(probs, &mut rng);
                    log_probs.push(probs[next].ln());
                    predictions.push(State::Index(x));
                    x = next;
                    states.push(State::Index(x));
                }
                if log_probs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::RolloutDivergence { trajectory: i, prefix: states });
                }
                Ok(Trajectory {
                    condition: None,
                    states,
                    log_probs,
                    predictions,
                    predicted_rewards: Vec::new(),
                    terminal_reward: None,
                    version,
                })
            })
            .collect()
    }
}

/// `log p_theta(x_(t-1) | x_t)` under the tabular policy.
pub fn discrete_reverse_logpmf(
    spec: &DiscreteChainSpec,
    theta: &ParamSet,
    x_t: usize,
    x_prev: usize,
    t: usize,
) -> Result<f64> {
    spec.check_state(x_prev)?;
    Ok(spec.reverse_log_probs(theta, t, x_t)?[x_prev])
}

/// Inverse-CDF draw; the last index absorbs rounding.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Evaluates `log p_theta` rows on a fresh tape; test and oracle helper.
pub fn log_prob_values(spec: &DiscreteChainSpec, theta: &ParamSet, parents: &[usize], children: &[usize], steps: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = tape.bind(theta, false);
    let v = spec.log_prob_batch(&bound, parents, children, steps)?;
    Ok(v.value().into_data())
}
