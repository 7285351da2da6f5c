use serde::{Deserialize, Serialize};

use super::logsumexp;
use crate::diffusion::DiscreteChainSpec;
use crate::error::{Error, Result};

pub const MAX_STATES: usize = 64;
pub const MAX_HORIZON: usize = 12;

const ROW_TOL: f64 = 1e-9;

/// Optimal flows and policy of a discrete chain for a given reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    /// `log F(x, t)`, indexed `[t][x]` for `t = 0..=T`.
    pub log_flows: Vec<Vec<f64>>,
    /// `log p*(x_(t-1) | x_t)`, indexed `[t-1][x_t][x_(t-1)]`.
    pub log_policy: Vec<Vec<Vec<f64>>>,
    pub log_z: f64,
    /// Terminal distribution of `p*` from the chain's own source.
    pub terminal: Vec<f64>,
    /// `TV(terminal, R/Z)`.
    pub floor: f64,
}

impl ExactSolution {
    pub fn policy_tables(&self) -> Vec<Vec<Vec<f64>>> {
        self.log_policy.iter().map(|t| t.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect()).collect()
    }
}

pub fn check_size(spec: &DiscreteChainSpec) -> Result<()> {
    if spec.states() > MAX_STATES || spec.horizon() > MAX_HORIZON {
        return Err(Error::Contract(format!(
            "chain S={} T={} exceeds the enumeration limit S<={MAX_STATES} T<={MAX_HORIZON}",
            spec.states(),
            spec.horizon()
        )));
    }
    Ok(())
}

/// Flows for a linear-domain reward table; every entry must be positive.
pub fn exact_flows(spec: &DiscreteChainSpec, rewards: &[f64]) -> Result<ExactSolution> {
    if let Some(r) = rewards.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Contract(format!("rewards must be positive and finite, got {r}")));
    }
    let log_r: Vec<f64> = rewards.iter().map(|r| r.ln()).collect();
    exact_flows_log(spec, &log_r)
}

/// Recursion `F(x, t) = sum_y F(y, t-1) q(x | y)` upward from `F(., 0) = R`, in
/// the log domain.
pub fn exact_flows_log(spec: &DiscreteChainSpec, log_rewards: &[f64]) -> Result<ExactSolution> {
    check_size(spec)?;
    let s = spec.states();
    if log_rewards.len() != s || log_rewards.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("need one finite log-reward per state".into()));
    }
    let mut log_flows = vec![log_rewards.to_vec()];
    let mut log_policy = Vec::with_capacity(spec.horizon());
    for t in 1..=spec.horizon() {
        let prev = &log_flows[t - 1];
        let mut flows = Vec::with_capacity(s);
        let mut table = Vec::with_capacity(s);
        for x in 0..s {
            let terms: Vec<f64> = (0..s).map(|y| prev[y] + spec.log_q(t, x, y)).collect();
            let f = logsumexp(&terms);
            let row = if f == f64::NEG_INFINITY {
                // unreachable state: any policy row is consistent
                vec![-(s as f64).ln(); s]
            } else {
                terms.iter().map(|v| v - f).collect()
            };
            flows.push(f);
            table.push(row);
        }
        log_flows.push(flows);
        log_policy.push(table);
    }
    let log_z = logsumexp(log_rewards);
    let mut sol = ExactSolution { log_flows, log_policy, log_z, terminal: Vec::new(), floor: 0.0 };
    sol.terminal = terminal_distribution(spec, &sol.policy_tables())?;
    sol.floor = total_variation(&sol.terminal, &target_distribution(log_rewards));
    Ok(sol)
}

/// Marginal of `x_0` when rolling the tables out from the chain's source.
pub fn terminal_distribution(spec: &DiscreteChainSpec, tables: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    check_size(spec)?;
    let s = spec.states();
    if tables.len() != spec.horizon() {
        return Err(Error::Contract("one policy table per step required".into()));
    }
    for (k, table) in tables.iter().enumerate() {
        if table.len() != s {
            return Err(Error::Contract("policy table must be S x S".into()));
        }
        for (x, row) in table.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != s || row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > ROW_TOL {
                return Err(Error::Contract(format!("policy row (t={}, x={x}) is not a distribution", k + 1)));
            }
        }
    }
    let mut p = spec.source().to_vec();
    for t in (1..=spec.horizon()).rev() {
        let mut next = vec![0.0; s];
        for (x, px) in p.iter().enumerate() {
            for (y, q) in tables[t - 1][x].iter().enumerate() {
                next[y] += px * q;
            }
        }
        p = next;
    }
    Ok(p)
}

/// `R / Z` from log-rewards.
pub fn target_distribution(log_rewards: &[f64]) -> Vec<f64> {
    let z = logsumexp(log_rewards);
    log_rewards.iter().map(|r| (r - z).exp()).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)`; `+inf` if `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| if *b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

/// Irreducible `TV(P_T(p*), R/Z)` imposed by the fixed source.
pub fn optimal_floor(spec: &DiscreteChainSpec, log_rewards: &[f64]) -> Result<f64> {
    Ok(exact_flows_log(spec, log_rewards)?.floor)
}

/// Largest `|log F(x_t) + log p(x_(t-1)|x_t) - log F(x_(t-1)) - log q(x_t|x_(t-1))|`
/// over all pairs with `q > 0`.
pub fn db_identity_residual(spec: &DiscreteChainSpec, log_flows: &[Vec<f64>], log_policy: &[Vec<Vec<f64>>]) -> f64 {
    let s = spec.states();
    let mut worst: f64 = 0.0;
    for t in 1..=spec.horizon() {
        for x in 0..s {
            for y in 0..s {
                let lq = spec.log_q(t, x, y);
                if lq == f64::NEG_INFINITY {
                    continue;
                }
                let r = log_flows[t][x] + log_policy[t - 1][x][y] - log_flows[t - 1][y] - lq;
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}
