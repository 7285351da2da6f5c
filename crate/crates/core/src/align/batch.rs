use serde::{Deserialize, Serialize};

use super::model::AlignModel;
use crate::diffusion::{State, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rewards::RewardSpec;

/// A column of chain states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum States {
    Points(Tensor),
    Indices(Vec<usize>),
}

impl States {
    pub fn len(&self) -> usize {
        match self {
            States::Points(t) => t.rows(),
            States::Indices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_states(states: &[&State]) -> Result<Self> {
        match states.first() {
            None => Err(Error::Contract("no states".into())),
            Some(State::Index(_)) => states
                .iter()
                .map(|s| s.as_index().ok_or_else(|| Error::Contract("mixed state kinds".into())))
                .collect::<Result<_>>()
                .map(States::Indices),
            Some(State::Point(p)) => {
                let d = p.len();
                let mut data = Vec::with_capacity(d * states.len());
                for s in states {
                    let p = s.as_point().ok_or_else(|| Error::Contract("mixed state kinds".into()))?;
                    if p.len() != d {
                        return Err(Error::Contract("state widths differ".into()));
                    }
                    data.extend_from_slice(p);
                }
                Ok(States::Points(Tensor::matrix(states.len(), d, data)))
            }
        }
    }
}

/// Single transitions `(x_t -> x_(t-1))` drawn from rollouts of one policy
/// snapshot, with every gradient-free quantity precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub parents: States,
    pub children: States,
    pub steps: Vec<usize>,
    pub conds: Vec<Option<usize>>,
    /// `log p_theta_old(x_(t-1) | x_t)` recorded at rollout.
    pub logp_old: Vec<f64>,
    pub log_q: Vec<f64>,
    /// `r_raw(x_hat(x_t, t))`.
    pub r_parent: Vec<f64>,
    /// `r_raw(x_hat(x_(t-1), t-1))`, or `r_raw(x_0)` when `t = 1`.
    pub r_child: Vec<f64>,
    /// Terminal raw reward of the source trajectory.
    pub terminal_raw: Vec<f64>,
    pub traj: Vec<usize>,
    pub version: u64,
    pub beta: f64,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Collects transitions `(trajectory, t)`. Trajectories need their
    /// rewards filled in and must share one policy version.
    pub fn from_trajectories(
        model: &dyn AlignModel,
        trajs: &[Trajectory],
        picks: &[(usize, usize)],
        beta: f64,
    ) -> Result<Self> {
        if picks.is_empty() {
            return Err(Error::Contract("empty transition batch".into()));
        }
        let version = trajs[picks[0].0].version;
        let n = picks.len();
        let mut parents = Vec::with_capacity(n);
        let mut children = Vec::with_capacity(n);
        let mut b = TransitionBatch {
            parents: States::Indices(vec![]),
            children: States::Indices(vec![]),
            steps: Vec::with_capacity(n),
            conds: Vec::with_capacity(n),
            logp_old: Vec::with_capacity(n),
            log_q: Vec::new(),
            r_parent: Vec::with_capacity(n),
            r_child: Vec::with_capacity(n),
            terminal_raw: Vec::with_capacity(n),
            traj: Vec::with_capacity(n),
            version,
            beta,
        };
        for &(i, t) in picks {
            let tr = &trajs[i];
            if tr.version != version {
                return Err(Error::StaleBatch { expected: version, found: tr.version });
            }
            if t == 0 || t > tr.horizon() {
                return Err(Error::Contract(format!("step {t} outside 1..={}", tr.horizon())));
            }
            let terminal = tr
                .terminal_reward
                .ok_or_else(|| Error::Contract(format!("trajectory {i} has no terminal reward")))?;
            let has_fl = tr.predicted_rewards.len() == tr.horizon();
            parents.push(tr.state_at(t));
            children.push(tr.state_at(t - 1));
            b.steps.push(t);
            b.conds.push(tr.condition);
            b.logp_old.push(tr.log_prob_at(t));
            b.r_parent.push(if has_fl { tr.predicted_reward_at(t) } else { f64::NAN });
            b.r_child.push(match (t, has_fl) {
                (1, _) => terminal,
                (_, true) => tr.predicted_reward_at(t - 1),
                (_, false) => f64::NAN,
            });
            b.terminal_raw.push(terminal);
            b.traj.push(i);
        }
        b.parents = States::from_states(&parents)?;
        b.children = States::from_states(&children)?;
        b.log_q = model.log_q(&b.parents, &b.children, &b.steps)?;
        Ok(b)
    }

    /// Whether the forward-looking reward terms are available.
    pub fn has_fl_rewards(&self) -> bool {
        self.r_parent.iter().chain(&self.r_child).all(|v| v.is_finite())
    }

    pub fn check_version(&self, expected: u64) -> Result<()> {
        if self.version != expected {
            return Err(Error::StaleBatch { expected, found: self.version });
        }
        Ok(())
    }
}

/// Fills terminal rewards, and with `forward_looking` also the reward of
/// every cached prediction.
pub fn annotate_rewards(trajs: &mut [Trajectory], reward: &RewardSpec, forward_looking: bool) -> Result<()> {
    for tr in trajs.iter_mut() {
        let terminal = reward.reward.eval(tr.terminal(), tr.condition)?;
        let predicted = if forward_looking {
            tr.predictions.iter().map(|p| reward.reward.eval(p, tr.condition)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        tr.predicted_rewards = predicted;
        tr.terminal_reward = Some(terminal);
    }
    Ok(())
}
