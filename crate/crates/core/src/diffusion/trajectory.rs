use serde::{Deserialize, Serialize};

/// A chain state: a point in `R^d` or an index into a finite alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Point(Vec<f64>),
    Index(usize),
}

impl State {
    pub fn as_point(&self) -> Option<&[f64]> {
        match self {
            State::Point(p) => Some(p),
            State::Index(_) => None,
        }
    }

    pub fn as_index(&self) -> Option<usize> {
        match self {
            State::Index(i) => Some(*i),
            State::Point(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            State::Point(p) => p.iter().all(|v| v.is_finite()),
            State::Index(_) => true,
        }
    }
}

/// One reverse rollout `x_T -> ... -> x_0`.
///
/// `states[k]` is `x_(T-k)`; `log_probs[k]` is `log p(x_(T-k-1) | x_(T-k))`
/// under the snapshot identified by `version`, and `predictions[k]` is the
/// data prediction made at `x_(T-k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Option<usize>,
    pub states: Vec<State>,
    pub log_probs: Vec<f64>,
    pub predictions: Vec<State>,
    /// Raw reward of each prediction; filled by [`Trajectory::set_rewards`].
    pub predicted_rewards: Vec<f64>,
    pub terminal_reward: Option<f64>,
    pub version: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.log_probs.len()
    }

    /// `x_t`.
    pub fn state_at(&self, t: usize) -> &State {
        &self.states[self.horizon() - t]
    }

    /// Cached `log p(x_(t-1) | x_t)`, `1 <= t <= T`.
    pub fn log_prob_at(&self, t: usize) -> f64 {
        self.log_probs[self.horizon() - t]
    }

    /// Cached `x_hat(x_t, t)`, `1 <= t <= T`.
    pub fn prediction_at(&self, t: usize) -> &State {
        &self.predictions[self.horizon() - t]
    }

    pub fn predicted_reward_at(&self, t: usize) -> f64 {
        self.predicted_rewards[self.horizon() - t]
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn set_rewards(&mut self, predicted: Vec<f64>, terminal: f64) {
        debug_assert_eq!(predicted.len(), self.horizon());
        self.predicted_rewards = predicted;
        self.terminal_reward = Some(terminal);
    }
}
