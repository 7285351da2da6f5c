//! Policy/flow pairs the objectives are written against.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{States, TransitionBatch};
use crate::diffusion::{DiscreteChainSpec, GaussianChain, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ConditionedMlp, ParamSet, Tape, Tensor, Var};
use crate::rng::RolloutKey;

pub const FLOW_TABLE_PARAM: &str = "flow.logf";

/// A reverse chain with a learnable policy `theta` and log-flow `phi`.
pub trait AlignModel {
    fn horizon(&self) -> usize;

    /// Number of condition ids, if conditional.
    fn conditions(&self) -> Option<usize>;

    fn rollout(
        &self,
        theta: &ParamSet,
        conditions: &[Option<usize>],
        version: u64,
        key: RolloutKey,
    ) -> Result<Vec<Trajectory>>;

    /// `log p_theta(x_(t-1) | x_t)` per transition, `[b, 1]`.
    fn log_prob<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>>;

    /// `log F~_phi(x, t)` per row, `[b, 1]`; rows with `t = 0` are exactly 0.
    fn log_flow<'t>(&self, phi: &Bound<'t>, states: &States, steps: &[usize], conds: &[Option<usize>])
        -> Result<Var<'t>>;

    /// Mean of the reverse kernel at each parent, one row per transition.
    /// Discrete chains use the probability vector (the mean of the one-hot
    /// encoding).
    fn reverse_means<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>>;

    /// `log q(x_t | x_(t-1))` per transition.
    fn log_q(&self, parents: &States, children: &States, steps: &[usize]) -> Result<Vec<f64>>;
}

/// Zeroes the rows of `v` whose step is 0.
fn mask_terminal<'t>(tape: &'t Tape, v: Var<'t>, steps: &[usize]) -> Var<'t> {
    if steps.iter().all(|&t| t > 0) {
        return v;
    }
    let mask = Tensor::column(steps.iter().map(|&t| if t == 0 { 0.0 } else { 1.0 }).collect());
    v * tape.constant(mask)
}

/// Log-flow network `F~_phi(x_t, t, c)` with a scalar output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNet {
    pub arch: ConditionedMlp,
}

impl FlowNet {
    pub fn new(data_dim: usize, conditions: Option<usize>, hidden: &[usize]) -> Self {
        let cond = conditions.map(|n| (n, crate::diffusion::gaussian::COND_EMBED_DIM));
        FlowNet {
            arch: ConditionedMlp::new("flow", data_dim, crate::diffusion::gaussian::TIME_EMBED_DIM, cond, hidden, 1),
        }
    }

    /// Zero final layer, so `log F~ = 0` everywhere at initialisation.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        self.arch.init(rng, true)
    }
}

/// Continuous chain plus flow network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    pub chain: GaussianChain,
    pub flow: FlowNet,
}

impl ContinuousModel {
    fn points<'a>(&self, s: &'a States) -> Result<&'a Tensor> {
        match s {
            States::Points(t) if t.cols() == self.chain.data_dim() => Ok(t),
            States::Points(t) => Err(Error::Contract(format!("state width {} != {}", t.cols(), self.chain.data_dim()))),
            States::Indices(_) => Err(Error::Contract("continuous model given discrete states".into())),
        }
    }

    fn check_conds(&self, conds: &[Option<usize>]) -> Result<()> {
        for &c in conds {
            self.chain.net.arch.check_condition(c)?;
        }
        Ok(())
    }
}

impl AlignModel for ContinuousModel {
    fn horizon(&self) -> usize {
        self.chain.horizon()
    }

    fn conditions(&self) -> Option<usize> {
        self.chain.net.arch.conditions.map(|(n, _)| n)
    }

    fn rollout(
        &self,
        theta: &ParamSet,
        conditions: &[Option<usize>],
        version: u64,
        key: RolloutKey,
    ) -> Result<Vec<Trajectory>> {
        self.check_conds(conditions)?;
        self.chain.rollout(theta, conditions, version, key)
    }

    fn log_prob<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>> {
        self.check_conds(&batch.conds)?;
        self.chain.log_prob_batch(
            theta,
            self.points(&batch.parents)?,
            self.points(&batch.children)?,
            &batch.steps,
            &batch.conds,
        )
    }

    fn log_flow<'t>(
        &self,
        phi: &Bound<'t>,
        states: &States,
        steps: &[usize],
        conds: &[Option<usize>],
    ) -> Result<Var<'t>> {
        self.check_conds(conds)?;
        let x = self.points(states)?;
        if x.rows() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let tape = phi.tape();
        let out = self.flow.arch.forward(phi, tape.constant(x.clone()), steps, conds);
        Ok(mask_terminal(tape, out, steps))
    }

    fn reverse_means<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>> {
        self.check_conds(&batch.conds)?;
        self.chain.mean_batch(theta, self.points(&batch.parents)?, &batch.steps, &batch.conds)
    }

    fn log_q(&self, parents: &States, children: &States, steps: &[usize]) -> Result<Vec<f64>> {
        self.chain.log_q_batch(self.points(parents)?, self.points(children)?, steps)
    }
}

/// Discrete chain with tabular policy and tabular log-flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub spec: DiscreteChainSpec,
}

impl DiscreteModel {
    pub fn new(spec: DiscreteChainSpec) -> Self {
        DiscreteModel { spec }
    }

    /// All-zero log-flows.
    pub fn zero_flows(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(FLOW_TABLE_PARAM, Tensor::zeros(&[self.spec.horizon() * self.spec.states(), 1]));
        p
    }

    /// Log-flows from a table `[t][x]` for `t = 1..=T` (row 0 is ignored).
    pub fn flows_from_table(&self, log_flows: &[Vec<f64>]) -> Result<ParamSet> {
        let (s, h) = (self.spec.states(), self.spec.horizon());
        if log_flows.len() != h + 1 || log_flows.iter().any(|r| r.len() != s) {
            return Err(Error::Contract("flow table must be (T+1) x S".into()));
        }
        let data = log_flows[1..].iter().flatten().copied().collect();
        let mut p = ParamSet::new();
        p.insert(FLOW_TABLE_PARAM, Tensor::matrix(h * s, 1, data));
        Ok(p)
    }

    fn indices<'a>(&self, s: &'a States) -> Result<&'a [usize]> {
        match s {
            States::Indices(v) => {
                for &x in v {
                    self.spec.check_state(x)?;
                }
                Ok(v)
            }
            States::Points(_) => Err(Error::Contract("discrete model given continuous states".into())),
        }
    }

    fn no_conds(&self, conds: &[Option<usize>]) -> Result<()> {
        if conds.iter().any(Option::is_some) {
            return Err(Error::Contract("discrete chains are unconditional".into()));
        }
        Ok(())
    }
}

impl AlignModel for DiscreteModel {
    fn horizon(&self) -> usize {
        self.spec.horizon()
    }

    fn conditions(&self) -> Option<usize> {
        None
    }

    fn rollout(
        &self,
        theta: &ParamSet,
        conditions: &[Option<usize>],
        version: u64,
        key: RolloutKey,
    ) -> Result<Vec<Trajectory>> {
        self.no_conds(conditions)?;
        self.spec.rollout(theta, conditions.len(), version, key)
    }

    fn log_prob<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>> {
        self.no_conds(&batch.conds)?;
        self.spec.log_prob_batch(theta, self.indices(&batch.parents)?, self.indices(&batch.children)?, &batch.steps)
    }

    fn log_flow<'t>(
        &self,
        phi: &Bound<'t>,
        states: &States,
        steps: &[usize],
        conds: &[Option<usize>],
    ) -> Result<Var<'t>> {
        self.no_conds(conds)?;
        let xs = self.indices(states)?;
        if xs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(xs.len());
        for (&x, &t) in xs.iter().zip(steps) {
            if t > self.spec.horizon() {
                return Err(Error::Contract(format!("step {t} beyond horizon")));
            }
            rows.push(if t == 0 { 0 } else { self.spec.policy_row(t, x) });
        }
        let out = phi.get(FLOW_TABLE_PARAM).gather_rows(&rows);
        Ok(mask_terminal(phi.tape(), out, steps))
    }

    fn reverse_means<'t>(&self, theta: &Bound<'t>, batch: &TransitionBatch) -> Result<Var<'t>> {
        let parents = self.indices(&batch.parents)?;
        let mut rows = Vec::with_capacity(parents.len());
        for (&x, &t) in parents.iter().zip(&batch.steps) {
            self.spec.check_step(t)?;
            rows.push(self.spec.policy_row(t, x));
        }
        Ok(theta.get(crate::diffusion::POLICY_PARAM).gather_rows(&rows).log_softmax().exp())
    }

    fn log_q(&self, parents: &States, children: &States, steps: &[usize]) -> Result<Vec<f64>> {
        let (p, c) = (self.indices(parents)?, self.indices(children)?);
        let mut out = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            self.spec.check_step(steps[i])?;
            out.push(self.spec.log_q(steps[i], p[i], c[i]));
        }
        Ok(out)
    }
}
