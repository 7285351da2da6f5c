//! Models, datasets and initial parameters built from a task section.

use crate::align::{AlignModel, ContinuousModel, DiscreteModel, FlowNet};
use crate::diffusion::{eight_gaussians, load_dataset, make_schedule, DataPredictionNet, Dataset, DiscreteChainSpec, GaussianChain};
use crate::error::{Error, Result};
use crate::numerics::ParamSet;
use crate::rng::{stream_rng, Stream};

use super::config::{TaskKind, TaskSection, EIGHT_GAUSSIANS};

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Continuous(ContinuousModel),
    Discrete(DiscreteModel),
}

impl Task {
    pub fn build(t: &TaskSection) -> Result<Task> {
        match t.kind {
            TaskKind::Continuous => {
                let chain = GaussianChain {
                    schedule: make_schedule(t.schedule, t.horizon())?,
                    net: DataPredictionNet::new(t.dim, t.conditions, &t.hidden),
                };
                let flow = FlowNet::new(t.dim, t.conditions, &t.hidden);
                Ok(Task::Continuous(ContinuousModel { chain, flow }))
            }
            TaskKind::Discrete => {
                Ok(Task::Discrete(DiscreteModel::new(DiscreteChainSpec::lazy_uniform(t.states, t.horizon(), t.stay)?)))
            }
        }
    }

    pub fn model(&self) -> &dyn AlignModel {
        match self {
            Task::Continuous(m) => m,
            Task::Discrete(m) => m,
        }
    }

    /// Fresh `(theta, phi)`: random denoiser and zero-output flow network for
    /// continuous chains, uniform policy and zero log-flows for discrete ones.
    pub fn init_params(&self, seed: u64) -> (ParamSet, ParamSet) {
        match self {
            Task::Continuous(m) => (
                m.chain.net.init(&mut stream_rng(seed, Stream::Init, &[0])),
                m.flow.init(&mut stream_rng(seed, Stream::Init, &[1])),
            ),
            Task::Discrete(m) => (m.spec.uniform_policy(), m.zero_flows()),
        }
    }

    /// Checks that `theta` has exactly the policy's parameter shapes.
    pub fn check_theta(&self, theta: &ParamSet) -> Result<()> {
        let (template, _) = self.init_params(0);
        template.check_aligned(theta).map_err(|e| Error::Compatibility(format!("policy parameters: {e}")))
    }

    pub fn describe(&self) -> String {
        match self {
            Task::Continuous(m) => serde_json::to_string(m),
            Task::Discrete(m) => serde_json::to_string(m),
        }
        .expect("model serializes")
    }
}

/// Pretraining data for a continuous task.
pub fn task_dataset(t: &TaskSection, seed: u64) -> Result<Dataset> {
    if t.dataset == EIGHT_GAUSSIANS {
        let mut rng = stream_rng(seed, Stream::Data, &[]);
        return Ok(eight_gaussians(t.dataset_size, t.conditions.is_some(), &mut rng));
    }
    let data = load_dataset(std::path::Path::new(&t.dataset), t.dim)?;
    let labelled = data.conditions.iter().any(Option::is_some);
    if labelled != t.conditions.is_some() {
        return Err(Error::Config(format!(
            "dataset {} {} a condition column but task.conditions is {:?}",
            t.dataset,
            if labelled { "has" } else { "lacks" },
            t.conditions
        )));
    }
    if let Some(k) = t.conditions {
        if let Some(c) = data.conditions.iter().flatten().find(|&&c| c >= k) {
            return Err(Error::Config(format!("dataset condition {c} outside 0..{k}")));
        }
    }
    Ok(data)
}
