//! Detailed-balance residuals and the three training objectives.

use std::collections::BTreeMap;

use super::batch::TransitionBatch;
use super::model::AlignModel;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};

/// Learnable quantities of one batch, evaluated once per tape.
pub struct Terms<'t> {
    /// `log p_theta(x_(t-1) | x_t)`.
    pub logp: Var<'t>,
    /// `log F~_phi(x_t, t)`.
    pub lf_parent: Var<'t>,
    /// `log F~_phi(x_(t-1), t-1)`, exactly 0 when `t = 1`.
    pub lf_child: Var<'t>,
}

impl<'t> Terms<'t> {
    pub fn new(model: &dyn AlignModel, batch: &TransitionBatch, theta: &Bound<'t>, phi: &Bound<'t>) -> Result<Self> {
        let child_steps: Vec<usize> = batch.steps.iter().map(|t| t - 1).collect();
        Ok(Terms {
            logp: model.log_prob(theta, batch)?,
            lf_parent: model.log_flow(phi, &batch.parents, &batch.steps, &batch.conds)?,
            lf_child: model.log_flow(phi, &batch.children, &child_steps, &batch.conds)?,
        })
    }

    /// Plain detailed-balance residual with `log F(x_0, 0) = beta r_raw(x_0)`.
    pub fn db_residual(&self, batch: &TransitionBatch) -> Var<'t> {
        let tape = self.logp.tape();
        let anchor: Vec<f64> = batch
            .steps
            .iter()
            .zip(&batch.terminal_raw)
            .map(|(&t, r)| if t == 1 { batch.beta * r } else { 0.0 })
            .collect();
        let offset = Tensor::column(anchor.iter().zip(&batch.log_q).map(|(a, q)| -a - q).collect());
        self.lf_parent + self.logp - self.lf_child + tape.constant(offset)
    }

    /// Forward-looking residual: rewards of the cached predictions enter as
    /// constants.
    pub fn fl_residual(&self, batch: &TransitionBatch) -> Result<Var<'t>> {
        if !batch.has_fl_rewards() {
            return Err(Error::Contract("batch lacks forward-looking rewards".into()));
        }
        let tape = self.logp.tape();
        let offset: Vec<f64> = (0..batch.len())
            .map(|i| {
                let shaping = if batch.beta == 0.0 { 0.0 } else { batch.beta * (batch.r_parent[i] - batch.r_child[i]) };
                shaping - batch.log_q[i]
            })
            .collect();
        Ok(self.lf_parent + self.logp - self.lf_child + tape.constant(Tensor::column(offset)))
    }
}

/// Per-transition DB residual `delta`, `[b, 1]`.
pub fn db_residual<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
) -> Result<Var<'t>> {
    Ok(Terms::new(model, batch, theta, phi)?.db_residual(batch))
}

/// Per-transition forward-looking residual `delta_FL`, `[b, 1]`.
pub fn fl_db_residual<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
) -> Result<Var<'t>> {
    Terms::new(model, batch, theta, phi)?.fl_residual(batch)
}

/// `mean(delta_FL^2)`.
pub fn fl_db_loss<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
) -> Result<Var<'t>> {
    Ok(fl_db_residual(model, batch, theta, phi)?.square().mean())
}

/// `b = stop_gradient(delta_FL)`.
pub fn advantage_b<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
) -> Result<Var<'t>> {
    Ok(fl_db_residual(model, batch, theta, phi)?.stop_gradient())
}

/// `factor * mean(b * clip(p_theta / p_theta_old, 1 - eps, 1 + eps))`.
pub fn kl_policy_loss_from<'t>(terms: &Terms<'t>, batch: &TransitionBatch, eps: f64, factor: f64) -> Result<Var<'t>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("clip epsilon must be positive, got {eps}")));
    }
    let tape = terms.logp.tape();
    let b = terms.fl_residual(batch)?.stop_gradient();
    let ratio = (terms.logp - tape.constant(Tensor::column(batch.logp_old.clone()))).exp();
    Ok((b * ratio.clamp(1.0 - eps, 1.0 + eps)).mean().scale(factor))
}

pub fn dag_kl_policy_loss<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
    eps: f64,
    factor: f64,
) -> Result<Var<'t>> {
    kl_policy_loss_from(&Terms::new(model, batch, theta, phi)?, batch, eps, factor)
}

/// `coef * mean ||mean_theta(x_t, t) - mean_theta_old(x_t, t)||^2`.
pub fn kl_regularizer<'t>(
    model: &dyn AlignModel,
    batch: &TransitionBatch,
    theta: &Bound<'t>,
    theta_old: &ParamSet,
    coef: f64,
) -> Result<Var<'t>> {
    let old = {
        let tape = Tape::new();
        let bound = tape.bind(theta_old, false);
        let m = model.reverse_means(&bound, batch)?;
        tape.check_finite()?;
        m.value()
    };
    let now = model.reverse_means(theta, batch)?;
    Ok((now - theta.tape().constant(old)).square().sum_cols().mean().scale(coef))
}

/// `beta * r_raw` whitened within each condition group:
/// `(v - mean) / (std + 1e-8)` with the population standard deviation.
pub fn ddpo_advantages(batch: &TransitionBatch) -> Result<Vec<f64>> {
    if batch.len() < 2 {
        return Err(Error::Contract("advantage whitening needs at least two transitions".into()));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, c) in batch.conds.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let mut adv = vec![0.0; batch.len()];
    for idx in groups.values() {
        let vals: Vec<f64> = idx.iter().map(|&i| batch.beta * batch.terminal_raw[i]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (&i, v) in idx.iter().zip(&vals) {
            adv[i] = (v - mean) / (std + 1e-8);
        }
    }
    Ok(adv)
}

/// `-mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A))`.
pub fn ddpo_loss_from<'t>(logp: Var<'t>, batch: &TransitionBatch, eps: f64) -> Result<Var<'t>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("clip epsilon must be positive, got {eps}")));
    }
    let tape = logp.tape();
    let adv = tape.constant(Tensor::column(ddpo_advantages(batch)?));
    let ratio = (logp - tape.constant(Tensor::column(batch.logp_old.clone()))).exp();
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    Ok(-unclipped.minimum(clipped).mean())
}

pub fn ddpo_loss<'t>(model: &dyn AlignModel, batch: &TransitionBatch, theta: &Bound<'t>, eps: f64) -> Result<Var<'t>> {
    ddpo_loss_from(model.log_prob(theta, batch)?, batch, eps)
}
