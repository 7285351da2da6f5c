use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Default::default() }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moments and step counter of AdamW for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        OptimizerState { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One AdamW update (decoupled weight decay, bias-corrected moments).
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimizerState,
) -> Result<(), NumericsError> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    let c = state.config;
    if c.lr <= 0.0 {
        return Err(NumericsError::Contract(format!("learning rate must be positive, got {}", c.lr)));
    }
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("aligned");
        let m = state.m.get_mut(name).expect("aligned");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        }
        let m = state.m.get(name).expect("aligned");
        let v = state.v.get_mut(name).expect("aligned");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        }
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pi);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = scalar_set(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_set(0.0), &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(st.m.get("w").unwrap().item(), 0.0);
        assert_eq!(st.v.get("w").unwrap().item(), 0.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut p = scalar_set(0.0);
        let cfg = AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_set(1.0), &mut st).unwrap();
        let delta = p.get("w").unwrap().item();
        // m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta - (-9.99999995e-4)).abs() < 1e-11);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = scalar_set(2.0);
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.01, ..Default::default() };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_set(0.0), &mut st).unwrap();
        assert!((p.get("w").unwrap().item() - 2.0 * (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_set(1.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(&[2]));
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        assert!(matches!(adamw_step(&mut p, &g, &mut st), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::scalar(3.0));
        g.insert("b", Tensor::scalar(4.0));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.get("a").unwrap().item() - 0.6).abs() < 1e-15);
        assert!((g.get("b").unwrap().item() - 0.8).abs() < 1e-15);

        let mut g = scalar_set(0.5);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.get("w").unwrap().item(), 0.5);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_min_of_norm_and_cap(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            b in prop::collection::vec(-10.0f64..10.0, 1..20),
            cap in 0.01f64..20.0,
        ) {
            let mut g = ParamSet::new();
            g.insert("a", Tensor::new(vec![a.len()], a).unwrap());
            g.insert("b", Tensor::new(vec![b.len()], b).unwrap());
            let before = g.global_norm();
            clip_global_norm(&mut g, cap);
            prop_assert!((g.global_norm() - before.min(cap)).abs() <= 1e-12);
        }
    }
}
