//! Continuous chains: Gaussian reverse kernels driven by a data-prediction
//! network.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian_logpdf, NoiseSchedule};
use super::trajectory::{State, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ConditionedMlp, ParamSet, Tape, Tensor, Var};
use crate::rng::RolloutKey;

pub const TIME_EMBED_DIM: usize = 16;
pub const COND_EMBED_DIM: usize = 8;

/// `x_hat_theta(x_t, t, c)`: predicts the clean sample from a noisy one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPredictionNet {
    pub arch: ConditionedMlp,
}

impl DataPredictionNet {
    pub fn new(data_dim: usize, conditions: Option<usize>, hidden: &[usize]) -> Self {
        let cond = conditions.map(|n| (n, COND_EMBED_DIM));
        DataPredictionNet { arch: ConditionedMlp::new("xhat", data_dim, TIME_EMBED_DIM, cond, hidden, data_dim) }
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn init(&self, rng: &mut rand_chacha::ChaCha8Rng) -> ParamSet {
        self.arch.init(rng, false)
    }

    /// All-zero parameters: predicts `x_hat = 0` everywhere.
    pub fn zeros(&self) -> ParamSet {
        self.arch.zeros()
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, steps: &[usize], conds: &[Option<usize>]) -> Var<'t> {
        self.arch.forward(bound, x, steps, conds)
    }

    pub fn predict(&self, params: &ParamSet, x: &Tensor, steps: &[usize], conds: &[Option<usize>]) -> Result<Tensor> {
        if x.cols() != self.data_dim() {
            return Err(Error::Contract(format!("state width {} != data dim {}", x.cols(), self.data_dim())));
        }
        for c in conds {
            self.arch.check_condition(*c)?;
        }
        let tape = Tape::new();
        let bound = tape.bind(params, false);
        let out = self.forward(&bound, tape.constant(x.clone()), steps, conds);
        tape.check_finite()?;
        Ok(out.value())
    }
}

/// Reverse kernel `p_theta(x_(t-1) | x_t)`: returns `(mean, variance)`.
pub fn p_theta_params(
    schedule: &NoiseSchedule,
    net: &DataPredictionNet,
    params: &ParamSet,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
) -> Result<(Vec<f64>, f64)> {
    let var = schedule.kernel_variance(t)?;
    let (a, k) = schedule.reverse_mean_coeffs(t)?;
    let xhat = net.predict(params, &Tensor::matrix(1, x_t.len(), x_t.to_vec()), &[t], &[c])?;
    let mean = x_t.iter().zip(xhat.data()).map(|(x, h)| a * x + k * h).collect();
    Ok((mean, var))
}

pub fn p_theta_logpdf(
    schedule: &NoiseSchedule,
    net: &DataPredictionNet,
    params: &ParamSet,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
    x_prev: &[f64],
) -> Result<f64> {
    let (mean, var) = p_theta_params(schedule, net, params, x_t, t, c)?;
    Ok(gaussian_logpdf(x_prev, &mean, var))
}

/// Reparameterised draw `mean + sqrt(var) * eps` for given noise.
pub fn p_theta_reparam(
    schedule: &NoiseSchedule,
    net: &DataPredictionNet,
    params: &ParamSet,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let (mean, var) = p_theta_params(schedule, net, params, x_t, t, c)?;
    let sd = var.sqrt();
    Ok(mean.iter().zip(eps).map(|(m, e)| m + sd * e).collect())
}

pub fn p_theta_sample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    net: &DataPredictionNet,
    params: &ParamSet,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
    p_theta_reparam(schedule, net, params, x_t, t, c, &eps)
}

/// Continuous reverse chain of a fixed schedule and denoiser architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianChain {
    pub schedule: NoiseSchedule,
    pub net: DataPredictionNet,
}

impl GaussianChain {
    pub fn horizon(&self) -> usize {
        self.schedule.horizon()
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    fn coeff_columns(&self, steps: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let mut a = Vec::with_capacity(steps.len());
        let mut k = Vec::with_capacity(steps.len());
        let mut v = Vec::with_capacity(steps.len());
        for &t in steps {
            let (ai, ki) = self.schedule.reverse_mean_coeffs(t)?;
            a.push(ai);
            k.push(ki);
            v.push(self.schedule.kernel_variance(t)?);
        }
        Ok((Tensor::column(a), Tensor::column(k), Tensor::column(v)))
    }

    /// Reverse means `[b, d]` at `(parents, steps)` on the tape.
    pub fn mean_batch<'t>(
        &self,
        theta: &Bound<'t>,
        parents: &Tensor,
        steps: &[usize],
        conds: &[Option<usize>],
    ) -> Result<Var<'t>> {
        let tape = theta_tape(theta, parents)?;
        let (a, k, _) = self.coeff_columns(steps)?;
        let x = tape.constant(parents.clone());
        let xhat = self.net.forward(theta, x, steps, conds);
        Ok(x * tape.constant(a) + xhat * tape.constant(k))
    }

    /// Reverse means from cached predictions, no network evaluation.
    pub fn mean_from_prediction(&self, parents: &Tensor, predictions: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let (a, k, _) = self.coeff_columns(steps)?;
        let d = parents.cols();
        let mut out = Vec::with_capacity(parents.len());
        for i in 0..parents.rows() {
            for j in 0..d {
                out.push(a.data()[i] * parents.get(i, j) + k.data()[i] * predictions.get(i, j));
            }
        }
        Ok(Tensor::matrix(parents.rows(), d, out))
    }

    /// `log p_theta(child | parent)` per row, `[b, 1]`.
    pub fn log_prob_batch<'t>(
        &self,
        theta: &Bound<'t>,
        parents: &Tensor,
        children: &Tensor,
        steps: &[usize],
        conds: &[Option<usize>],
    ) -> Result<Var<'t>> {
        let tape = theta_tape(theta, parents)?;
        let mean = self.mean_batch(theta, parents, steps, conds)?;
        let (_, _, var) = self.coeff_columns(steps)?;
        let d = self.data_dim() as f64;
        let norm = Tensor::column(
            var.data().iter().map(|v| -0.5 * d * (2.0 * std::f64::consts::PI * v).ln()).collect(),
        );
        let half_prec = Tensor::column(var.data().iter().map(|v| -0.5 / v).collect());
        let sq = (tape.constant(children.clone()) - mean).square().sum_cols();
        Ok(sq * tape.constant(half_prec) + tape.constant(norm))
    }

    /// `log q(x_t | x_(t-1))` per transition.
    pub fn log_q_batch(&self, parents: &Tensor, children: &Tensor, steps: &[usize]) -> Result<Vec<f64>> {
        (0..parents.rows())
            .map(|i| super::schedule::q_transition_logpdf(&self.schedule, parents.row(i), children.row(i), steps[i]))
            .collect()
    }

    /// One reverse rollout per entry of `conditions`, from `x_T ~ N(0, I)`.
    pub fn rollout(
        &self,
        theta: &ParamSet,
        conditions: &[Option<usize>],
        version: u64,
        key: RolloutKey,
    ) -> Result<Vec<Trajectory>> {
        let n = conditions.len();
        if n == 0 {
            return Err(Error::Contract("rollout needs at least one trajectory".into()));
        }
        let d = self.data_dim();
        let horizon = self.horizon();
        let mut rngs: Vec<_> = (0..n).map(|i| key.trajectory_rng(i)).collect();
        let mut x: Vec<f64> = Vec::with_capacity(n * d);
        for r in rngs.iter_mut() {
            for _ in 0..d {
                x.push(r.sample::<f64, _>(StandardNormal));
            }
        }
        let mut trajs: Vec<Trajectory> = (0..n)
            .map(|i| Trajectory {
                condition: conditions[i],
                states: vec![State::Point(x[i * d..(i + 1) * d].to_vec())],
                log_probs: Vec::with_capacity(horizon),
                predictions: Vec::with_capacity(horizon),
                predicted_rewards: Vec::new(),
                terminal_reward: None,
                version,
            })
            .collect();
        for t in (1..=horizon).rev() {
            let xt = Tensor::matrix(n, d, x.clone());
            let steps = vec![t; n];
            let xhat = self.net.predict(theta, &xt, &steps, conditions)?;
            let (a, k) = self.schedule.reverse_mean_coeffs(t)?;
            let var = self.schedule.kernel_variance(t)?;
            let sd = var.sqrt();
            let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
            for i in 0..n {
                let mut sq = 0.0;
                let mut next = Vec::with_capacity(d);
                for j in 0..d {
                    let mean = a * x[i * d + j] + k * xhat.get(i, j);
                    let e: f64 = rngs[i].sample(StandardNormal);
                    let v = mean + sd * e;
                    sq += (v - mean) * (v - mean);
                    next.push(v);
                }
                let lp = -0.5 * sq / var + norm;
                let traj = &mut trajs[i];
                traj.predictions.push(State::Point(xhat.row(i).to_vec()));
                let state = State::Point(next.clone());
                if !state.is_finite() || !lp.is_finite() {
                    let mut prefix = traj.states.clone();
                    prefix.push(state);
                    return Err(Error::RolloutDivergence { trajectory: i, prefix });
                }
                traj.states.push(state);
                traj.log_probs.push(lp);
                x[i * d..(i + 1) * d].copy_from_slice(&next);
            }
        }
        Ok(trajs)
    }
}

fn theta_tape<'t>(theta: &Bound<'t>, parents: &Tensor) -> Result<&'t Tape> {
    if parents.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(theta.tape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(t: usize) -> GaussianChain {
        GaussianChain {
            schedule: make_schedule(ScheduleKind::Cosine, t).unwrap(),
            net: DataPredictionNet::new(2, None, &[32, 32]),
        }
    }

    #[test]
    fn mean_hand_case() {
        // alpha_(t-1) = 0.9, alpha_t = 0.8; x_hat = 2 via bias
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.9, 0.8]).unwrap();
        let net = DataPredictionNet::new(1, None, &[4]);
        let mut p = net.zeros();
        p.insert("xhat.l1.b", Tensor::matrix(1, 1, vec![2.0]));
        let (mean, var) = p_theta_params(&s, &net, &p, &[1.0], 2, None).unwrap();
        assert!((mean[0] - 1.518_518_518_518_518_6).abs() < 1e-12);
        assert!((var - 0.36 / 0.81 * (0.81 - 0.64) / 0.36).abs() < 1e-15);
        assert!((var - (1.0 - 0.64 / 0.81)).abs() < 1e-15);
    }

    #[test]
    fn first_step_mean_is_prediction() {
        let c = chain(20);
        let p = c.net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let x = [0.4, -1.1];
        let (mean, _) = p_theta_params(&c.schedule, &c.net, &p, &x, 1, None).unwrap();
        let xhat = c.net.predict(&p, &Tensor::matrix(1, 2, x.to_vec()), &[1], &[None]).unwrap();
        for j in 0..2 {
            assert!((mean[j] - xhat.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_variance_matches_forward() {
        let c = chain(20);
        let p = c.net.zeros();
        for t in 1..=20 {
            let (_, v) = p_theta_params(&c.schedule, &c.net, &p, &[0.0, 0.0], t, None).unwrap();
            assert_eq!(v, c.schedule.kernel_variance(t).unwrap());
        }
    }

    #[test]
    fn logpdf_at_mean_and_zero_noise_sample() {
        let c = chain(10);
        let p = c.net.init(&mut ChaCha8Rng::seed_from_u64(4));
        let x = [0.2, 0.9];
        let (mean, var) = p_theta_params(&c.schedule, &c.net, &p, &x, 5, None).unwrap();
        let lp = p_theta_logpdf(&c.schedule, &c.net, &p, &x, 5, None, &mean).unwrap();
        assert!((lp - (-(2.0 / 2.0) * (2.0 * std::f64::consts::PI * var).ln())).abs() < 1e-12);
        let draw = p_theta_reparam(&c.schedule, &c.net, &p, &x, 5, None, &[0.0, 0.0]).unwrap();
        assert_eq!(draw, mean);
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let c = chain(5);
        let p = c.net.init(&mut ChaCha8Rng::seed_from_u64(5));
        let conds = vec![None; 4];
        let a = c.rollout(&p, &conds, 0, RolloutKey::train(42, 0)).unwrap();
        let b = c.rollout(&p, &conds, 0, RolloutKey::train(42, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for tr in &a {
            assert_eq!(tr.horizon(), 5);
            assert_eq!(tr.states.len(), 6);
            assert_eq!(tr.predictions.len(), 5);
        }
        // batching independence: trajectory 2 alone equals trajectory 2 of the batch
        let single = c.rollout(&p, &conds[..3], 0, RolloutKey::train(42, 0)).unwrap();
        assert_eq!(single[2], a[2]);
    }

    #[test]
    fn rollout_cache_matches_recomputation() {
        let c = chain(6);
        let p = c.net.init(&mut ChaCha8Rng::seed_from_u64(6));
        let trajs = c.rollout(&p, &[None; 8], 0, RolloutKey::train(1, 0)).unwrap();
        for tr in &trajs {
            for t in 1..=6 {
                let lp = p_theta_logpdf(
                    &c.schedule,
                    &c.net,
                    &p,
                    tr.state_at(t).as_point().unwrap(),
                    t,
                    None,
                    tr.state_at(t - 1).as_point().unwrap(),
                )
                .unwrap();
                assert!((lp - tr.log_prob_at(t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batched_log_prob_matches_scalar_path() {
        let c = chain(6);
        let p = c.net.init(&mut ChaCha8Rng::seed_from_u64(8));
        let trajs = c.rollout(&p, &[None; 3], 0, RolloutKey::train(2, 0)).unwrap();
        let mut parents = Vec::new();
        let mut children = Vec::new();
        let mut steps = Vec::new();
        for tr in &trajs {
            for t in 1..=6 {
                parents.push(tr.state_at(t).as_point().unwrap().to_vec());
                children.push(tr.state_at(t - 1).as_point().unwrap().to_vec());
                steps.push(t);
            }
        }
        let parents = Tensor::from_rows(&parents).unwrap();
        let children = Tensor::from_rows(&children).unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&p, false);
        let lp = c.log_prob_batch(&bound, &parents, &children, &steps, &vec![None; steps.len()]).unwrap();
        let lp = lp.value();
        let mut k = 0;
        for tr in &trajs {
            for t in 1..=6 {
                assert!((lp.data()[k] - tr.log_prob_at(t)).abs() <= 1e-12);
                k += 1;
            }
        }
    }

    #[test]
    fn zero_net_terminal_mean_near_zero() {
        let c = chain(20);
        let p = c.net.zeros();
        let n = 4000;
        let trajs = c.rollout(&p, &vec![None; n], 0, RolloutKey::train(9, 0)).unwrap();
        for dim in 0..2 {
            let xs: Vec<f64> = trajs.iter().map(|t| t.terminal().as_point().unwrap()[dim]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "dim {dim}: mean {mean}");
        }
    }
}
