//! Maximum-likelihood pretraining of the data-prediction network with the
//! simple denoising objective, plus the toy datasets it runs on.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gaussian::GaussianChain;
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, clip_global_norm, Bound, OptimizerState, ParamSet, Tensor, Var};
use crate::rng::{stream_rng, Stream};

/// Training samples with optional per-row condition ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub conditions: Vec<Option<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<Option<usize>>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.points.row(i));
        }
        (Tensor::matrix(idx.len(), d, data), idx.iter().map(|&i| self.conditions[i]).collect())
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;

/// Centres of the 8-Gaussians mixture, evenly spaced on a circle.
pub fn eight_gaussians_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            [EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()]
        })
        .collect()
}

/// `n` draws from the 8-Gaussians mixture. With `conditional`, each row is
/// tagged with its component id.
pub fn eight_gaussians(n: usize, conditional: bool, rng: &mut ChaCha8Rng) -> Dataset {
    let centers = eight_gaussians_centers();
    let mut data = Vec::with_capacity(2 * n);
    let mut conditions = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..8);
        for c in centers[k] {
            data.push(c + EIGHT_GAUSSIANS_STD * rng.sample::<f64, _>(StandardNormal));
        }
        conditions.push(conditional.then_some(k));
    }
    Dataset { points: Tensor::matrix(n, 2, data), conditions }
}

/// Reads comma-separated rows of `dim` floats, optionally followed by an
/// integer condition column.
pub fn load_dataset(path: &Path, dim: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut conditions = Vec::new();
    let mut with_cond = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let has = match rec.len() {
            n if n == dim => false,
            n if n == dim + 1 => true,
            n => {
                return Err(Error::Config(format!(
                    "{} line {}: {n} columns, want {dim} or {}",
                    path.display(),
                    line + 1,
                    dim + 1
                )))
            }
        };
        if *with_cond.get_or_insert(has) != has {
            return Err(Error::Config(format!("{} line {}: condition column is inconsistent", path.display(), line + 1)));
        }
        let bad = |f: &str| Error::Config(format!("{} line {}: cannot parse `{f}`", path.display(), line + 1));
        for f in rec.iter().take(dim) {
            let v: f64 = f.parse().map_err(|_| bad(f))?;
            if !v.is_finite() {
                return Err(bad(f));
            }
            data.push(v);
        }
        conditions.push(if has { Some(rec[dim].parse::<usize>().map_err(|_| bad(&rec[dim]))?) } else { None });
    }
    let n = conditions.len();
    Ok(Dataset { points: Tensor::matrix(n, dim, data), conditions })
}

/// `mean_i || x0_i - x_hat(alpha_t x0_i + sigma_t eps_i, t_i) ||^2`.
pub fn denoising_loss<'t>(
    chain: &GaussianChain,
    theta: &Bound<'t>,
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    conds: &[Option<usize>],
) -> Result<Var<'t>> {
    if x0.rows() == 0 {
        return Err(Error::Contract("empty pretraining batch".into()));
    }
    if x0.shape() != eps.shape() || steps.len() != x0.rows() || conds.len() != x0.rows() {
        return Err(Error::Contract("denoising batch parts disagree in shape".into()));
    }
    for &t in steps {
        if t == 0 || t > chain.horizon() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", chain.horizon())));
        }
    }
    let d = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    for i in 0..x0.rows() {
        let (a, s) = (chain.schedule.alpha(steps[i]), chain.schedule.sigma(steps[i]));
        for j in 0..d {
            xt.push(a * x0.get(i, j) + s * eps.get(i, j));
        }
    }
    let tape = theta.tape();
    let xhat = chain.net.forward(theta, tape.constant(Tensor::matrix(x0.rows(), d, xt)), steps, conds);
    Ok((tape.constant(x0.clone()) - xhat).square().sum_cols().mean())
}

/// Uniform steps and Gaussian noise for one pretraining batch.
pub fn draw_noise(horizon: usize, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Tensor) {
    let steps = (0..rows).map(|_| rng.random_range(1..=horizon)).collect();
    let eps = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    (steps, Tensor::matrix(rows, dim, eps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, batch_size: 256, clip_norm: 1.0 }
    }
}

/// One optimizer step on the denoising loss; returns the pre-update loss.
pub fn denoising_pretrain_step(
    chain: &GaussianChain,
    theta: &mut ParamSet,
    opt: &mut OptimizerState,
    x0: &Tensor,
    conds: &[Option<usize>],
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (steps, eps) = draw_noise(chain.horizon(), x0.rows(), x0.cols(), rng);
    let tape = crate::numerics::Tape::new();
    let bound = tape.bind(theta, true);
    let loss = denoising_loss(chain, &bound, x0, &steps, &eps, conds)?;
    let grads = tape.backward(loss)?;
    let mut g = bound.gradients(&grads);
    clip_global_norm(&mut g, clip_norm);
    adamw_step(theta, &g, opt)?;
    Ok(loss.item())
}

/// Runs `config.steps` pretraining steps; step `k` draws its minibatch and
/// noise from stream `(seed, k)`. `on_step` sees `(step, loss)`.
pub fn pretrain(
    chain: &GaussianChain,
    theta: &mut ParamSet,
    opt: &mut OptimizerState,
    data: &Dataset,
    config: &PretrainConfig,
    seed: u64,
    on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    pretrain_from(chain, theta, opt, data, config, seed, 0, on_step)
}

/// [`pretrain`] starting at step `start`, for resumed runs.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_from(
    chain: &GaussianChain,
    theta: &mut ParamSet,
    opt: &mut OptimizerState,
    data: &Dataset,
    config: &PretrainConfig,
    seed: u64,
    start: usize,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("pretraining dataset is empty".into()));
    }
    if data.dim() != chain.data_dim() {
        return Err(Error::Contract(format!("dataset dim {} != chain dim {}", data.dim(), chain.data_dim())));
    }
    if config.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    for k in start..config.steps {
        let mut rng = stream_rng(seed, Stream::Pretrain, &[k as u64]);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let (x0, conds) = data.batch(&idx);
        let loss = denoising_pretrain_step(chain, theta, opt, &x0, &conds, config.clip_norm, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { what: "denoising loss".into(), epoch: 0, step: k });
        }
        on_step(k, loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian::DataPredictionNet;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::numerics::{AdamWConfig, Tape};
    use rand::SeedableRng;
    use std::io::Write;

    fn chain() -> GaussianChain {
        GaussianChain {
            schedule: make_schedule(ScheduleKind::Cosine, 20).unwrap(),
            net: DataPredictionNet::new(2, None, &[16, 16]),
        }
    }

    #[test]
    fn zero_net_loss_is_mean_sq_norm() {
        let c = chain();
        let p = c.net.zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = eight_gaussians(64, false, &mut rng);
        let (steps, eps) = draw_noise(20, 64, 2, &mut rng);
        let tape = Tape::new();
        let b = tape.bind(&p, false);
        let loss = denoising_loss(&c, &b, &data.points, &steps, &eps, &data.conditions).unwrap().item();
        let want = (0..64).map(|i| data.points.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 64.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_net_has_zero_loss() {
        // constant dataset; a bias-only net predicts it exactly
        let c = GaussianChain { schedule: make_schedule(ScheduleKind::Cosine, 5).unwrap(), net: DataPredictionNet::new(2, None, &[]) };
        let mut p = c.net.zeros();
        p.insert("xhat.l0.b", Tensor::matrix(1, 2, vec![0.5, -1.5]));
        let x0 = Tensor::matrix(3, 2, vec![0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
        let (steps, eps) = draw_noise(5, 3, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let b = tape.bind(&p, false);
        let loss = denoising_loss(&c, &b, &x0, &steps, &eps, &[None; 3]).unwrap().item();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let c = chain();
        let mut p = c.net.zeros();
        let mut opt = OptimizerState::new(&p, AdamWConfig::default());
        let data = Dataset { points: Tensor::zeros(&[0, 2]), conditions: vec![] };
        let r = pretrain(&c, &mut p, &mut opt, &data, &PretrainConfig::default(), 0, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn csv_loading() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# x,y,c\n0.5, -1.0, 2\n1.5,2.0,0").unwrap();
        let d = load_dataset(f.path(), 2).unwrap();
        assert_eq!(d.points.data(), &[0.5, -1.0, 1.5, 2.0]);
        assert_eq!(d.conditions, vec![Some(2), Some(0)]);

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "0.5,1.0\n1.0").unwrap();
        assert!(matches!(load_dataset(g.path(), 2), Err(Error::Config(_))));
    }

    #[test]
    fn short_run_decreases_loss() {
        let c = chain();
        let mut p = c.net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let mut opt = OptimizerState::new(&p, AdamWConfig::with_lr(3e-3));
        let data = eight_gaussians(2048, false, &mut ChaCha8Rng::seed_from_u64(4));
        let mut losses = Vec::new();
        let cfg = PretrainConfig { steps: 200, batch_size: 128, clip_norm: 1.0 };
        pretrain(&c, &mut p, &mut opt, &data, &cfg, 5, |_, l| {
            losses.push(l);
            Ok(())
        })
        .unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "head {head} tail {tail}");
    }
}
