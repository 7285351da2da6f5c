//! Terminal-sample evaluation: reward statistics, exact distribution gaps on
//! discrete chains, histogram KL on 2D continuous chains.

use std::io::Write;
use std::path::Path;

use crate::diffusion::{State, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::ParamSet;
use crate::oracle::{exact_flows_log, kl_divergence, logsumexp, terminal_distribution, total_variation};
use crate::rewards::RewardSpec;
use crate::rng::RolloutKey;

use super::metrics::EvalMetrics;
use super::task::Task;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub samples: usize,
    pub bins: usize,
    pub range: f64,
}

/// Terminal samples and their raw rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub states: Vec<State>,
    pub conditions: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
}

pub fn draw_samples(task: &Task, reward: &RewardSpec, theta: &ParamSet, n: usize, key: RolloutKey) -> Result<Samples> {
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let model = task.model();
    let conds: Vec<Option<usize>> = (0..n).map(|i| model.conditions().map(|k| i % k)).collect();
    let trajs = model.rollout(theta, &conds, 0, key)?;
    let states: Vec<State> = trajs.iter().map(|t: &Trajectory| t.terminal().clone()).collect();
    let rewards = states.iter().zip(&conds).map(|(s, c)| reward.reward.eval(s, *c)).collect::<Result<Vec<_>>>()?;
    Ok(Samples { states, conditions: conds, rewards })
}

pub fn evaluate(task: &Task, reward: &RewardSpec, theta: &ParamSet, opts: &EvalOptions, key: RolloutKey) -> Result<EvalMetrics> {
    let samples = draw_samples(task, reward, theta, opts.samples, key)?;
    evaluate_samples(task, reward, theta, opts, &samples)
}

pub fn evaluate_samples(
    task: &Task,
    reward: &RewardSpec,
    theta: &ParamSet,
    opts: &EvalOptions,
    samples: &Samples,
) -> Result<EvalMetrics> {
    let n = samples.rewards.len() as f64;
    let mean = samples.rewards.iter().sum::<f64>() / n;
    let var = if samples.rewards.len() > 1 {
        samples.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut m = EvalMetrics {
        samples: samples.rewards.len(),
        reward_mean: mean,
        reward_max: samples.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        reward_se: (var / n).sqrt(),
        ..EvalMetrics::default()
    };
    match task {
        Task::Discrete(model) => {
            let spec = &model.spec;
            let log_r = (0..spec.states())
                .map(|x| reward.reward.eval(&State::Index(x), None).map(|r| reward.beta_max * r))
                .collect::<Result<Vec<_>>>()?;
            let sol = exact_flows_log(spec, &log_r)?;
            let target: Vec<f64> = log_r.iter().map(|r| (r - logsumexp(&log_r)).exp()).collect();
            let exact = terminal_distribution(spec, &spec.policy_tables(theta)?)?;
            let mut counts = vec![0.0; spec.states()];
            for s in &samples.states {
                counts[s.as_index().expect("discrete sample")] += 1.0;
            }
            let empirical: Vec<f64> = counts.iter().map(|c| c / n).collect();
            m.tv_optimal = Some(total_variation(&exact, &sol.terminal));
            m.tv_target = Some(total_variation(&exact, &target));
            m.kl_optimal = Some(kl_divergence(&exact, &sol.terminal));
            m.kl_target = Some(kl_divergence(&exact, &target));
            m.floor = Some(sol.floor);
            m.tv_optimal_mc = Some(total_variation(&empirical, &sol.terminal));
            m.tv_mc_se = Some(0.5 * exact.iter().map(|p| (p * (1.0 - p) / n).sqrt()).sum::<f64>());
        }
        Task::Continuous(model) => {
            if model.chain.data_dim() == 2 {
                let (kl, coverage) = conditional_histogram_kl(reward, samples, opts.bins, opts.range)?;
                m.hist_kl = kl;
                m.hist_coverage = Some(coverage);
            }
        }
    }
    Ok(m)
}

/// Histogram KL per condition, averaged with weights proportional to the
/// number of in-grid samples. `None` when no sample lands on the grid.
fn conditional_histogram_kl(reward: &RewardSpec, samples: &Samples, bins: usize, range: f64) -> Result<(Option<f64>, f64)> {
    let mut groups: std::collections::BTreeMap<Option<usize>, Vec<[f64; 2]>> = Default::default();
    for (s, c) in samples.states.iter().zip(&samples.conditions) {
        let p = s.as_point().expect("continuous sample");
        groups.entry(*c).or_default().push([p[0], p[1]]);
    }
    let (mut weighted, mut inside) = (0.0, 0usize);
    for (c, pts) in &groups {
        let log_target = |x: &[f64]| reward.reward.eval(&State::Point(x.to_vec()), *c).map(|r| reward.beta_max * r);
        if let Some(h) = histogram_kl(pts, log_target, bins, range)? {
            weighted += h.kl * h.inside as f64;
            inside += h.inside;
        }
    }
    let coverage = inside as f64 / samples.states.len() as f64;
    Ok(((inside > 0).then(|| weighted / inside as f64), coverage))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramKl {
    pub kl: f64,
    /// Samples that fell inside the grid.
    pub inside: usize,
}

/// `KL(p_hat || q)` on a `bins x bins` grid over `[-range, range]^2`, where
/// `p_hat` is the normalized histogram of the in-grid points and `q` is
/// `exp(log_target)` at bin centres, normalized over the grid.
pub fn histogram_kl(
    points: &[[f64; 2]],
    mut log_target: impl FnMut(&[f64]) -> Result<f64>,
    bins: usize,
    range: f64,
) -> Result<Option<HistogramKl>> {
    if bins == 0 || !(range > 0.0) {
        return Err(Error::Contract("histogram needs bins > 0 and range > 0".into()));
    }
    let width = 2.0 * range / bins as f64;
    let cell = |v: f64| -> Option<usize> {
        let k = ((v + range) / width).floor();
        (k >= 0.0 && k < bins as f64).then_some(k as usize)
    };
    let mut counts = vec![0usize; bins * bins];
    let mut inside = 0;
    for p in points {
        if let (Some(i), Some(j)) = (cell(p[0]), cell(p[1])) {
            counts[i * bins + j] += 1;
            inside += 1;
        }
    }
    if inside == 0 {
        return Ok(None);
    }
    let centre = |k: usize| -range + (k as f64 + 0.5) * width;
    let mut log_q = Vec::with_capacity(bins * bins);
    for i in 0..bins {
        for j in 0..bins {
            log_q.push(log_target(&[centre(i), centre(j)])?);
        }
    }
    let z = logsumexp(&log_q);
    let n = inside as f64;
    let kl = counts
        .iter()
        .zip(&log_q)
        .filter(|(c, _)| **c > 0)
        .map(|(&c, lq)| {
            let p = c as f64 / n;
            p * (p.ln() - (lq - z))
        })
        .sum();
    Ok(Some(HistogramKl { kl, inside }))
}

/// Writes samples as CSV: coordinates (or state index), condition, reward.
pub fn write_samples(path: &Path, samples: &Samples) -> Result<()> {
    let mut out = String::new();
    for ((s, c), r) in samples.states.iter().zip(&samples.conditions).zip(&samples.rewards) {
        match s {
            State::Point(p) => {
                for v in p {
                    out.push_str(&format!("{v},"));
                }
            }
            State::Index(i) => out.push_str(&format!("{i},")),
        }
        match c {
            Some(c) => out.push_str(&format!("{c},{r}\n")),
            None => out.push_str(&format!(",{r}\n")),
        }
    }
    let tmp = path.with_extension("csv.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_histogram_has_small_kl() {
        // one point per cell centre matches a flat target exactly
        let bins = 4;
        let pts: Vec<[f64; 2]> =
            (0..bins).flat_map(|i| (0..bins).map(move |j| [-2.0 + 1.0 * i as f64 + 0.5, -2.0 + 1.0 * j as f64 + 0.5])).collect();
        let h = histogram_kl(&pts, |_| Ok(3.0), bins, 2.0).unwrap().unwrap();
        assert!(h.kl.abs() < 1e-12);
        assert_eq!(h.inside, 16);
    }

    #[test]
    fn concentrated_histogram_kl_is_log_cells() {
        let pts = vec![[0.1, 0.1]; 10];
        let h = histogram_kl(&pts, |_| Ok(0.0), 4, 2.0).unwrap().unwrap();
        assert!((h.kl - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_points_dropped() {
        let pts = vec![[5.0, 0.0], [0.5, 0.5]];
        let h = histogram_kl(&pts, |_| Ok(0.0), 2, 1.0).unwrap().unwrap();
        assert_eq!(h.inside, 1);
        assert!(histogram_kl(&[[9.0, 9.0]], |_| Ok(0.0), 2, 1.0).unwrap().is_none());
    }
}
