use diffalign::diffusion::gaussian::DataPredictionNet;
use diffalign::diffusion::pretrain::EIGHT_GAUSSIANS_STD;
use diffalign::diffusion::{
    eight_gaussians, eight_gaussians_centers, make_schedule, pretrain, GaussianChain, NoiseSchedule, PretrainConfig,
    ScheduleKind,
};
use diffalign::numerics::{AdamWConfig, OptimizerState};
use diffalign::rng::{stream_rng, Stream};
use rand::Rng;
use rand_distr::StandardNormal;

/// Monte Carlo estimate of the minimum achievable denoising loss on the
/// 8-Gaussians mixture: the error of the exact posterior mean
/// `E[x_0 | x_t]`, averaged over uniform `t`.
fn bayes_floor(schedule: &NoiseSchedule, draws: usize, seed: u64) -> f64 {
    let centers = eight_gaussians_centers();
    let s2 = EIGHT_GAUSSIANS_STD * EIGHT_GAUSSIANS_STD;
    let mut rng = stream_rng(seed, Stream::Oracle, &[]);
    let horizon = schedule.horizon();
    let mut total = 0.0;
    for t in 1..=horizon {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let v = a * a * s2 + s * s;
        let gain = a * s2 / v;
        let mut err = 0.0;
        for _ in 0..draws {
            let k = rng.random_range(0..8);
            let x0: Vec<f64> = centers[k].iter().map(|c| c + EIGHT_GAUSSIANS_STD * rng.sample::<f64, _>(StandardNormal)).collect();
            let xt: Vec<f64> = x0.iter().map(|x| a * x + s * rng.sample::<f64, _>(StandardNormal)).collect();
            let logw: Vec<f64> = centers
                .iter()
                .map(|c| -((xt[0] - a * c[0]).powi(2) + (xt[1] - a * c[1]).powi(2)) / (2.0 * v))
                .collect();
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut post = [0.0; 2];
            for (wk, c) in w.iter().zip(&centers) {
                for d in 0..2 {
                    post[d] += wk / z * (c[d] + gain * (xt[d] - a * c[d]));
                }
            }
            err += (x0[0] - post[0]).powi(2) + (x0[1] - post[1]).powi(2);
        }
        total += err / draws as f64;
    }
    total / horizon as f64
}

#[test]
fn pretraining_approaches_the_bayes_floor() {
    let schedule = make_schedule(ScheduleKind::Cosine, 20).unwrap();
    let chain = GaussianChain { schedule: schedule.clone(), net: DataPredictionNet::new(2, None, &[64, 64, 64]) };
    let mut theta = chain.net.init(&mut stream_rng(3, Stream::Init, &[0]));
    let mut opt = OptimizerState::new(&theta, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-3) });
    let data = eight_gaussians(8192, false, &mut stream_rng(3, Stream::Data, &[]));
    let mut losses = Vec::new();
    pretrain(&chain, &mut theta, &mut opt, &data, &PretrainConfig::default(), 3, |_, l| {
        losses.push(l);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 2000);

    let floor = bayes_floor(&schedule, 4000, 0);
    let window = |a: usize, b: usize| losses[a..b].iter().sum::<f64>() / (b - a) as f64;
    let initial = window(0, 10);
    let last = window(1900, 2000);
    println!("initial {initial:.4} final {last:.4} floor {floor:.4} ratio {:.3}", last / initial);

    // the floor bounds any estimator from below; allow Monte Carlo slack
    assert!(last > 0.95 * floor, "{last} below floor {floor}");
    assert!(last < 1.2 * floor, "{last} not near floor {floor}");
    // the floor itself is well above a quarter of the initial loss
    assert!(floor / initial > 0.25);

    // every later 10-step window sits below the first one
    assert!((10..2000).step_by(10).all(|k| window(k, k + 10) < initial));
    assert!(window(100, 200) < window(0, 100));
}
