//! Tanh multilayer perceptrons and the time/condition-conditioned wrapper
//! shared by the denoiser and the flow network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Bound, Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Layer widths of a tanh MLP. Parameters are named `{prefix}.l{i}.w`
/// (`[in, out]`) and `{prefix}.l{i}.b` (`[1, out]`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub prefix: String,
    pub widths: Vec<usize>,
}

impl MlpArch {
    pub fn new(prefix: &str, input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpArch { prefix: prefix.to_string(), widths }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn w(&self, i: usize) -> String {
        format!("{}.l{}.w", self.prefix, i)
    }

    fn b(&self, i: usize) -> String {
        format!("{}.l{}.b", self.prefix, i)
    }

    /// Uniform fan-in initialisation; optionally zeroes the output layer.
    pub fn init(&self, rng: &mut ChaCha8Rng, zero_last: bool, params: &mut ParamSet) {
        for i in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let zero = zero_last && i + 1 == self.layers();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| if zero { 0.0 } else { rng.random_range(-bound..bound) }).collect()
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            params.insert(self.w(i), Tensor::matrix(fan_in, fan_out, w));
            params.insert(self.b(i), Tensor::matrix(1, fan_out, b));
        }
    }

    pub fn zeros(&self, params: &mut ParamSet) {
        for i in 0..self.layers() {
            let (fi, fo) = (self.widths[i], self.widths[i + 1]);
            params.insert(self.w(i), Tensor::zeros(&[fi, fo]));
            params.insert(self.b(i), Tensor::zeros(&[1, fo]));
        }
    }

    /// Forward pass on the tape. `input` must be `[batch, input_dim]`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, input: Var<'t>) -> Var<'t> {
        let mut h = input;
        for i in 0..self.layers() {
            h = h.matmul(bound.get(&self.w(i))) + bound.get(&self.b(i));
            if i + 1 < self.layers() {
                h = h.tanh();
            }
        }
        h
    }
}

/// Evaluates `arch` on a batch of inputs, checking widths first.
pub fn mlp_apply(arch: &MlpArch, params: &ParamSet, inputs: &Tensor) -> Result<Tensor, NumericsError> {
    if inputs.cols() != arch.input_dim() {
        return Err(NumericsError::Contract(format!(
            "input width {} does not match first layer width {}",
            inputs.cols(),
            arch.input_dim()
        )));
    }
    let tape = Tape::new();
    let bound = tape.bind(params, false);
    let x = tape.constant(inputs.clone());
    let out = arch.forward(&bound, x);
    tape.check_finite()?;
    Ok(out.value())
}

/// Sinusoidal embedding of integer time steps, `[len(steps), dim]`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for k in 0..half {
            let freq = (-(100f64).ln() * k as f64 / half.max(1) as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(100f64).ln() * k as f64 / half.max(1) as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::matrix(steps.len(), dim, data)
}

/// MLP over `[x, time embedding(t), condition embedding(c)]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionedMlp {
    pub data_dim: usize,
    pub time_dim: usize,
    /// Number of condition ids and the width of their learned embedding.
    pub conditions: Option<(usize, usize)>,
    pub mlp: MlpArch,
}

impl ConditionedMlp {
    pub fn new(
        prefix: &str,
        data_dim: usize,
        time_dim: usize,
        conditions: Option<(usize, usize)>,
        hidden: &[usize],
        output: usize,
    ) -> Self {
        let input = data_dim + time_dim + conditions.map_or(0, |(_, e)| e);
        ConditionedMlp { data_dim, time_dim, conditions, mlp: MlpArch::new(prefix, input, hidden, output) }
    }

    fn cond_name(&self) -> String {
        format!("{}.cond", self.mlp.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, zero_last: bool) -> ParamSet {
        let mut p = ParamSet::new();
        self.mlp.init(rng, zero_last, &mut p);
        if let Some((n, e)) = self.conditions {
            let d = (0..n * e).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.insert(self.cond_name(), Tensor::matrix(n, e, d));
        }
        p
    }

    pub fn zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        self.mlp.zeros(&mut p);
        if let Some((n, e)) = self.conditions {
            p.insert(self.cond_name(), Tensor::zeros(&[n, e]));
        }
        p
    }

    pub fn check_condition(&self, c: Option<usize>) -> Result<(), NumericsError> {
        match (self.conditions, c) {
            (None, None) => Ok(()),
            (Some((n, _)), Some(c)) if c < n => Ok(()),
            (Some((n, _)), Some(c)) => {
                Err(NumericsError::Contract(format!("condition id {c} out of range 0..{n}")))
            }
            (Some(_), None) => Err(NumericsError::Contract("conditional net needs a condition id".into())),
            (None, Some(_)) => Err(NumericsError::Contract("unconditional net got a condition id".into())),
        }
    }

    /// `x` is `[batch, data_dim]`; `steps` and `conds` have one entry per row.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>, steps: &[usize], conds: &[Option<usize>]) -> Var<'t> {
        let tape = x.tape();
        let mut parts = vec![x, tape.constant(time_embedding(steps, self.time_dim))];
        if self.conditions.is_some() {
            let ids: Vec<usize> = conds.iter().map(|c| c.expect("condition id")).collect();
            parts.push(bound.get(&self.cond_name()).gather_rows(&ids));
        }
        self.mlp.forward(bound, Var::concat_cols(&parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_output_final_bias() {
        let arch = MlpArch::new("n", 3, &[4, 4], 2);
        let mut p = ParamSet::new();
        arch.zeros(&mut p);
        p.insert("n.l2.b", Tensor::matrix(1, 2, vec![0.25, -1.5]));
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let y = mlp_apply(&arch, &p, &x).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let arch = MlpArch::new("n", 2, &[], 2);
        let mut p = ParamSet::new();
        p.insert("n.l0.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        p.insert("n.l0.b", Tensor::zeros(&[1, 2]));
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 3.0, 1e3, -7.0]);
        assert_eq!(mlp_apply(&arch, &p, &x).unwrap(), x);
    }

    #[test]
    fn width_mismatch() {
        let arch = MlpArch::new("n", 2, &[4], 1);
        let mut p = ParamSet::new();
        arch.zeros(&mut p);
        assert!(matches!(mlp_apply(&arch, &p, &Tensor::zeros(&[1, 3])), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn batch_equals_rowwise() {
        let arch = MlpArch::new("n", 3, &[16, 16, 16], 2);
        let mut p = ParamSet::new();
        arch.init(&mut ChaCha8Rng::seed_from_u64(1), false, &mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..37).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let batch = mlp_apply(&arch, &p, &Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = mlp_apply(&arch, &p, &Tensor::matrix(1, 3, r.clone())).unwrap();
            for j in 0..2 {
                assert!((single.data()[j] - batch.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let arch = ConditionedMlp::new("f", 2, 8, Some((3, 4)), &[8], 1);
        let a = arch.init(&mut ChaCha8Rng::seed_from_u64(9), true);
        let b = arch.init(&mut ChaCha8Rng::seed_from_u64(9), true);
        assert_eq!(a, b);
        assert!(a.get("f.l1.w").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
