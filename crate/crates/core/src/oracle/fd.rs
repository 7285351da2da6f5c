use crate::error::Result;
use crate::numerics::ParamSet;

/// Central differences of `f` at `params`, one coordinate at a time, with
/// step `step * max(1, |p|)`.
pub fn finite_diff(mut f: impl FnMut(&ParamSet) -> Result<f64>, params: &ParamSet, step: f64) -> Result<ParamSet> {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for name in params.names() {
        let n = params.get(&name).expect("name from set").len();
        for i in 0..n {
            let orig = params.get(&name).expect("name from set").data()[i];
            let h = step * orig.abs().max(1.0);
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.get_mut(&name).expect("same names").data_mut()[i] = orig;
            out.get_mut(&name).expect("same names").data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over aligned coordinates.
pub fn max_rel_err(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]));
        let quad = |q: &ParamSet| {
            let v = q.get("a").unwrap().data();
            Ok(1.5 * v[0] * v[0] - v[0] * v[1] + 0.25 * v[2] * v[2] + v[1])
        };
        let fd = finite_diff(quad, &p, 1e-3).unwrap();
        let mut want = ParamSet::new();
        want.insert("a", Tensor::matrix(1, 3, vec![3.0 * 0.5 + 2.0, -0.5 + 1.0, 0.5 * 3.0]));
        assert!(fd.max_abs_diff(&want) <= 1e-10, "{:?}", fd.flatten());
    }
}
