use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NumericsError;

/// Named parameter tensors, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// L2 norm over every scalar of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += other`; shapes must agree name by name.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<(), NumericsError> {
        self.check_aligned(other)?;
        for (k, t) in self.tensors.iter_mut() {
            let o = &other.tensors[k];
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Same names and shapes as `other`.
    pub fn check_aligned(&self, other: &ParamSet) -> Result<(), NumericsError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(NumericsError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (k, t) in &self.tensors {
            match other.tensors.get(k) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(NumericsError::Contract(format!(
                        "shape mismatch for `{k}`: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(NumericsError::Contract(format!("missing parameter `{k}`"))),
            }
        }
        Ok(())
    }

    /// Copy of every tensor whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Flattens all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { tensors: iter.into_iter().collect() }
    }
}
