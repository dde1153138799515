//! Named parameter storage with a freeze mask.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Tensor, TensorError};

/// Ordered map of dotted names to tensors, plus the set of names that the
/// optimizer must leave untouched.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
    freeze_mask: BTreeSet<String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze_mask(&self) -> &BTreeSet<String> {
        &self.freeze_mask
    }

    /// Replaces the freeze mask; every name must exist in the store.
    pub fn set_freeze_mask(&mut self, mask: BTreeSet<String>) -> Result<(), TensorError> {
        if let Some(unknown) = mask.iter().find(|n| !self.entries.contains_key(*n)) {
            return Err(TensorError::Invalid(format!(
                "freeze mask names unknown parameter `{unknown}`"
            )));
        }
        for (name, t) in self.entries.iter_mut() {
            t.requires_grad = !mask.contains(name);
        }
        self.freeze_mask = mask;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze_mask.contains(name)
    }

    /// Total scalar count over every parameter.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Scalar count over parameters outside the freeze mask.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !self.freeze_mask.contains(*n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Adds gradients into the per-parameter accumulators.
    pub fn accumulate_grads(&mut self, grads: Vec<(String, Vec<f64>)>) -> Result<(), TensorError> {
        for (name, g) in grads {
            let t = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| TensorError::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if g.len() != t.numel() {
                return Err(TensorError::Invalid(format!("gradient length mismatch for `{name}`")));
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints keep.
    pub fn round_to_f32(&mut self) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Overwrites values of an existing parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, values: &Tensor) -> Result<(), TensorError> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter `{name}`")))?;
        if t.shape() != values.shape() {
            return Err(TensorError::Shape {
                op: "assign",
                lhs: t.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }
}

/// Samples from a normal distribution with the given std, redrawing anything
/// beyond two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform in `[-half_width, half_width)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], half_width: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.random::<f64>() - 0.5) * 2.0 * half_width)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_mask_is_subset() {
        let mut s = ParameterStore::new();
        s.insert("a.w", Tensor::zeros(&[2, 2])).unwrap();
        s.insert("a.b", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(&[1])).is_err());
        assert!(s.set_freeze_mask(["nope".to_string()].into()).is_err());
        s.set_freeze_mask(["a.w".to_string()].into()).unwrap();
        assert_eq!(s.total_count(), 6);
        assert_eq!(s.trainable_count(), 2);
        assert!(!s.get("a.w").unwrap().requires_grad);
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.w", "a.b"]);
    }

    #[test]
    fn truncated_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = truncated_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let u = uniform(&mut rng, &[1000], 0.1);
        assert!(u.data().iter().all(|v| v.abs() <= 0.1));
    }
}
