use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Named tensors in canonical (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Batch-norm running statistics are state, not trainable parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NamedTensors(vec![format!("missing tensor `{name}`")]))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Scalar count over trainable tensors (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Moves every tensor of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replaces every tensor with the same-named tensor from `src`,
    /// requiring an exact match of names and shapes.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match src.tensors.get(name) {
                None => problems.push(format!("missing tensor `{name}`")),
                Some(s) if s.shape() != t.shape() => problems.push(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in src.tensors.keys() {
            if !self.tensors.contains_key(name) {
                problems.push(format!("unexpected tensor `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::NamedTensors(problems));
        }
        for (name, t) in self.tensors.iter_mut() {
            *t = src.tensors[name].clone();
        }
        Ok(())
    }

    /// Plain SGD: `p <- p - lr * g` for every gradient supplied.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor<T>>, lr: T) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::NamedTensors(vec![format!("gradient for unknown tensor `{name}`")]))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv = *pv - lr * gv;
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform (ReLU gain) weight: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform(-bound, bound)))
}

/// Bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform(-bound, bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for &(n, v) in vals {
            s.insert(n, Tensor::scalar(v));
        }
        s
    }

    #[test]
    fn sgd_examples() {
        let mut p = store(&[("w", 1.0)]);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(2.0));
        p.sgd_step(&g, 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);

        let before = p.clone();
        p.sgd_step(&g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_two_steps_linear() {
        let mut a = store(&[("w", 1.0)]);
        let mut b = a.clone();
        let mut g1 = BTreeMap::new();
        g1.insert("w".to_string(), Tensor::scalar(0.5));
        let mut g2 = BTreeMap::new();
        g2.insert("w".to_string(), Tensor::scalar(-1.25));
        a.sgd_step(&g1, 0.1).unwrap();
        a.sgd_step(&g2, 0.1).unwrap();
        let mut sum = BTreeMap::new();
        sum.insert("w".to_string(), Tensor::scalar(0.5 - 1.25));
        b.sgd_step(&sum, 0.1).unwrap();
        assert!((a.get("w").unwrap().item() - b.get("w").unwrap().item()).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = store(&[("w", 1.0)]);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[2]));
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn load_from_lists_all_offenders() {
        let mut dst = store(&[("a", 0.0), ("b", 0.0)]);
        let mut src = store(&[("a", 1.0), ("c", 1.0)]);
        src.insert("a", Tensor::zeros(&[2]));
        let err = dst.load_from(&src).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        assert!(err.contains("missing tensor `b`"), "{err}");
        assert!(err.contains("unexpected tensor `c`"), "{err}");
    }
}
