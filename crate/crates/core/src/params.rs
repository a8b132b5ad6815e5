use indexmap::IndexMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Counts grouped by the name up to the last `.`-separated component
    /// that is not a layer index or tensor role, e.g. `level2.dense`.
    pub fn count_by_module(&self) -> IndexMap<String, usize> {
        let mut out = IndexMap::new();
        for (name, t) in &self.tensors {
            let module: Vec<&str> = name
                .split('.')
                .take_while(|part| {
                    !part.chars().all(|c| c.is_ascii_digit())
                        && !matches!(*part, "kernel" | "bias" | "weight")
                        && !part.starts_with("fc")
                })
                .collect();
            *out.entry(module.join(".")).or_insert(0) += t.len();
        }
        out
    }

    /// Places every parameter on `g` as a gradient-requiring leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.cast())))
                .collect(),
        }
    }

    /// Same as [`ParamStore::bind`] but without gradient tracking.
    pub fn bind_frozen<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.cast())))
                .collect(),
        }
    }

    /// Gradients for every bound parameter after a backward pass; parameters
    /// the loss did not reach get zeros.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, bound: &Bound) -> IndexMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let grad = bound
                    .vars
                    .get(name)
                    .and_then(|&v| g.grad(v))
                    .map(|gr| gr.iter().map(|x| x.f64() as f32).collect())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (name.clone(), grad)
            })
            .collect()
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::contract(format!("parameter {name} missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::contract(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::contract(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Graph vars for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::new();
        p.insert("a.kernel", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a.kernel", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn module_grouping() {
        let mut p = ParamStore::new();
        p.insert("dense.0.kernel", Tensor::zeros(&[3])).unwrap();
        p.insert("dense.1.bias", Tensor::zeros(&[2])).unwrap();
        p.insert("level2.primary.kernel", Tensor::zeros(&[4])).unwrap();
        p.insert("decoder.fc1.weight", Tensor::zeros(&[5])).unwrap();
        let m = p.count_by_module();
        assert_eq!(m["dense"], 5);
        assert_eq!(m["level2.primary"], 4);
        assert_eq!(m["decoder"], 5);
        assert_eq!(p.count(), 14);
    }
}
