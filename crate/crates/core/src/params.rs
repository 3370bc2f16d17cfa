use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named trainable tensors. Iteration order is the lexical order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Gradients<F> {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub(crate) tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Euclidean norm over all parameters whose name satisfies `select`.
    pub fn norm_where(&self, select: impl Fn(&str) -> bool) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| select(k))
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-channel running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Running statistics of every batch-norm layer in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsSet<F> {
    layers: BTreeMap<String, RunningStats<F>>,
}

impl<F: Real> StatsSet<F> {
    pub fn new() -> Self {
        StatsSet {
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: RunningStats<F>) {
        self.layers.insert(name.into(), stats);
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats<F>> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown batch-norm layer {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&RunningStats<F>> {
        self.layers.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<F>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<F>)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("a", Tensor::ones(&[2])).unwrap();
        assert!(p.insert("a", Tensor::ones(&[2])).is_err());
        assert_eq!(p.numel(), 2);
    }

    #[test]
    fn zeros_like_covers_every_parameter() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::ones(&[2, 3])).unwrap();
        p.insert("b", Tensor::ones(&[3])).unwrap();
        let g = p.zeros_like();
        assert_eq!(g.get("w").unwrap().shape(), &[2, 3]);
        assert_eq!(g.norm_where(|_| true), 0.0);
    }
}
