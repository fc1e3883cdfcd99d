//! Named parameter collections and their binding into a graph.

use indexmap::IndexMap;
use l2tww_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// An ordered table of named tensors (θ, φ, optimizer buffers).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Builds a set with the same names from a list of tensors in order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.entries.len() {
            return Err(Error::Spec(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        let mut out = IndexMap::with_capacity(values.len());
        for ((k, old), v) in self.entries.iter().zip(values) {
            if old.shape() != v.shape() {
                return Err(Error::Spec(format!(
                    "{k}: shape {:?} does not match {:?}",
                    v.shape(),
                    old.shape()
                )));
            }
            out.insert(k.clone(), v);
        }
        Ok(Self { entries: out })
    }

    /// `self + c · other`, matched by position.
    pub fn axpy(&self, c: f64, other: &ParamSet) -> Result<Self> {
        let values = self
            .entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.axpy(c, b))
            .collect::<Result<Vec<_>, _>>()?;
        self.with_values(values)
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        let mut s = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            s += a.dot(b)?;
        }
        Ok(s)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Bitwise equality of every entry (distinguishes `-0.0` from `0.0`).
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Puts every entry into `graph`, differentiable or constant.
    pub fn bind(&self, graph: &Graph, differentiable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let var = if differentiable {
                        graph.param(v.clone())
                    } else {
                        graph.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// A [`ParamSet`] placed in a graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Reads gradient variables back into a set named like `like`.
pub fn grads_to_set(like: &ParamSet, grads: Vec<Var>) -> Result<ParamSet> {
    like.with_values(grads.into_iter().map(|g| (*g.value()).clone()).collect())
}
