use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An ordered collection of named parameter tensors.
///
/// Networks, gradients, optimizer moments and EMA shadows all share this
/// layout, so elementwise updates never need to know the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        ParamSet { names, tensors }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(what, &[self.len()], &[other.len()]));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::shape(format!("{what} ({na} vs {nb})"), a.shape(), b.shape()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `self += alpha * other`, without finiteness checks (gradient accumulation).
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| crate::numerics::tensor::dot(a.data(), b.data()))
            .sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.dot(self)
    }

    /// Flat view of every entry in layout order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Entry `k` in the flat layout order, as (tensor index, offset).
    pub fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return (i, k);
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
