//! Dense row-major tensors and the named parameter store.

use super::NnError;
use std::collections::BTreeMap;

/// A dense row-major f32 tensor. Everything in this crate is rank 2
/// (`[rows, cols]`); vectors are `[1, n]` and scalars `[1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} wants {n} elements, got {}", data.len());
        Self { shape: shape.to_vec(), data }
    }

    /// `[1, n]` row vector.
    pub fn row(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::from_vec(&[1, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Named parameter tensors with deterministic lexicographic iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a fresh parameter; a second insert under the same name is an error.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), NnError> {
        if self.map.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.map.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.map.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Lexicographic (name-ordered) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { map }
    }

    /// Merges `other` into `self`; duplicate names are an error.
    pub fn absorb(&mut self, other: ParamStore) -> Result<(), NnError> {
        for (k, v) in other.map {
            if self.map.contains_key(&k) {
                return Err(NnError::DuplicateParam(k));
            }
            self.map.insert(k, v);
        }
        Ok(())
    }
}
