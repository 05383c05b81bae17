//! Dense f64 tensors with a gradient slot, and ordered named parameter sets.
//!
//! Everything numeric in this crate is at most rank 2 (batch x features);
//! rank-1 tensors are treated as a single row where a 2-D view is needed.
//! Gradients live behind a `RefCell` so that a borrowed tape can write them
//! back after the backward pass while the owning network stays immutable.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    DataLength { expected: usize, got: usize },
    NonFinite { context: String },
    DuplicateName(String),
    UnknownName(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            TensorError::DuplicateName(n) => write!(f, "duplicate parameter name '{n}'"),
            TensorError::UnknownName(n) => write!(f, "unknown parameter name '{n}'"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor with a same-shape gradient buffer.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Vec<f64>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: RefCell::new(self.grad.borrow().clone()),
        }
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: RefCell::new(vec![0.0; n]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::DataLength { expected: n, got: data.len() });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            grad: RefCell::new(vec![0.0; n]),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: RefCell::new(vec![0.0]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D view: rank-1 tensors are a single row, scalars are 1x1.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rank-{} tensor has no 2-D view", self.shape.len()),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.grad.borrow()
    }

    pub fn grad_vec(&self) -> Vec<f64> {
        self.grad.borrow().clone()
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.grad.borrow_mut();
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn set_grad(&self, values: &[f64]) {
        let mut g = self.grad.borrow_mut();
        assert_eq!(g.len(), values.len(), "gradient length mismatch");
        g.copy_from_slice(values);
    }

    pub fn clear_grad(&self) {
        for g in self.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { context: context.to_string() })
        }
    }
}

/// Ordered map from parameter name to tensor, plus the optimizer step counter.
///
/// Iteration order is insertion order and is the canonical order for the
/// flattened-vector view, checkpoints, and Polyak averaging.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| TensorError::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(TensorError::UnknownName(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n.as_str(), t)
    }

    pub fn entry_mut(&mut self, i: usize) -> (&str, &mut Tensor) {
        let (n, t) = &mut self.entries[i];
        (n.as_str(), t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flat_data(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.grad());
        }
        out
    }

    pub fn clear_grads(&self) {
        for (_, t) in &self.entries {
            t.clear_grad();
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), TensorError> {
        for (name, t) in &self.entries {
            t.assert_finite(&format!("{context}/{name}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(*t.grad(), vec![2.0, 3.0, 4.0]);
        t.clear_grad();
        assert_eq!(*t.grad(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn parameter_set_preserves_insertion_order() {
        let mut ps = ParameterSet::new();
        ps.insert("b", Tensor::zeros(&[2])).unwrap();
        ps.insert("a", Tensor::zeros(&[3])).unwrap();
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(ps.total_len(), 5);
        assert!(ps.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn flat_view_has_fixed_length() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        ps.insert("b", Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap()).unwrap();
        assert_eq!(ps.flat_data(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ps.flat_grad().len(), 6);
    }
}
