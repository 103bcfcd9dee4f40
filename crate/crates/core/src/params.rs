//! Named flat parameter tensors: the common currency of the optimizer,
//! the finite-difference checker and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        NamedTensor::new(name, vec![], vec![v])
    }

    pub fn zeros_like(&self) -> Self {
        NamedTensor::new(self.name.clone(), self.dims.clone(), vec![0.0; self.data.len()])
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor4) -> Self {
        let s = t.shape();
        NamedTensor::new(name, vec![s.n, s.c, s.h, s.w], t.data().to_vec())
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        NamedTensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor4> {
        match self.dims[..] {
            [n, c, h, w] => Tensor4::from_vec(Shape4::new(n, c, h, w), self.data.clone()),
            _ => Err(Error::shape("NamedTensor::to_tensor", format!("`{}` has dims {:?}", self.name, self.dims))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::shape("NamedTensor::to_matrix", format!("`{}` has dims {:?}", self.name, self.dims))),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: Vec<NamedTensor>,
}

impl GradientSet {
    pub fn new(grads: Vec<NamedTensor>) -> Self {
        GradientSet { grads }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.grads.iter().find(|g| g.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.grads.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.grads.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<NamedTensor> {
        self.grads
    }

    pub fn insert(&mut self, g: NamedTensor) {
        match self.grads.iter_mut().find(|x| x.name == g.name) {
            Some(slot) => *slot = g,
            None => self.grads.push(g),
        }
    }
}
