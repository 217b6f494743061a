//! Layers with hand-written backward passes.

pub mod conv;
pub mod lstm;
pub mod norm;
mod real;

pub use real::{gemm, lane_sum, Mat, Real};

use serde::{Deserialize, Serialize};

/// A named, shaped array of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> NamedArray<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let mut a = Self::zeros(name, shape);
        a.data.fill(v);
        a
    }
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub arrays: Vec<NamedArray<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, a: NamedArray<T>) -> usize {
        self.arrays.push(a);
        self.arrays.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray::zeros(a.name.clone(), a.shape.clone()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.arrays.iter().flat_map(|a| a.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    /// Element type conversion, e.g. `f32` parameters into `f64`.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}
