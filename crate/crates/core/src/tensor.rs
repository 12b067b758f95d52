//! Dense row-major `f64` tensors and their shapes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Ordered list of extents. The empty list is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Builds a shape, rejecting zero extents.
    pub fn new(dims: impl Into<Vec<usize>>) -> Option<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            None
        } else {
            Some(Self(dims))
        }
    }

    pub fn scalar() -> Self {
        Self(Vec::new())
    }

    pub fn vector(n: usize) -> Self {
        Self::new(vec![n]).expect("extent must be positive")
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Self::new(vec![rows, cols]).expect("extents must be positive")
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// A single-element tensor, eligible for scalar broadcast.
    pub fn is_unit(&self) -> bool {
        self.numel() == 1
    }

    /// Shape with `axis` removed.
    pub fn remove_axis(&self, axis: usize) -> Shape {
        let mut dims = self.0.clone();
        dims.remove(axis);
        Shape(dims)
    }

    /// Shape with a new axis of extent `size` inserted at `axis`.
    pub fn insert_axis(&self, axis: usize, size: usize) -> Shape {
        let mut dims = self.0.clone();
        dims.insert(axis, size);
        Shape(dims)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// A dense tensor. `data.len() == shape.numel()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Returns `None` when the data length does not match the shape.
    pub fn new(shape: Shape, data: Vec<f64>) -> Option<Self> {
        (shape.numel() == data.len()).then_some(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Tensor with a single `1.0` at flat position `index`.
    pub fn one_hot(shape: Shape, index: usize) -> Self {
        let mut t = Self::zeros(shape);
        t.data[index] = 1.0;
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: Shape::vector(data.len().max(1)),
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let r = rows.len();
        let c = rows.first()?.len();
        if rows.iter().any(|row| row.len() != c) {
            return None;
        }
        Self::new(Shape::new(vec![r, c])?, rows.concat())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a unit tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_all(&self, value: f64) -> bool {
        self.data.iter().all(|&v| v == value)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a different shape of equal size.
    pub fn reshaped(&self, shape: Shape) -> Option<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest elementwise absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }
}
