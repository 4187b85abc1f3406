use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type the differentiation engine is generic over.
///
/// Models and optimizers run in `f32`; the finite-difference oracle re-runs
/// the same graphs in `f64`.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                node: "tensor".into(),
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = s[s.len() - 1];
                (s[..s.len() - 1].iter().product(), cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[R] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::of(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
