//! Scalar abstraction: all numeric kernels are generic over the element
//! type so the same networks and losses run in f32 for training and f64
//! for finite-difference gradient checks.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 -> scalar")
    }

    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn to_f64_(self) -> f64 {
        self
    }
}

/// Element type tag carried by checkpoint tensor entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dynamic-rank tensor used throughout the crate.
pub type Tensor<F> = ndarray::ArrayD<F>;
/// Default training precision.
pub type TensorF32 = Tensor<f32>;
/// Precision used by gradient-check oracles.
pub type TensorF64 = Tensor<f64>;
