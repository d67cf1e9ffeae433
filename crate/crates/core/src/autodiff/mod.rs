//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! The op set is exactly what the segmentation network needs: 3x3/1x1 same
//! convolutions, 2x2 stride-2 transpose convolutions, batch normalization,
//! ReLU, sigmoid, max-pool, inverted dropout, channel concatenation, addition,
//! sum, and a masked binary cross-entropy head. Activations are laid out
//! N x H x W x C; kernels kH x kW x Cin x Cout.
//!
//! The engine is generic over [`Scalar`] so the same graph code runs in 32-bit
//! (production) and 64-bit (verification) precision.

mod check;
mod graph;
mod init;

pub use check::{
    finite_diff_check, finite_diff_check_f32, finite_diff_debug, finite_diff_debug_f32,
    finite_diff_debug_o4, GraphFn,
};
pub use graph::{Graph, Op, TensorId};
pub use init::{he_init, xavier_init, zeros};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} requires even spatial dimensions, got {h}x{w}")]
    OddSpatialDims { op: &'static str, h: usize, w: usize },
    #[error("dropout rate must lie in [0,1), got {0}")]
    BadDropoutRate(f64),
    #[error("kernel must have odd spatial size for same-padding conv, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("masked loss has no unmasked pixels (mask all zero)")]
    EmptyMask,
    #[error("expected scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("empty shape")]
    EmptyShape,
}

/// Element type of the engine: f32 in production, f64 in verification tests.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shaped dense array of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Lossy precision cast, used to lift f32 parameters into the f64
    /// verification mode.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}
