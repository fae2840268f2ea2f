//! Minimal reverse-mode differentiation engine.
//!
//! The engine is precision-parametric: f64 for gradient-check oracles,
//! f32 for training. A [`Graph`] is an append-only tape; node ids are
//! already a topological order, so backpropagation is a single reverse
//! sweep.

mod adam;
mod array;
mod graph;

pub use adam::{adam_step, AdamState};
pub use array::NdArr;
pub use graph::{AutogradError, Graph, TensorId};

/// Element type of tensors: the float operations the kernels need plus a
/// matrix-multiply kernel.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    /// c(m x n, row-major) = alpha * a * b + beta * c, with explicit
    /// row/column strides for a and b so transposed operands need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: f32,
        a: &[f32], rsa: isize, csa: isize,
        b: &[f32], rsb: isize, csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: f64,
        a: &[f64], rsa: isize, csa: isize,
        b: &[f64], rsb: isize, csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
