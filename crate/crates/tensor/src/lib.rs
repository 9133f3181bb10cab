//! Dense row-major tensors with a tape for reverse-mode automatic
//! differentiation.
//!
//! Every differentiable computation in the workspace runs through a
//! [`Tape`]: operations on [`Var`] handles record their output value and a
//! backward closure, and [`Tape::backward`] replays the closures in reverse
//! recording order. Trainable state lives in a [`ParamStore`] and is
//! updated by [`Adam`].
//!
//! ```
//! use fwd_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! The scalar type is [`Real`]: `f64` by default, `f32` with the `f32`
//! feature.

mod error;
mod gemm;
mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::elementwise::{BinaryOp, UnaryOp};
pub use ops::spectral::power_iteration;
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardArgs, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Scalar type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type of every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;

/// Dense matrix product on raw row-major buffers, `c = a · b`.
///
/// Exposed for kernels outside the tape (the renderer, inference paths).
pub fn matmul_raw(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    gemm::gemm(
        m,
        k,
        n,
        a,
        gemm::Layout::row_major(k),
        b,
        gemm::Layout::row_major(n),
        &mut c,
        false,
    );
    c
}
