// `!(x > 0.0)` style checks reject NaN on purpose; casts through `Real`
// are identities only in the default f64 build.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

pub mod error;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod render;

pub use error::{FwdError, Result};
pub use fwd_tensor::Real;
