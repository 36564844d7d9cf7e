//! Reverse-mode automatic differentiation for small convolutional models.
//!
//! Values live on a [`Tape`]; every operation records a backward closure and
//! [`Tape::backward`] walks the records in reverse. Parameters are owned by a
//! [`ParamStore`] and enter a tape through [`Tape::param`].

mod conv;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;

pub use conv::Conv2dSpec;
pub use ops::{concat, sigmoid, sum_all};
pub use optim::{clip_grad_norm, Sgd};
pub use params::{full, kaiming_normal, normal, zeros, Param, ParamId, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Tensor, Var};
