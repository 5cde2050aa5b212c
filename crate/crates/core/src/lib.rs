//! Exact infinite-width neural network kernels.
//!
//! An architecture is declared once as a [`NetSpec`] tree. The same tree drives
//! three things:
//!
//! * [`kernel`]: the analytic NNGP covariance and neural tangent kernel of the
//!   infinitely wide network, obtained by translating every tensor operation
//!   into an operation on covariance matrices;
//! * [`finite`]: a finite-width realization (initialization, forward pass,
//!   reverse-mode gradients, Taylor jets, a full-batch trainer);
//! * [`empirical`]: Monte Carlo kernel estimates and weight-space Taylor
//!   expansions built on the finite networks.
//!
//! [`predict`] turns kernels into posterior predictions and gradient-descent
//! dynamics, and [`batching`] computes large Gram matrices block by block on
//! worker threads.

pub mod batch;
pub mod batching;
pub mod empirical;
mod error;
pub mod finite;
pub mod kernel;
pub(crate) mod linalg;
pub mod netspec;
pub mod predict;
pub mod rng;

pub use batch::Batch;
pub use error::{Error, Result};
pub use kernel::{kernel_fn, Get, Kernel, KernelFn, KernelFunction, KernelPair};
pub use netspec::{InputShape, Layer, NetSpec, Padding, Phi};
pub use rng::RngKey;
