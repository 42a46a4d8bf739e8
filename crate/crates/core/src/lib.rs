//! Implicit knowledge for multi-task networks.
//!
//! This crate implements learned observation-independent constant tensors
//! ("implicit representations") that are combined with network activations
//! by addition, multiplication, or concatenation; the three modeling
//! schemes that produce them (direct vector, linear generator, matrix
//! factorization); their neutral initialization; inference-time folding of
//! the constants into convolution weights and biases; and a desk-scale
//! unified multi-task detector used to exercise all of it.
//!
//! Everything numeric is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); `f64` is the default precision and has concrete
//! aliases at the crate root.

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod implicit;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Default-precision autodiff tape.
pub type Tape64 = Tape<f64>;
/// Default-precision network graph.
pub type Network64 = network::NetworkGraph<f64>;
