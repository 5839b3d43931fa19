//! Spatio-temporal graph U-network for forecasting signals on a fixed graph.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autodiff tape
//! over dense `f64` tensors, Chebyshev graph convolution, deterministic
//! multilevel graph coarsening, graph-convolutional GRUs with dilation, the
//! U-shaped model, training, metrics and synthetic data. File formats and the
//! command-line front end live in the `stunet` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod cheb;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod init;
mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod partition;
pub mod recurrent;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Stunet, StunetConfig, Variant};
pub use graph::{Graph, GraphLaplacian, LambdaMax};
pub use tape::{Gradients, Reduce, Tape, Var};
pub use tensor::Tensor;
