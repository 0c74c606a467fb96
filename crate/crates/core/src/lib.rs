//! A small laboratory for studying mode collapse in GANs on 2D mixture
//! data, built around a diversity penalty that ties the pairwise
//! similarity of generated outputs to the pairwise similarity of the
//! latent vectors that produced them.
//!
//! The numeric core (`tensor`, `tape`, `similarity`) is generic over the
//! scalar type through [`scalar::Real`]; the concrete aliases below fix
//! `f64`, which every experiment here uses.

pub mod adam;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod plot;
pub mod scalar;
pub mod similarity;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision autodiff tape.
pub type Tape = tape::Tape<f64>;
pub use tape::Gradients;
/// Default-precision similarity matrix.
pub type SimilarityMatrix = similarity::SimilarityMatrix<f64>;
/// Default-precision Adam hyper-parameters.
pub type AdamHyper = adam::AdamHyper<f64>;
/// Default-precision Adam state.
pub type AdamState = adam::AdamState<f64>;
