//! Masked image modeling with principal-component masks (PMAE) and pixel-patch
//! masks (MAE) on a tiny vision transformer.
//!
//! The crate is organised bottom-up: [`tensor`] provides arrays and reverse-mode
//! differentiation, [`pca`] the covariance eigendecomposition, [`masking`] the
//! two mask families, [`vit`] the encoder/decoder, [`objectives`] the three
//! reconstruction losses and [`pipeline`] the pretraining and evaluation loops.

// NaN-rejecting `!(x > 0.0)` checks and index loops over coupled arrays are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod linalg;
pub mod masking;
pub mod objectives;
pub mod pca;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
