//! Reverse-mode autodiff engine, the variational encoder-decoder that maps
//! a front-view image to a top-view semantic grid, and latent-space PCA.

pub mod adam;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod latent;
pub mod tensor;
pub mod ved;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use latent::{pca_fit, perturb_axis, Pca};
pub use tensor::{BatchNormState, Graph, Mode, Tensor, Var};
pub use ved::{Ved, VedConfig, VedMapper};
