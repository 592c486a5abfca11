//! Front-view camera data to top-view semantic occupancy grids.
//!
//! The crate covers the geometric side of the toolkit: the grid data model
//! and its file format, pinhole camera geometry, weak ground-truth
//! generation from labeled disparity, the flat-plane monocular baseline,
//! image perturbations, the synthetic scene generator and the evaluation
//! metrics shared by every mapper.

pub mod camera;
pub mod error;
pub mod flatplane;
pub mod grid;
pub mod gt;
pub mod imageio;
pub mod metrics;
pub mod par;
pub mod perturb;
pub mod synth;

pub use camera::{CameraRig, Intrinsics};
pub use error::{Error, Result};
pub use grid::{GridMap, GridSpec, SemanticClass};
pub use gt::ClassMapping;
pub use imageio::{Image, LabelImage, DisparityImage, RgbImage};
pub use metrics::ConfusionMatrix;
