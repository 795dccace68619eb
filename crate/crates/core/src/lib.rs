//! Bilateral-grid splatting and slicing with analytic gradients, edge-aware
//! filtering and upsampling, keypoint-driven dense displacement fields,
//! deformation utilities and registration metrics.

pub mod deform;
pub mod error;
pub mod interp;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod splat;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use io::{Image, KeypointSet};
pub use kernel::Kernel;
pub use metrics::LabelMask;
pub use pipeline::{GridParams, GuidanceMode};
pub use solver::{DisplacementField, InpaintConfig};
pub use splat::{BilateralGrid, SamplingGrid};
pub use tensor::{DType, Tensor};
