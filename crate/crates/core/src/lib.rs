//! Evaluation engine and pipeline toolkit for rib-fracture detection and
//! classification on CT volumes.
//!
//! - [`io`]: NIfTI-1 and raw volume formats, instance metadata CSV.
//! - [`labeling`]: connected components, small-component removal, dilation.
//! - [`detect`]: IoU hit matching, FROC, overlap summaries.
//! - [`classify`]: detection-aware 5x6 confusion matrix and F1 variants.
//! - [`pipeline`]: windowing, point sampling, sliding windows, proposals.
//! - [`fusion`]: point-to-voxel feature fusion with analytic gradients.
//! - [`report`]: serializable report structures.

pub mod classify;
pub mod detect;
pub mod error;
pub mod fusion;
pub mod io;
pub mod labeling;
pub mod pipeline;
pub mod report;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, LabelMap, Spacing, Volume, VolumeKind};
