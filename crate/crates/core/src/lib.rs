//! Automatic left-atrial scar segmentation from late gadolinium-enhanced MRI.
//!
//! The pipeline runs in stages, each living in its own module:
//!
//! - [`volume`]: 3D grids, the sidecar header format, resampling, morphology
//!   and synthetic phantoms.
//! - [`transform`]: affine, local-affine and B-spline free-form transforms.
//! - [`registration`]: hierarchical atlas-to-target registration driven by
//!   spatially encoded mutual information.
//! - [`fusion`]: majority vote, locally weighted and multi-scale patch label
//!   fusion.
//! - [`superpixel`]: per-slice SLIC over-segmentation.
//! - [`features`]: superpixel intensity statistics and mRMR selection.
//! - [`svm`]: RBF-kernel soft-margin SVM trained with SMO, grid search and
//!   validation protocols.
//! - [`metrics`]: overlap and surface-distance metrics, fibrosis extent and
//!   Bland-Altman agreement.
//! - [`pipeline`]: wall extraction, normalisation, ground-truth assembly,
//!   baselines and end-to-end cohort runs.

pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod registration;
pub mod superpixel;
pub mod svm;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
