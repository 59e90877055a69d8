//! Volumetric CNN classification with layer-wise relevance propagation.
//!
//! The crate covers the whole offline pipeline: NIfTI I/O and atlases,
//! synthetic phantom cohorts, covariate residualization, a small 3D CNN
//! with exact gradients and ADAM training, relevance propagation, relevance
//! map analysis (clusters, slice profiles, region sums, occlusion) and the
//! evaluation protocol (ROC/AUC, Youden thresholds, cross-validation).

pub mod analyze;
pub mod atlas;
mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lrp;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod residualize;
pub mod subject;
pub mod volume;

pub use atlas::{load_atlas, Atlas};
pub use error::{Error, Result};
pub use nifti::{read_volume, write_volume};
pub use phantom::{generate_cohort, generate_phantom, Cohort, GroupCounts, PhantomSpec};
pub use residualize::{
    apply_residualizer, fit_residualizer, fit_scalar_residualizer, ResidualModel,
};
pub use subject::{Amyloid, FieldStrength, Group, Sex, SubjectRecord};
pub use volume::{Dims, Slice2D, Volume3D};
