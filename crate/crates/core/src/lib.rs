//! Joint continuous angular refinement and TV-regularized 3D reconstruction
//! for single-particle cryo-EM.
//!
//! The pipeline alternates between a TV-regularized ADMM solve for the volume
//! expansion coefficients and a per-projection gradient-descent refinement of
//! the latent pose variables (three Euler angles and a continuous in-plane
//! shift), sharing one precomputed set of forward-model lookup tables.

pub mod admm;
pub mod basis;
pub mod bessel;
pub mod error;
pub mod fft;
pub mod forward;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod refine;
pub mod simulate;

#[cfg(test)]
pub(crate) mod testutil;

pub use basis::KbwfParams;
pub use error::CryoError;
pub use forward::{
    DetectorGrid, HthOperator, ProjectionImage, ProjectionStack, Psf, PsiTables, VolumeCoeffs,
};
pub use geometry::{EulerAngles, InPlaneShift, Pose, ProjMatrix};
pub use joint::{HalfSplitResult, IterRecord, JointConfig, RefinementTrace};
pub use metrics::{ErrorHistogram, FscCurve, PoseComponent};
pub use refine::{GdConfig, LatentRefiner, ProjDiagnostics};
pub use simulate::{Dataset, NoiseSpec, PsfConfig, SimConfig};
