//! File persistence: MRC volumes/stacks, pose tables, and run metadata.

pub mod mrc;
pub mod poses;

use serde::{Deserialize, Serialize};

use crate::basis::KbwfParams;
use crate::error::CryoError;
use crate::simulate::NoiseSpec;

/// JSON sidecar describing a generated stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMetadata {
    /// Coefficient grid size.
    pub n: usize,
    /// Number of projections.
    pub p: usize,
    /// Detector size per axis.
    pub m: usize,
    /// Detector pixel spacing per axis.
    pub delta: [f64; 2],
    /// Noise standard deviation actually applied.
    pub sigma: f64,
    /// Noise specification requested.
    pub noise: NoiseSpec,
    /// Master seed.
    pub seed: u64,
    /// Basis parameters.
    pub basis: KbwfParams,
}

pub fn write_metadata(path: &std::path::Path, meta: &StackMetadata) -> Result<(), CryoError> {
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_metadata(path: &std::path::Path) -> Result<StackMetadata, CryoError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
