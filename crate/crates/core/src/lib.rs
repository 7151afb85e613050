//! Computational distributed fiber-optic sensing.
//!
//! Binary Walsh-Hadamard (or random) pulse patterns are launched into a fiber
//! and the backscattered or Brillouin-amplified light is integrated into one
//! bucket value per pattern. Correlating the buckets with the known patterns
//! recovers the distributed response at a digitizer rate of one sample per
//! sequence instead of one per resolution cell.
//!
//! - [`patterns`]: Hadamard matrices, pattern pairs and their references.
//! - [`fiber`]: segment-wise fiber model and the single-pulse trace oracle.
//! - [`acquisition`]: bucket detection, noise, quantization, sections and shifts.
//! - [`reconstruction`]: DGI and inverse Walsh-Hadamard estimators, interleaving
//!   and stitching.
//! - [`spectroscopy`]: frequency sweeps, Lorentzian fits, edge widths.

pub mod acquisition;
pub mod error;
pub mod fiber;
pub mod patterns;
pub mod reconstruction;
pub mod spectroscopy;

pub use error::{Error, Result};
