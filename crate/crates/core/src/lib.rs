//! Integrated feature analysis for class activation maps.
//!
//! The toolkit works on feature archives (see [`archive`]) and provides:
//!
//! - weighted features for gradient-based CAM schemes ([`schemes`]),
//! - dataset-level distribution statistics for a common intensity scale ([`distribution`]),
//! - importance matrices and feature masks ([`importance`]),
//! - CAM composition with individual or common scaling ([`campipe`]),
//! - evaluation metrics ([`eval`]),
//! - a small reference CNN that produces archives end to end ([`refnet`]),
//! - PNG rendering ([`render`]).

pub mod archive;
pub mod campipe;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod importance;
pub mod refnet;
pub mod render;
pub mod schemes;

pub use error::{ErrorKind, IfaError, Result};
