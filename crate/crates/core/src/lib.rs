//! subnetscope: class-specific subnetwork extraction from a trained CNN
//! classifier via sparse channel control gates learned under a distillation
//! objective, plus the two downstream applications the gates enable —
//! subnetwork-swapped saliency explanation and class-specific Mahalanobis
//! adversarial detection.

pub mod advdetect;
pub mod data;
pub mod error;
pub mod explain;
pub mod extract;
pub mod signature;
pub mod model;
pub(crate) mod rngutil;
pub mod tensor;

pub use error::{Error, Result};
