//! Learned adaptive depth sampling for sparse-to-dense depth completion
//! over video.

pub mod baselines;
pub mod data;
pub mod depth;
pub mod error;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod rng;

pub use depth::{DepthMap, DepthSequence, RgbImage, SamplingBudget, SequenceFrame};
pub use error::{Error, Result};
pub use mask::{ProbabilityMap, SampleMask, Temperature};
