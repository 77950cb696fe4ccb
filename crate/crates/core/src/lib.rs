//! Single-source open-domain generalization: style synthesis at a split
//! point of the encoder, learned pseudo-open sample aggregation, and the
//! training/evaluation engine around them.

pub mod backbone;
pub mod data;
pub mod engine;
pub mod error;
pub mod featstats;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod openmix;
pub mod params;
pub mod stylesynth;
pub mod tensor;

pub use backbone::{Architecture, Model, ModelConfig, OpenOptions, PosteriorVector, SplitDepth};
pub use error::{Error, Result};
pub use featstats::{FeatureMap, StatsConfig, StyleStats};
pub use losses::{AugmentedLabel, LossWeights};
pub use stylesynth::{NoiseSpec, StyleBand};
pub use tensor::Tensor;
