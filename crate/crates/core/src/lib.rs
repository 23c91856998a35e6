//! Core algorithms for latent-space visual decoding experiments:
//! deterministic toy generator/extractor oracles, two-stage latent
//! inversion (CMA-ES then RMSProp), ridge decoding, reconstruction
//! metrics, and ROI analyses.

pub mod cmaes;
pub mod dataio;
pub mod error;
pub mod gradopt;
pub mod inversion;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod roi;
pub mod ridge;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use oracle::{
    DenseVector, FeatureExtractorOracle, GeneratorOracle, GeneratorSpec, InstanceFeature,
    NoiseVector, ToyFeatureExtractor, ToyGenerator,
};
pub use tensor::FeatureMap;
