//! Gradual test-time adaptation on a synthetic corruption benchmark.
//!
//! The toolkit adapts a source-trained classifier to shifting test
//! distributions online. Two intermediate-domain generators are provided
//! (input-space mixup toward the test batch, and AdaIN-style feature
//! transfer), combined with confidence-filtered self-training. BatchNorm
//! statistic baselines and continual / gradual / single-sample evaluation
//! protocols round out the benchmark.

pub mod bn_adapt;
pub mod engine;
pub mod error;
pub mod harness;
pub mod mixup_domain;
pub mod model;
pub mod nn;
pub mod self_training;
pub mod style_transfer;
pub mod toy_data;

pub use error::{GttaError, Result};
