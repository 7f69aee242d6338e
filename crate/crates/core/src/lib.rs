//! Confidence estimation for language-model answers from the stability of
//! their final hidden states under adversarial perturbation.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`probe_data`] reads dumps of final hidden states and the LM head
//!    (or [`toy_lm`] generates synthetic ones);
//! 2. [`perturbation`] pushes each token's state along the gradient that
//!    most quickly lowers the token's probability;
//! 3. [`features`] summarises the resulting trajectory as 75 numbers;
//! 4. [`net`] trains a small encoder and classifier head on those features,
//!    and [`metrics`] scores the resulting confidences.

pub mod error;
pub mod feature_file;
pub mod features;
pub mod metrics;
pub mod msp;
pub mod net;
pub mod perturbation;
pub mod probe_data;
pub mod toy_lm;

pub use error::{Error, Result};
pub use features::{extract, FeatureMatrix, FeatureVector, FEATURE_DIM};
pub use perturbation::{compute_jacobian, compute_logits, perturb, PerturbationConfig, TokenTrajectory};
pub use probe_data::{read_dump, write_dump, AnswerFormat, AnswerRecord, LmHead, ProbeManifest};
