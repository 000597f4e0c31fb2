//! Discovery of named, human-applicable binary text features.
//!
//! Candidates are proposed by an LLM from contrastive evidence, screened by
//! cross-rater Cohen's kappa, admitted by residual held-out balanced-accuracy
//! gain, and exported as an auditable codebook.

pub mod agreement;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fixtures;
pub mod gateway;
pub mod head;
pub mod pairing;
pub mod rng;
pub mod selection;
pub mod vectorize;

pub use error::{Error, Result};

/// Binary verdict vector, one entry per document.
pub type BinaryVec = Vec<u8>;
