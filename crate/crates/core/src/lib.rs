//! Membership-inference auditing for vulnerability-prediction (VP) classifiers.
//!
//! The crate reproduces a shadow-model attack pipeline end to end:
//!
//! 1. [`corpus`]: load or synthesize a labeled code corpus and split it into
//!    four disjoint subsets (shadow/target × member/non-member).
//! 2. [`surrogate`]: train small VP classifiers (hash embedding, mean pool,
//!    one hidden layer) and expose logits, confidence, loss and embedding.
//! 3. [`features`]: assemble the eight attack feature combinations F1..F8.
//! 4. [`attack`]: train MLP and 1-D CNN membership classifiers.
//! 5. [`defense`]: inference-time output defenses (logit masking, loss
//!    clamping, Gaussian smoothing) and a MemGuard-style baseline.
//! 6. [`eval`]: accuracy/precision/recall/F1, ROC AUC, centroid distance and
//!    distribution summaries.
//!
//! [`pipeline`] wires the stages together from one seeded configuration.

pub mod adam;
pub mod attack;
pub mod corpus;
pub mod defense;
pub mod error;
pub mod eval;
pub mod features;
pub mod math;
pub mod mlp;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
