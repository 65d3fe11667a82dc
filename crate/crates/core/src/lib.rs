//! Toy reasoner/verifier reinforcement learning over modular arithmetic chains.
//!
//! The core is generic over the float type; [`Policy64`] and friends fix it to
//! `f64`. Best-of-k estimates also have an exact rational form.

pub mod advantage;
pub mod error;
pub mod features;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod scaling;
pub mod task;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
pub use features::{FeatureMap, SparseFeatures};
pub use policy::{Decoding, Head, HeadSet, Policy, Reference};
pub use scalar::Scalar;
pub use scaling::{BudgetSpec, Generator, Strategy};
pub use task::{Domain, Episode, TaskInstance, Token, Vocab};
pub use trainer::{Method, RunConfig, VerifierMode};
pub use verifier::{Scorer, ScoredSolution, ValueAggregation};

pub type Policy64 = Policy<f64>;
pub type Policy32 = Policy<f32>;
pub type Reference64 = Reference<f64>;
pub type Episode64 = Episode<f64>;
pub type ScoredSolution64 = ScoredSolution<f64>;
pub type RunArtifacts64 = trainer::RunArtifacts<f64>;
