//! Exact and Monte Carlo checks of policy-gradient identities on finite-horizon
//! tabular MDPs with softmax policies.
//!
//! The crate computes `∇J(θ)` three independent ways (prefix-measure sums,
//! full-return sums, and a backward `Q` recursion), compares them against
//! central finite differences, checks that score terms paired with earlier
//! rewards have zero expectation, and measures how reward-to-go estimators
//! compare with full-return estimators on shared samples.

pub mod cli;
pub mod error;
pub mod estimate;
pub mod exact;
pub mod instance;
pub mod mdp;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod sum;
pub mod train;

pub use error::{Error, Result};
pub use estimate::{EstimatorKind, GradEstimate, VarianceReport};
pub use exact::{QTable, VTable};
pub use mdp::{Mdp, Prefix, Trajectory};
pub use policy::{GradientVector, SoftmaxPolicy};
pub use train::{GradientSource, TrainConfig, TrainHistory};
