//! Policy evaluation and learning for a target domain that observes
//! covariates only, borrowing treatments and outcomes from a labeled source
//! domain under covariate shift.
//!
//! - [`dataset`]: combined source/target storage, validation, CSV I/O.
//! - [`nuisance`]: outcome regressions, propensity and sampling scores.
//! - [`estimators`]: Direct, IPW and semiparametric-efficient reward estimators.
//! - [`policy`]: linear-logistic policies, the oracle rule and the learner.
//! - [`simulate`]: the synthetic benchmark generator.
//! - [`experiment`], [`metrics`], [`stats`]: replicated experiments and reporting.

pub mod dataset;
pub mod estimators;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod nuisance;
pub mod policy;
pub mod simulate;
pub mod stats;

pub use dataset::{CombinedDataset, PotentialOutcomes};
pub use estimators::{estimate, Estimand, EstimatorKind, RewardCoefficients, RewardEstimate};
pub use nuisance::{fit_nuisances, NuisanceConfig, NuisanceSet};
pub use policy::{learn_policy, LearnerConfig, Policy};
