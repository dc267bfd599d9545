//! Bayesian profile regression: a truncated Dirichlet-process mixture of
//! Bernoulli covariate profiles linked to a logistic response through shared
//! cluster assignments, fitted by full-rank Gaussian stochastic variational
//! inference, with a random-walk Metropolis reference sampler and a
//! bias/coverage simulation harness.

pub mod data;
pub mod error;
pub mod math;
pub mod mcmc;
pub mod model;
pub mod posterior;
pub mod sim;
pub mod svi;
pub mod transforms;

pub use data::{BatchView, CohortData};
pub use error::{BprError, Result};
pub use model::{ConstrainedParams, ModelConfig};
pub use svi::{FitTrace, SviConfig, VariationalState};
pub use transforms::{ParamLayout, ParamVector};
