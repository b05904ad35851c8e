//! Gaussian copula modelling of the coarse data.
//!
//! The dependency between coordinates is a single correlation matrix
//! estimated across units. Each unit gets its own marginals, solved from the
//! unit's aggregate (the mean) and a standard deviation derived from the
//! pooled spread of the aggregates: beta for class proportions, lognormal
//! for continuous means. Sampling a unit then draws `z = L ε`, maps it to
//! uniforms `u = Φ(z)` and pushes those through the marginal quantiles.

mod correlation;
mod marginal;
mod model;

pub use correlation::{
    estimate_correlation, nearest_pd_repair, pooled_sd, CorrelationMatrix, COLLINEAR_CLIP, EIGEN_FLOOR,
    MAX_REPAIR_ITERATIONS,
};
pub use marginal::{
    fit_unit_marginals, solve_beta, solve_lognormal, unit_marginals, Marginal, MarginalSampler, MarginalSpec, SdMode,
    BETA_VARIANCE_CEILING, MIN_BETA_VARIANCE, MIN_CONTINUOUS_MEAN,
};
pub use model::{CopulaModel, CorrelationSource, GaussianCopula, UnitMarginals};
