//! Individual-level records rebuilt from aggregated tables.
//!
//! Each aggregation unit reports class shares and means for a set of features.
//! [`pipeline::generate`] fits a Gaussian copula per feature batch, joins the
//! batches with trained predictors and then rescales every unit so that its
//! rows reproduce the published aggregates exactly.

pub mod batching;
pub mod coarse;
pub mod copula;
pub mod error;
pub mod evaluation;
pub mod individual;
pub mod matching;
pub mod outlier;
pub mod pipeline;
pub mod rng;
pub mod scaling;
pub mod schema;
pub mod stats;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/outliers.md")]
    mod outliers {}
    #[doc = include_str!("../../../book/src/copula.md")]
    mod copula {}
    #[doc = include_str!("../../../book/src/batching.md")]
    mod batching {}
    #[doc = include_str!("../../../book/src/scaling.md")]
    mod scaling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
