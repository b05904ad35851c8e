use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coarse::CoarseTable;
use crate::error::{Error, Result};
use crate::schema::Coordinate;
use crate::stats::{std_normal_cdf, std_normal_quantile, BetaDist};

/// Lower bound on the beta variance.
pub const MIN_BETA_VARIANCE: f64 = 1e-6;
/// Upper bound on the beta variance as a fraction of `μ(1 − μ)`.
pub const BETA_VARIANCE_CEILING: f64 = 0.999;
/// Continuous means at or below zero are lifted to this value before the
/// lognormal solve. The continuous shift restores the exact mean afterwards.
pub const MIN_CONTINUOUS_MEAN: f64 = 1e-9;

/// Per-unit marginal law of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    LogNormal { mu_log: f64, sigma_log: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl Marginal {
    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::LogNormal { mu_log, sigma_log } => (mu_log + 0.5 * sigma_log * sigma_log).exp(),
            Marginal::Beta { alpha, beta } => alpha / (alpha + beta),
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            Marginal::LogNormal { sigma_log, .. } => self.mean() * (sigma_log * sigma_log).exp_m1().sqrt(),
            Marginal::Beta { alpha, beta } => {
                let s = alpha + beta;
                (alpha * beta / (s * s * (s + 1.0))).sqrt()
            }
        }
    }

    /// Precomputes what repeated quantile calls need.
    pub fn sampler(&self) -> MarginalSampler {
        match *self {
            Marginal::LogNormal { mu_log, sigma_log } => MarginalSampler::LogNormal { mu_log, sigma_log },
            Marginal::Beta { alpha, beta } => MarginalSampler::Beta(BetaDist::new(alpha, beta)),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.sampler().cdf(x)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        self.sampler().quantile(u)
    }
}

#[derive(Debug, Clone)]
pub enum MarginalSampler {
    LogNormal { mu_log: f64, sigma_log: f64 },
    Beta(BetaDist),
}

impl MarginalSampler {
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            MarginalSampler::LogNormal { mu_log, sigma_log } => {
                if x <= 0.0 {
                    0.0
                } else if *sigma_log == 0.0 {
                    if x.ln() >= *mu_log {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    std_normal_cdf((x.ln() - mu_log) / sigma_log)
                }
            }
            MarginalSampler::Beta(dist) => dist.cdf(x),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            MarginalSampler::LogNormal { mu_log, sigma_log } => {
                if *sigma_log == 0.0 {
                    mu_log.exp()
                } else {
                    (mu_log + sigma_log * std_normal_quantile(u)).exp()
                }
            }
            MarginalSampler::Beta(dist) => dist.quantile(u),
        }
    }
}

/// A unit's marginal for one coordinate along with the moments it was
/// solved from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub marginal: Marginal,
    pub source_mean: f64,
    pub source_sd: f64,
}

/// How a unit's standard deviation `σ_m` is derived from the pooled
/// standard deviation `σ` of the unit aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMode {
    /// `σ · √M · √n_m`
    Paper,
    /// `σ · √n_m`
    #[default]
    SqrtN,
    /// `σ`
    Pooled,
}

impl SdMode {
    /// `σ_m` for a unit of `population` persons among `num_units` units.
    pub fn unit_sd(self, pooled: f64, num_units: usize, population: usize) -> f64 {
        match self {
            SdMode::Paper => pooled * (num_units as f64).sqrt() * (population as f64).sqrt(),
            SdMode::SqrtN => pooled * (population as f64).sqrt(),
            SdMode::Pooled => pooled,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SdMode::Paper => "paper",
            SdMode::SqrtN => "sqrt_n",
            SdMode::Pooled => "pooled",
        }
    }
}

impl fmt::Display for SdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(SdMode::Paper),
            "sqrt_n" => Ok(SdMode::SqrtN),
            "pooled" => Ok(SdMode::Pooled),
            other => {
                Err(Error::InvalidArgument(format!("unknown sd mode `{other}` (expected paper, sqrt_n or pooled)")))
            }
        }
    }
}

/// Beta parameters matching `mean` and `sd`, with the variance clamped into
/// `[MIN_BETA_VARIANCE, 0.999 μ(1 − μ)]`.
pub fn solve_beta(mean: f64, sd: f64) -> Result<Marginal> {
    if !(mean > 0.0 && mean < 1.0) || !sd.is_finite() || sd < 0.0 {
        return Err(Error::InvalidArgument(format!("beta moments need 0 < mean < 1 and sd >= 0, got ({mean}, {sd})")));
    }
    let ceiling = BETA_VARIANCE_CEILING * mean * (1.0 - mean);
    let v = (sd * sd).max(MIN_BETA_VARIANCE).min(ceiling);
    let k = mean * (1.0 - mean) / v - 1.0;
    Ok(Marginal::Beta { alpha: mean * k, beta: (1.0 - mean) * k })
}

pub fn solve_lognormal(mean: f64, sd: f64) -> Result<Marginal> {
    if !(mean > 0.0) || !mean.is_finite() || !sd.is_finite() || sd < 0.0 {
        return Err(Error::InvalidArgument(format!("lognormal moments need mean > 0 and sd >= 0, got ({mean}, {sd})")));
    }
    let ratio = sd / mean;
    let sigma2 = (ratio * ratio).ln_1p();
    Ok(Marginal::LogNormal { mu_log: mean.ln() - 0.5 * sigma2, sigma_log: sigma2.sqrt() })
}

/// Solves one unit's marginals. Class proportions are clamped by half a
/// count, `[1/(2n), 1 − 1/(2n)]`, before the beta solve.
pub fn unit_marginals(
    population: usize,
    values: &[f64],
    coordinates: &[Coordinate],
    pooled_sd: &[f64],
    sd_mode: SdMode,
    num_units: usize,
) -> Result<Vec<MarginalSpec>> {
    let half = 0.5 / population as f64;
    coordinates
        .iter()
        .zip(values)
        .zip(pooled_sd)
        .map(|((coord, &value), &pooled)| {
            let sd = sd_mode.unit_sd(pooled, num_units, population);
            let (marginal, source_mean) = if coord.class.is_some() {
                let mean = value.clamp(half, 1.0 - half);
                (solve_beta(mean, sd)?, mean)
            } else if value <= MIN_CONTINUOUS_MEAN {
                (solve_lognormal(MIN_CONTINUOUS_MEAN, 0.0)?, value)
            } else {
                (solve_lognormal(value, sd)?, value)
            };
            Ok(MarginalSpec { marginal, source_mean, source_sd: sd })
        })
        .collect()
}

/// Marginals for every unit of `coarse`, in unit order.
pub fn fit_unit_marginals(
    coarse: &CoarseTable,
    coordinates: &[Coordinate],
    pooled_sd: &[f64],
    sd_mode: SdMode,
) -> Result<Vec<Vec<MarginalSpec>>> {
    coarse
        .units
        .iter()
        .map(|unit| {
            let values: Vec<f64> = coordinates.iter().map(|&c| unit.coordinate(c)).collect();
            unit_marginals(unit.population, &values, coordinates, pooled_sd, sd_mode, coarse.len())
                .map_err(|e| Error::Numerical(format!("unit `{}`: {e}", unit.unit_id)))
        })
        .collect()
}
