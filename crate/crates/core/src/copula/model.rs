use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::correlation::{estimate_correlation, pooled_sd, CorrelationMatrix};
use super::marginal::{fit_unit_marginals, Marginal, MarginalSampler, MarginalSpec, SdMode};
use crate::coarse::CoarseTable;
use crate::error::{Error, Result};
use crate::individual::{Cell, IndividualTable, Record};
use crate::rng::SeededRng;
use crate::schema::{Coordinate, Schema};
use crate::stats::std_normal_cdf;

/// Largest double below 1; uniforms are kept inside `(0, 1)`.
const MAX_UNIFORM: f64 = 1.0 - f64::EPSILON / 2.0;

/// Below this total the beta draws of a categorical feature carry no usable
/// direction and the unit's own proportions are used instead.
const MIN_DRAW_MASS: f64 = 1e-12;

/// A Gaussian copula with fixed marginals: `z = L ε`, `u = Φ(z)`,
/// `y = F⁻¹(u)`.
#[derive(Debug, Clone)]
pub struct GaussianCopula<'a> {
    correlation: &'a CorrelationMatrix,
    samplers: Vec<MarginalSampler>,
}

impl<'a> GaussianCopula<'a> {
    pub fn new(correlation: &'a CorrelationMatrix, marginals: &[Marginal]) -> Result<Self> {
        if marginals.len() != correlation.dim() {
            return Err(Error::InvalidArgument(format!(
                "{} marginals for a {}-dimensional correlation matrix",
                marginals.len(),
                correlation.dim()
            )));
        }
        Ok(GaussianCopula { correlation, samplers: marginals.iter().map(Marginal::sampler).collect() })
    }

    pub fn dim(&self) -> usize {
        self.samplers.len()
    }

    /// Fills `out` with one draw. `eps` and `z` are scratch buffers of
    /// length `dim`.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, eps: &mut [f64], z: &mut [f64], out: &mut [f64]) {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        self.correlation.correlate(eps, z);
        for ((y, &zd), sampler) in out.iter_mut().zip(z.iter()).zip(&self.samplers) {
            let u = std_normal_cdf(zd).clamp(f64::MIN_POSITIVE, MAX_UNIFORM);
            *y = sampler.quantile(u);
        }
    }

    /// `n` draws, one vector per draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut eps = vec![0.0; d];
        let mut z = vec![0.0; d];
        (0..n)
            .map(|_| {
                let mut y = vec![0.0; d];
                self.draw_into(rng, &mut eps, &mut z, &mut y);
                y
            })
            .collect()
    }
}

/// Where a model's correlation matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSource {
    /// Estimated from unflagged units.
    Estimated,
    /// Too few unflagged units to estimate; coordinates treated as independent.
    IdentityFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMarginals {
    pub unit_id: String,
    pub population: usize,
    /// One spec per model coordinate.
    pub marginals: Vec<MarginalSpec>,
}

/// A fitted copula over a subset of the schema's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    /// Schema feature indices, in column order.
    pub features: Vec<usize>,
    pub coordinates: Vec<Coordinate>,
    /// Human-readable coordinate names (`feature:class` or `feature`).
    pub labels: Vec<String>,
    pub correlation: CorrelationMatrix,
    pub correlation_source: CorrelationSource,
    /// Standard deviation of each coordinate across unflagged units.
    pub pooled_sigma: Vec<f64>,
    pub sd_mode: SdMode,
    pub units: Vec<UnitMarginals>,
}

impl CopulaModel {
    /// Estimates the correlation and pooled deviations from the units not in
    /// `exclude`, then solves every unit's marginals, flagged units included.
    pub fn fit(
        coarse: &CoarseTable,
        schema: &Schema,
        features: &[usize],
        exclude: &BTreeSet<String>,
        sd_mode: SdMode,
    ) -> Result<Self> {
        let coordinates = schema.coordinates(features);
        let (correlation, correlation_source) = match estimate_correlation(coarse, &coordinates, exclude) {
            Ok(c) => (c, CorrelationSource::Estimated),
            Err(Error::TooFewUnits { .. }) => {
                (CorrelationMatrix::identity(coordinates.len()), CorrelationSource::IdentityFallback)
            }
            Err(e) => return Err(e),
        };
        let pooled_sigma = pooled_sd(coarse, &coordinates, exclude);
        let marginals = fit_unit_marginals(coarse, &coordinates, &pooled_sigma, sd_mode)?;
        let units = coarse
            .units
            .iter()
            .zip(marginals)
            .map(|(u, marginals)| UnitMarginals { unit_id: u.unit_id.clone(), population: u.population, marginals })
            .collect();
        Ok(CopulaModel {
            features: features.to_vec(),
            labels: coordinates.iter().map(|&c| schema.coordinate_label(c)).collect(),
            coordinates,
            correlation,
            correlation_source,
            pooled_sigma,
            sd_mode,
            units,
        })
    }

    pub fn dim(&self) -> usize {
        self.coordinates.len()
    }

    /// Checks the model against `schema` after deserialization.
    pub fn check(&self, schema: &Schema) -> Result<()> {
        let expected = schema.coordinates(&self.features);
        if self.features.iter().any(|&f| f >= schema.len()) || expected != self.coordinates {
            return Err(Error::InvalidArgument("model coordinates do not match the schema".into()));
        }
        if self.correlation.dim() != self.dim() {
            return Err(Error::InvalidArgument("correlation dimension does not match coordinates".into()));
        }
        if let Some(u) = self.units.iter().find(|u| u.marginals.len() != self.dim()) {
            return Err(Error::InvalidArgument(format!("unit `{}` lacks marginals for some coordinates", u.unit_id)));
        }
        Ok(())
    }

    /// Draws `n_m` individuals for unit `unit`: one probability vector per
    /// categorical feature (renormalized beta draws) and one real per
    /// continuous feature.
    pub fn sample_unit<R: Rng + ?Sized>(&self, schema: &Schema, unit: usize, rng: &mut R) -> Result<Vec<Record>> {
        let spec = &self.units[unit];
        let marginals: Vec<Marginal> = spec.marginals.iter().map(|m| m.marginal).collect();
        let copula = GaussianCopula::new(&self.correlation, &marginals)?;
        let spans = self.feature_spans(schema);
        let d = self.dim();
        let (mut eps, mut z, mut y) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut rows = Vec::with_capacity(spec.population);
        for k in 0..spec.population {
            copula.draw_into(rng, &mut eps, &mut z, &mut y);
            if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite draw for `{}` in unit `{}`",
                    self.labels[bad], spec.unit_id
                )));
            }
            let cells = spans
                .iter()
                .map(|&(start, end, categorical)| {
                    if categorical {
                        Cell::Probs(normalize_draws(&y[start..end], &spec.marginals[start..end]))
                    } else {
                        Cell::Real(y[start])
                    }
                })
                .collect();
            rows.push(Record { unit_id: spec.unit_id.clone(), person_index: k, cells });
        }
        Ok(rows)
    }

    /// Samples every unit, each from its own `(phase, unit_id)` stream.
    /// Units run in parallel; the output is in unit order.
    pub fn sample_table(&self, schema: &Schema, seeds: &SeededRng, phase: &str) -> Result<IndividualTable> {
        let fragments = (0..self.units.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds.stream(phase, &self.units[i].unit_id);
                self.sample_unit(schema, i, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = IndividualTable::new(self.features.clone());
        table.rows = fragments.into_iter().flatten().collect();
        Ok(table)
    }

    /// `(start, end, categorical)` coordinate ranges, one per feature.
    fn feature_spans(&self, schema: &Schema) -> Vec<(usize, usize, bool)> {
        let mut spans = Vec::with_capacity(self.features.len());
        let mut start = 0;
        for &f in &self.features {
            let width = schema.feature(f).num_classes().unwrap_or(1);
            spans.push((start, start + width, schema.feature(f).is_categorical()));
            start += width;
        }
        spans
    }
}

fn normalize_draws(draws: &[f64], specs: &[MarginalSpec]) -> Vec<f64> {
    let total: f64 = draws.iter().sum();
    if total >= MIN_DRAW_MASS {
        return draws.iter().map(|v| v / total).collect();
    }
    let fallback: f64 = specs.iter().map(|s| s.source_mean).sum();
    specs.iter().map(|s| s.source_mean / fallback).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::{AggregateValue, AggregationUnit};
    use crate::schema::FeatureSchema;
    use crate::stats;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    fn schema() -> Schema {
        Schema::new(vec![
            FeatureSchema::categorical("gender", &["M", "F"], 0),
            FeatureSchema::continuous("income", 0),
            FeatureSchema::categorical("edu", &["low", "mid", "high"], 1),
        ])
        .unwrap()
    }

    fn coarse(m: usize) -> CoarseTable {
        CoarseTable::new(
            (0..m)
                .map(|i| {
                    let p = 0.2 + 0.6 * (i as f64 / m as f64);
                    let q = 0.1 + 0.3 * ((i * 7 % m) as f64 / m as f64);
                    AggregationUnit {
                        unit_id: format!("u{i:02}"),
                        population: 5 + i,
                        values: vec![
                            AggregateValue::Proportions(vec![p, 1.0 - p]),
                            AggregateValue::Mean(30_000.0 + 1000.0 * i as f64),
                            AggregateValue::Proportions(vec![q, 0.5, 0.5 - q]),
                        ],
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn identity_beta22_draws_are_uncorrelated() {
        let corr = CorrelationMatrix::identity(3);
        let m = Marginal::Beta { alpha: 2.0, beta: 2.0 };
        let copula = GaussianCopula::new(&corr, &[m, m, m]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draws = copula.sample(100_000, &mut rng);
        let col = |j: usize| draws.iter().map(|r| r[j]).collect::<Vec<_>>();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let r = stats::pearson(&col(i), &col(j)).unwrap();
            assert!(r.abs() < 0.03, "r = {r}");
        }
    }

    #[test]
    fn rank_correlation_follows_gaussian_identity() {
        let corr = CorrelationMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0])).unwrap();
        let m =
            [Marginal::LogNormal { mu_log: 1.0, sigma_log: 0.7 }, Marginal::LogNormal { mu_log: -2.0, sigma_log: 1.5 }];
        let copula = GaussianCopula::new(&corr, &m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let draws = copula.sample(100_000, &mut rng);
        let a: Vec<f64> = draws.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = draws.iter().map(|r| r[1]).collect();
        let expected = 6.0 / std::f64::consts::PI * (0.4f64).asin();
        assert!((stats::spearman(&a, &b).unwrap() - expected).abs() < 0.03);
    }

    #[test]
    fn marginal_ks_within_band() {
        let corr = CorrelationMatrix::from_rows(&[vec![1.0, -0.5], vec![-0.5, 1.0]]).unwrap();
        let m = [Marginal::Beta { alpha: 0.7, beta: 3.0 }, Marginal::LogNormal { mu_log: 10.0, sigma_log: 0.5 }];
        let copula = GaussianCopula::new(&corr, &m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let draws = copula.sample(10_000, &mut rng);
        for (j, marginal) in m.iter().enumerate() {
            let col: Vec<f64> = draws.iter().map(|r| r[j]).collect();
            let d = stats::ks_statistic(&col, |x| marginal.cdf(x));
            assert!(d < 1.63 / 100.0, "coordinate {j}: D = {d}");
        }
    }

    #[test]
    fn fit_covers_every_unit_and_coordinate() {
        let schema = schema();
        let model = CopulaModel::fit(&coarse(20), &schema, &[0, 1, 2], &BTreeSet::new(), SdMode::SqrtN).unwrap();
        assert_eq!(model.dim(), 6);
        assert_eq!(model.correlation.dim(), 6);
        assert_eq!(model.correlation_source, CorrelationSource::Estimated);
        assert_eq!(model.labels[5], "edu:high");
        assert!(model.units.iter().all(|u| u.marginals.len() == 6));
        model.check(&schema).unwrap();
    }

    #[test]
    fn few_units_fall_back_to_identity() {
        let model = CopulaModel::fit(&coarse(3), &schema(), &[0, 1], &BTreeSet::new(), SdMode::SqrtN).unwrap();
        assert_eq!(model.correlation_source, CorrelationSource::IdentityFallback);
        assert_eq!(model.correlation.repair_iterations(), 0);
    }

    #[test]
    fn sampled_table_shape_and_cells() {
        let schema = schema();
        let coarse = coarse(12);
        let model = CopulaModel::fit(&coarse, &schema, &[0, 1, 2], &BTreeSet::new(), SdMode::SqrtN).unwrap();
        let table = model.sample_table(&schema, &SeededRng::new(1), "test").unwrap();
        assert_eq!(table.len(), coarse.total_population());
        assert_eq!(table.columns, vec![0, 1, 2]);
        for row in &table.rows {
            match (&row.cells[0], &row.cells[1], &row.cells[2]) {
                (Cell::Probs(g), Cell::Real(x), Cell::Probs(e)) => {
                    assert_eq!(g.len(), 2);
                    assert_eq!(e.len(), 3);
                    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(*x > 0.0);
                }
                other => panic!("unexpected cells {other:?}"),
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_unit() {
        let schema = schema();
        let coarse = coarse(12);
        let model = CopulaModel::fit(&coarse, &schema, &[0, 1, 2], &BTreeSet::new(), SdMode::SqrtN).unwrap();
        let seeds = SeededRng::new(99);
        let a = model.sample_table(&schema, &seeds, "copula").unwrap();
        let b = model.sample_table(&schema, &seeds, "copula").unwrap();
        assert_eq!(a, b);
        let alone = model.sample_unit(&schema, 4, &mut seeds.stream("copula", "u04")).unwrap();
        let range = a.unit_ranges()[4].1.clone();
        assert_eq!(alone, a.rows[range]);
    }

    #[test]
    fn model_json_round_trip() {
        let schema = schema();
        let model = CopulaModel::fit(&coarse(15), &schema, &[0, 2], &BTreeSet::new(), SdMode::Paper).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: CopulaModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.units, model.units);
        assert_eq!(back.sd_mode, SdMode::Paper);
        for i in 0..model.dim() {
            for j in 0..model.dim() {
                assert_eq!(back.correlation.get(i, j), model.correlation.get(i, j));
            }
        }
        back.check(&schema).unwrap();
    }
}
