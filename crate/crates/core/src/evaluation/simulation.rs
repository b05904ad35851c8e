use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_sort_keys, evaluate, AccuracyReport};
use crate::error::{Error, Result};
use crate::individual::{aggregate, Cell, IndividualTable, Record};
use crate::pipeline::{generate, PipelineConfig};
use crate::rng::SeededRng;
use crate::schema::{FeatureSchema, Schema};
use crate::stats::std_normal_quantile;

/// Unit sizes, drawn log-uniformly from `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitSizes {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFeature {
    pub name: String,
    pub classes: usize,
    pub batch: usize,
    #[serde(default)]
    pub ordinal: bool,
}

impl SimulationFeature {
    pub fn new(name: &str, classes: usize, batch: usize, ordinal: bool) -> Self {
        SimulationFeature { name: name.into(), classes, batch, ordinal }
    }
}

/// Synthetic ground truth from a latent Gaussian threshold model. Persons
/// of a unit live in consecutive blocks of `block_size`. Person `k` in
/// block `b` of unit `m` has, per feature `d`, the latent value
///
/// ```text
/// z = τ (√ρ G_m + √(1−ρ) E_md) + κ (√ρ H_b + √(1−ρ) F_bd) + √ρ g_k + √(1−ρ) e_kd
/// ```
///
/// with all of `G, E, H, F, g, e` standard normal, and falls in the class
/// whose interval of `z` contains it. Thresholds split the overall latent
/// law into equally likely classes. Large units pool many blocks, so their
/// class proportions are less extreme than those of small units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub units: usize,
    pub sizes: UnitSizes,
    /// Correlation between any two features' latents, at both levels.
    pub rho: f64,
    /// Spread of the unit-level shifts relative to the person-level noise.
    pub tau: f64,
    /// Spread of the block-level shifts.
    pub kappa: f64,
    pub block_size: usize,
    pub features: Vec<SimulationFeature>,
}

impl Default for SimulationConfig {
    /// 500 units of 5 to 150 persons with age and gender as core features,
    /// nine internet-usage indicators in batch 1 and income, education and
    /// ethnicity in batch 2.
    fn default() -> Self {
        let mut features =
            vec![SimulationFeature::new("age", 7, 0, true), SimulationFeature::new("gender", 2, 0, false)];
        for name in ["email", "social", "video", "news", "banking", "shopping", "gaming", "music", "maps"] {
            features.push(SimulationFeature::new(&format!("internet_{name}"), 2, 1, false));
        }
        features.push(SimulationFeature::new("income", 13, 2, true));
        features.push(SimulationFeature::new("education", 3, 2, true));
        features.push(SimulationFeature::new("ethnicity", 5, 2, false));
        SimulationConfig {
            units: 500,
            sizes: UnitSizes { min: 5, max: 150 },
            rho: 0.3,
            tau: 0.5,
            kappa: 1.0,
            block_size: 10,
            features,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.sizes.min == 0 || self.sizes.min > self.sizes.max {
            return Err(Error::InvalidArgument("simulation needs units > 0 and 0 < sizes.min <= sizes.max".into()));
        }
        let spread = |x: f64| x >= 0.0 && x.is_finite();
        if !(0.0..1.0).contains(&self.rho) || !spread(self.tau) || !spread(self.kappa) || self.block_size == 0 {
            return Err(Error::InvalidArgument(
                "simulation needs 0 <= rho < 1, tau >= 0, kappa >= 0 and block_size > 0".into(),
            ));
        }
        self.schema().map(|_| ())
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.features
                .iter()
                .map(|f| {
                    let labels: Vec<String> = (0..f.classes).map(|c| format!("c{c}")).collect();
                    let feature = FeatureSchema::categorical(&f.name, &labels, f.batch);
                    if f.ordinal {
                        feature.ordinal()
                    } else {
                        feature
                    }
                })
                .collect(),
        )
    }

    fn thresholds(&self) -> Vec<Vec<f64>> {
        let scale = (1.0 + self.tau * self.tau + self.kappa * self.kappa).sqrt();
        self.features
            .iter()
            .map(|f| (1..f.classes).map(|c| scale * std_normal_quantile(c as f64 / f.classes as f64)).collect())
            .collect()
    }
}

/// Draws the ground-truth individual table for `seed`.
pub fn generate_truth(config: &SimulationConfig, seed: u64) -> Result<(Schema, IndividualTable)> {
    config.validate()?;
    let schema = config.schema()?;
    let seeds = SeededRng::new(seed);
    let mut size_rng = seeds.stream("simulation/sizes", "");
    let (lo, hi) = ((config.sizes.min as f64).ln(), (config.sizes.max as f64 + 1.0).ln());
    let sizes: Vec<usize> = (0..config.units)
        .map(|_| {
            ((lo + (hi - lo) * size_rng.random::<f64>()).exp().floor() as usize)
                .clamp(config.sizes.min, config.sizes.max)
        })
        .collect();
    let thresholds = config.thresholds();
    let (shared, own) = (config.rho.sqrt(), (1.0 - config.rho).sqrt());
    let d = config.features.len();
    let units: Vec<Vec<Record>> = sizes
        .par_iter()
        .enumerate()
        .map(|(m, &n)| {
            let unit_id = format!("U{:04}", m + 1);
            let mut rng = seeds.stream("simulation/truth", &unit_id);
            let common: f64 = rng.sample(StandardNormal);
            let shift: Vec<f64> =
                (0..d).map(|_| config.tau * (shared * common + own * rng.sample::<f64, _>(StandardNormal))).collect();
            let mut block = vec![0.0; d];
            (0..n)
                .map(|k| {
                    if k % config.block_size == 0 {
                        let h: f64 = rng.sample(StandardNormal);
                        for (b, s) in block.iter_mut().zip(&shift) {
                            *b = s + config.kappa * (shared * h + own * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    let g: f64 = rng.sample(StandardNormal);
                    let cells = (0..d)
                        .map(|j| {
                            let z = block[j] + shared * g + own * rng.sample::<f64, _>(StandardNormal);
                            Cell::Class(thresholds[j].partition_point(|&t| t < z))
                        })
                        .collect();
                    Record { unit_id: unit_id.clone(), person_index: k, cells }
                })
                .collect()
        })
        .collect();
    let table = IndividualTable { columns: (0..d).collect(), rows: units.into_iter().flatten().collect() };
    Ok((schema, table))
}

/// Accuracy of one simulated run with and without outlier removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub seed: u64,
    pub with_outlier_removal: AccuracyReport,
    pub without_outlier_removal: AccuracyReport,
}

/// Draws a truth table, aggregates it, reconstructs it twice (outlier
/// removal on and off, everything else from `pipeline` with its seed
/// replaced by `seed`) and scores both reconstructions.
pub fn run_simulation_study(config: &SimulationConfig, seed: u64, pipeline: &PipelineConfig) -> Result<StudyOutcome> {
    let (schema, truth) = generate_truth(config, seed)?;
    let coarse = aggregate(&truth, &schema)?;
    let keys = default_sort_keys(&schema);
    let mut reports = [true, false].into_iter().map(|outlier_removal| {
        let run = PipelineConfig { seed, outlier_removal, ..pipeline.clone() };
        let out = generate(&coarse, &schema, &run)?;
        evaluate(&truth, &out.individuals, &schema, &keys)
    });
    let with_outlier_removal = reports.next().expect("two runs")?;
    let without_outlier_removal = reports.next().expect("two runs")?;
    Ok(StudyOutcome { seed, with_outlier_removal, without_outlier_removal })
}
