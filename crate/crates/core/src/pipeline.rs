//! The four phases end to end: outlier flagging, copula sampling of the
//! core features, batch merging and marginal scaling.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{extend_with_batch, fit_predictor, partition_batches, Phase3Mode, Predictor, TrainingConfig};
use crate::coarse::CoarseTable;
use crate::copula::{CopulaModel, CorrelationSource, SdMode};
use crate::error::{Error, Result, StageExt};
use crate::individual::IndividualTable;
use crate::outlier::{flag_outliers, score_units, OutlierReport, DEFAULT_CONTAMINATION};
use crate::rng::SeededRng;
use crate::scaling::scale_to_marginals;
use crate::schema::Schema;

/// Default cap on predictor training rows.
pub const DEFAULT_MAX_TRAINING_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sd_mode: SdMode,
    pub outlier_removal: bool,
    pub contamination: f64,
    pub phase3: Phase3Mode,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            sd_mode: SdMode::default(),
            outlier_removal: true,
            contamination: DEFAULT_CONTAMINATION,
            phase3: Phase3Mode::default(),
            training: TrainingConfig { max_rows: Some(DEFAULT_MAX_TRAINING_ROWS), ..TrainingConfig::default() },
        }
    }
}

/// One non-core batch: its joint copula and a predictor per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchModel {
    pub batch: usize,
    pub copula: CopulaModel,
    pub predictors: Vec<Predictor>,
}

/// Everything fitted in phases 1 to 3. Reusable to generate again without
/// refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub feature_names: Vec<String>,
    pub flagged_units: BTreeSet<String>,
    pub core: CopulaModel,
    pub batches: Vec<BatchModel>,
}

impl FittedModels {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str, schema: &Schema) -> Result<Self> {
        let models: FittedModels = serde_json::from_str(text)?;
        models.check(schema)?;
        Ok(models)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>, schema: &Schema) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, schema).stage("load_model")
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        let names: Vec<&str> = schema.features().iter().map(|f| f.name.as_str()).collect();
        if names != self.feature_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("model was fitted on a different schema".into()));
        }
        self.core.check(schema)?;
        for b in &self.batches {
            b.copula.check(schema)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub individuals: IndividualTable,
    pub models: FittedModels,
    pub outliers: OutlierReport,
    pub timings: Vec<PhaseTiming>,
}

struct Timer(Vec<PhaseTiming>);

impl Timer {
    fn run<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(PhaseTiming { phase: phase.to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }
}

/// Phase 1 alone.
pub fn detect_outliers(coarse: &CoarseTable, schema: &Schema, config: &PipelineConfig) -> Result<OutlierReport> {
    if !config.outlier_removal {
        return Ok(OutlierReport::empty(coarse));
    }
    flag_outliers(&score_units(coarse, schema), config.contamination)
}

/// Fits every phase and generates the individual table.
pub fn generate(coarse: &CoarseTable, schema: &Schema, config: &PipelineConfig) -> Result<GenerateOutput> {
    coarse.validate(schema).stage("validate")?;
    if coarse.is_empty() {
        return Err(Error::Coarse("no aggregation units".into()).at("validate"));
    }
    let seeds = SeededRng::new(config.seed);
    let mut timer = Timer(Vec::new());
    let plan = partition_batches(schema);

    let outliers = timer.run("outliers", || detect_outliers(coarse, schema, config)).stage("outliers")?;
    let exclude = &outliers.flagged;

    let core = timer
        .run("copula_fit", || CopulaModel::fit(coarse, schema, &plan.core, exclude, config.sd_mode))
        .stage("copula")?;
    let mut individuals =
        timer.run("copula_sample", || core.sample_table(schema, &seeds, "copula/core")).stage("copula")?;

    let mut batches = Vec::with_capacity(plan.batches.len());
    for (j, features) in plan.batches.iter().enumerate() {
        let batch = j + 1;
        let (model, extended) = timer
            .run(&format!("batch{batch}"), || -> Result<_> {
                let mut joint = plan.core.clone();
                joint.extend(features);
                let copula = CopulaModel::fit(coarse, schema, &joint, exclude, config.sd_mode)?;
                let sample = copula.sample_table(schema, &seeds, &format!("copula/batch{batch}"))?;
                let predictors = features
                    .par_iter()
                    .map(|&target| {
                        let mut rng = seeds.stream("predictor", &schema.feature(target).name);
                        fit_predictor(&sample, schema, &plan.core, target, &config.training, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let extended = extend_with_batch(&individuals, schema, &predictors, config.phase3)?;
                Ok((BatchModel { batch, copula, predictors }, extended))
            })
            .stage("batching")?;
        individuals = extended;
        batches.push(model);
    }

    let individuals =
        timer.run("scaling", || scale_to_marginals(&individuals, coarse, schema, &seeds)).stage("scaling")?;
    let models = FittedModels {
        feature_names: schema.features().iter().map(|f| f.name.clone()).collect(),
        flagged_units: outliers.flagged.clone(),
        core,
        batches,
    };
    Ok(GenerateOutput { individuals, models, outliers, timings: timer.0 })
}

/// Generates from previously fitted models. The coarse data supplies the
/// budgets and means for the final phase and must cover the same units.
pub fn generate_from_models(
    coarse: &CoarseTable,
    schema: &Schema,
    models: &FittedModels,
    config: &PipelineConfig,
) -> Result<IndividualTable> {
    coarse.validate(schema).stage("validate")?;
    models.check(schema).stage("load_model")?;
    let same_units = models.core.units.len() == coarse.len()
        && models
            .core
            .units
            .iter()
            .zip(&coarse.units)
            .all(|(m, u)| m.unit_id == u.unit_id && m.population == u.population);
    if !same_units {
        return Err(Error::InvalidArgument("model units do not match the coarse data".into()).at("load_model"));
    }
    let seeds = SeededRng::new(config.seed);
    let mut individuals = models.core.sample_table(schema, &seeds, "copula/core").stage("copula")?;
    for batch in &models.batches {
        individuals = extend_with_batch(&individuals, schema, &batch.predictors, config.phase3).stage("batching")?;
    }
    scale_to_marginals(&individuals, coarse, schema, &seeds).stage("scaling")
}

/// Run record written beside the generated CSV. Holds only values fixed by
/// the inputs and configuration, so identical runs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub sd_mode: SdMode,
    pub outlier_removal: bool,
    pub contamination: f64,
    pub phase3: Phase3Mode,
    pub training: TrainingConfig,
    pub decisions: BTreeMap<String, String>,
    pub units: usize,
    pub rows: usize,
    pub flagged_units: Vec<String>,
    pub correlation_sources: BTreeMap<String, CorrelationSource>,
}

impl Manifest {
    pub fn new(config: &PipelineConfig, coarse: &CoarseTable, models: &FittedModels, rows: usize) -> Self {
        let mut correlation_sources = BTreeMap::new();
        correlation_sources.insert("core".to_string(), models.core.correlation_source);
        for b in &models.batches {
            correlation_sources.insert(format!("batch{}", b.batch), b.copula.correlation_source);
        }
        Manifest {
            tool: "sync".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            sd_mode: config.sd_mode,
            outlier_removal: config.outlier_removal,
            contamination: config.contamination,
            phase3: config.phase3,
            training: config.training.clone(),
            decisions: decisions(),
            units: coarse.len(),
            rows,
            flagged_units: models.flagged_units.iter().cloned().collect(),
            correlation_sources,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail") + "\n"
    }
}

/// Fixed method choices, recorded so that a manifest identifies them.
pub fn decisions() -> BTreeMap<String, String> {
    [
        ("outlier_score", "ecdf_two_sided_tail_v1"),
        ("correlation_repair", "eigen_floor_1e-8_unit_diagonal_v1"),
        ("proportion_clamp", "half_count_v1"),
        ("beta_variance_clamp", "1e-6_to_0.999_mu_1mmu_v1"),
        ("categorical_draws", "renormalized_beta_v1"),
        ("predictor_inputs", "soft_probability_vectors_v1"),
        ("predictor_family", "softmax_linear_gd_and_ols_v1"),
        ("integerization", "largest_remainder_v1"),
        ("class_assignment", "budget_masking_person_index_order_v1"),
        ("continuous_shift", "floor_and_proportional_redistribution_v1"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}
