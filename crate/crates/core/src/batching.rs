//! Merging feature batches onto the core individuals.
//!
//! Each non-core batch `T_j` is sampled jointly with the core features `S`
//! from its own copula. A predictor of every batch feature given the core
//! cells is trained on that joint sample and then applied to the core
//! individuals, which receive the predicted distribution (or, for a
//! continuous feature, the predicted value) row by row.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::CoarseTable;
use crate::copula::{CopulaModel, SdMode};
use crate::error::{Error, Result};
use crate::individual::{Cell, IndividualTable};
use crate::rng::SeededRng;
use crate::schema::Schema;

/// Ridge added to the normal equations of continuous targets.
pub const OLS_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub core: Vec<usize>,
    /// `batches[j - 1]` holds the features of batch `j`.
    pub batches: Vec<Vec<usize>>,
}

pub fn partition_batches(schema: &Schema) -> BatchPlan {
    BatchPlan {
        core: schema.core_features(),
        batches: (1..=schema.num_batches()).map(|b| schema.batch_features(b)).collect(),
    }
}

/// What a categorical batch feature receives from its predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase3Mode {
    /// The full predicted distribution, resolved to a class later.
    #[default]
    Distribution,
    /// A one-hot vector on the most probable class.
    Argmax,
}

impl Phase3Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase3Mode::Distribution => "distribution",
            Phase3Mode::Argmax => "argmax",
        }
    }
}

impl fmt::Display for Phase3Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase3Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distribution" => Ok(Phase3Mode::Distribution),
            "argmax" => Ok(Phase3Mode::Argmax),
            other => {
                Err(Error::InvalidArgument(format!("unknown phase 3 mode `{other}` (expected argmax or distribution)")))
            }
        }
    }
}

/// Fits a copula on `features` (the core plus one batch) and samples every
/// unit from it.
pub fn sample_joint_batch(
    coarse: &CoarseTable,
    schema: &Schema,
    features: &[usize],
    exclude: &BTreeSet<String>,
    sd_mode: SdMode,
    seeds: &SeededRng,
    phase: &str,
) -> Result<(CopulaModel, IndividualTable)> {
    let model = CopulaModel::fit(coarse, schema, features, exclude, sd_mode)?;
    let table = model.sample_table(schema, seeds, phase)?;
    Ok((model, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iterations: usize,
    /// Gradient norm below which descent stops.
    pub tolerance: f64,
    /// Rows beyond this are subsampled away before training.
    pub max_rows: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { learning_rate: 0.1, l2: 1e-4, max_iterations: 2000, tolerance: 1e-6, max_rows: None }
    }
}

/// How core cells become a predictor's input vector: categorical cells
/// contribute their probability vector (a one-hot vector once resolved to a
/// class), continuous cells are standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEncoding {
    /// Schema indices of the input features.
    pub features: Vec<usize>,
    /// Class count per input feature; `None` for continuous.
    pub widths: Vec<Option<usize>>,
    /// Mean and standard deviation of each continuous input.
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputEncoding {
    /// Learns standardization constants from `table`.
    pub fn fit(table: &IndividualTable, schema: &Schema, features: &[usize]) -> Result<Self> {
        let mut widths = Vec::with_capacity(features.len());
        let mut center = Vec::with_capacity(features.len());
        let mut scale = Vec::with_capacity(features.len());
        for &f in features {
            let column = column(table, schema, f)?;
            widths.push(schema.feature(f).num_classes());
            if schema.feature(f).is_categorical() {
                center.push(0.0);
                scale.push(1.0);
            } else {
                let values = table
                    .column_cells(column)
                    .map(|c| match c {
                        Cell::Real(v) => Ok(*v),
                        _ => Err(Error::InvalidArgument(format!("non-real cell in `{}`", schema.feature(f).name))),
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let mean = crate::stats::mean(&values);
                let sd = crate::stats::sample_sd(&values);
                center.push(if mean.is_finite() { mean } else { 0.0 });
                scale.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
            }
        }
        Ok(InputEncoding { features: features.to_vec(), widths, center, scale })
    }

    /// Input length, not counting the intercept.
    pub fn dim(&self) -> usize {
        self.widths.iter().map(|w| w.unwrap_or(1)).sum()
    }

    /// Writes `[1, x₁, …, x_d]` for one row. `columns[i]` is the table
    /// column of input feature `i`.
    pub fn encode(&self, cells: &[Cell], columns: &[usize], out: &mut [f64]) -> Result<()> {
        out[0] = 1.0;
        let mut at = 1;
        for (i, &col) in columns.iter().enumerate() {
            match (&cells[col], self.widths[i]) {
                (Cell::Probs(p), Some(w)) if p.len() == w => {
                    out[at..at + w].copy_from_slice(p);
                    at += w;
                }
                (Cell::Class(c), Some(w)) if *c < w => {
                    out[at..at + w].iter_mut().for_each(|v| *v = 0.0);
                    out[at + c] = 1.0;
                    at += w;
                }
                (Cell::Real(v), None) => {
                    out[at] = (v - self.center[i]) / self.scale[i];
                    at += 1;
                }
                _ => return Err(Error::InvalidArgument("input cell does not match its encoding".into())),
            }
        }
        Ok(())
    }

    fn columns(&self, table: &IndividualTable, schema: &Schema) -> Result<Vec<usize>> {
        self.features.iter().map(|&f| column(table, schema, f)).collect()
    }

    /// Design matrix with an intercept column, for the given rows.
    fn design(&self, table: &IndividualTable, schema: &Schema, rows: &[usize]) -> Result<DMatrix<f64>> {
        let columns = self.columns(table, schema)?;
        let width = self.dim() + 1;
        let mut buf = vec![0.0; width];
        let mut x = DMatrix::zeros(rows.len(), width);
        for (r, &i) in rows.iter().enumerate() {
            self.encode(&table.rows[i].cells, &columns, &mut buf)?;
            for (j, &v) in buf.iter().enumerate() {
                x[(r, j)] = v;
            }
        }
        Ok(x)
    }
}

fn column(table: &IndividualTable, schema: &Schema, feature: usize) -> Result<usize> {
    table
        .column_of(feature)
        .ok_or_else(|| Error::InvalidArgument(format!("table has no column for `{}`", schema.feature(feature).name)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorModel {
    /// One weight row per class, intercept first.
    Softmax { weights: Vec<Vec<f64>>, iterations: usize },
    /// The same distribution for every input.
    Constant { probs: Vec<f64> },
    /// Least-squares coefficients, intercept first.
    Linear { coefficients: Vec<f64> },
}

/// A fitted model of one batch feature given the core features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub target: usize,
    pub target_name: String,
    pub inputs: InputEncoding,
    pub model: PredictorModel,
}

impl Predictor {
    /// Prediction from an encoded input `[1, x…]`. Continuous predictions are
    /// floored at zero.
    pub fn predict_encoded(&self, x: &[f64]) -> Cell {
        match &self.model {
            PredictorModel::Softmax { weights, .. } => {
                let mut logits: Vec<f64> = weights.iter().map(|w| dot(w, x)).collect();
                softmax_in_place(&mut logits);
                Cell::Probs(logits)
            }
            PredictorModel::Constant { probs } => Cell::Probs(probs.clone()),
            PredictorModel::Linear { coefficients } => Cell::Real(dot(coefficients, x).max(0.0)),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` (intercepts unpenalized) and its
/// gradient. `weights` is classes × inputs, `inputs` rows × inputs with
/// the intercept in column 0.
pub fn softmax_objective(
    weights: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, DMatrix<f64>) {
    let problem = SoftmaxProblem::new(inputs, labels, weights.nrows());
    let w = row_major(weights);
    let mut grad = vec![0.0; w.len()];
    let loss = problem.objective(&w, l2, &mut grad);
    (loss, DMatrix::from_row_slice(weights.nrows(), weights.ncols(), &grad))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

/// Training data for the softmax objective. Columns are kept contiguous
/// so that every step of a pass runs down whole columns.
struct SoftmaxProblem<'a> {
    inputs: &'a DMatrix<f64>,
    labels: &'a [usize],
    classes: usize,
}

impl<'a> SoftmaxProblem<'a> {
    fn new(inputs: &'a DMatrix<f64>, labels: &'a [usize], classes: usize) -> Self {
        SoftmaxProblem { inputs, labels, classes }
    }

    /// Loss at `w` (classes × width, row-major); the gradient goes to `grad`.
    fn objective(&self, w: &[f64], l2: f64, grad: &mut [f64]) -> f64 {
        self.pass(w, l2, grad, true)
    }

    /// One pass over the rows. The loss (NaN when `with_loss` is false)
    /// costs a logarithm per row, so descent skips it.
    fn pass(&self, w: &[f64], l2: f64, grad: &mut [f64], with_loss: bool) -> f64 {
        let n = self.inputs.nrows();
        let width = self.inputs.ncols();
        let classes = self.classes;
        let x = self.inputs.as_slice();
        // scores[c * n + i], later overwritten by residuals p - y
        let mut scores = vec![0.0; classes * n];
        for c in 0..classes {
            let s = &mut scores[c * n..(c + 1) * n];
            for j in 0..width {
                let wcj = w[c * width + j];
                for (si, xi) in s.iter_mut().zip(&x[j * n..(j + 1) * n]) {
                    *si += wcj * xi;
                }
            }
        }
        let mut loss = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(scores[c * n + i]);
            }
            let label_score = scores[label * n + i];
            let mut total = 0.0;
            for c in 0..classes {
                let v = &mut scores[c * n + i];
                *v = if *v == max { 1.0 } else { (*v - max).exp() };
                total += *v;
            }
            if with_loss {
                loss += total.ln() + max - label_score;
            }
            for c in 0..classes {
                scores[c * n + i] /= total;
            }
            scores[label * n + i] -= 1.0;
        }
        let nf = n as f64;
        let mut penalty = 0.0;
        for c in 0..classes {
            let r = &scores[c * n..(c + 1) * n];
            for j in 0..width {
                let k = c * width + j;
                grad[k] = dot4(r, &x[j * n..(j + 1) * n]) / nf;
                if j > 0 {
                    penalty += w[k] * w[k];
                    grad[k] += l2 * w[k];
                }
            }
        }
        if with_loss {
            loss / nf + 0.5 * l2 * penalty
        } else {
            f64::NAN
        }
    }
}

/// Dot product with four independent accumulators.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[chunks..].iter().zip(&b[chunks..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Full-batch gradient descent on [`softmax_objective`] from zero weights.
/// Returns the weights and the number of iterations run.
pub fn train_softmax(
    inputs: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    config: &TrainingConfig,
) -> Result<(DMatrix<f64>, usize)> {
    let problem = SoftmaxProblem::new(inputs, labels, classes);
    let mut w = vec![0.0; classes * inputs.ncols()];
    let mut grad = vec![0.0; w.len()];
    let mut iterations = config.max_iterations;
    for iteration in 0..config.max_iterations {
        problem.pass(&w, config.l2, &mut grad, false);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {iteration}")));
        }
        if norm < config.tolerance {
            iterations = iteration;
            break;
        }
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= config.learning_rate * gk;
        }
    }
    if !problem.objective(&w, config.l2, &mut grad).is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((DMatrix::from_row_slice(classes, inputs.ncols(), &w), iterations))
}

/// Ordinary least squares with a small ridge, via the normal equations.
pub fn train_linear(inputs: &DMatrix<f64>, targets: &[f64]) -> Result<Vec<f64>> {
    let y = DVector::from_column_slice(targets);
    let mut gram = inputs.tr_mul(inputs);
    for i in 0..gram.nrows() {
        gram[(i, i)] += OLS_RIDGE;
    }
    let rhs = inputs.tr_mul(&y);
    let solution = gram.cholesky().ok_or_else(|| Error::Numerical("normal equations are singular".into()))?.solve(&rhs);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite least-squares coefficients".into()));
    }
    Ok(solution.iter().copied().collect())
}

/// Trains a predictor of `target` from the `inputs` cells of a joint sample.
/// Categorical targets are resolved to one class per row, drawn from the
/// row's distribution with `rng`.
pub fn fit_predictor<R: Rng + ?Sized>(
    sample: &IndividualTable,
    schema: &Schema,
    inputs: &[usize],
    target: usize,
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<Predictor> {
    let encoding = InputEncoding::fit(sample, schema, inputs)?;
    let target_column = column(sample, schema, target)?;
    let feature = schema.feature(target);
    let n = sample.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty sample".into()));
    }
    let rows: Vec<usize> = match config.max_rows {
        Some(cap) if cap < n => {
            let mut picked = index::sample(rng, n, cap).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };
    let x = encoding.design(sample, schema, &rows)?;
    let model = match feature.num_classes() {
        Some(classes) => {
            let labels = rows
                .iter()
                .map(|&i| match &sample.rows[i].cells[target_column] {
                    Cell::Probs(p) if p.len() == classes => Ok(draw_class(p, rng)),
                    Cell::Class(c) if *c < classes => Ok(*c),
                    _ => Err(Error::InvalidArgument(format!("bad target cell for `{}`", feature.name))),
                })
                .collect::<Result<Vec<usize>>>()?;
            let first = labels[0];
            if labels.iter().all(|&l| l == first) {
                let mut probs = vec![0.0; classes];
                probs[first] = 1.0;
                PredictorModel::Constant { probs }
            } else {
                let (w, iterations) = train_softmax(&x, &labels, classes, config)?;
                PredictorModel::Softmax {
                    weights: (0..classes).map(|c| w.row(c).iter().copied().collect()).collect(),
                    iterations,
                }
            }
        }
        None => {
            let targets = rows
                .iter()
                .map(|&i| match sample.rows[i].cells[target_column] {
                    Cell::Real(v) => Ok(v),
                    _ => Err(Error::InvalidArgument(format!("bad target cell for `{}`", feature.name))),
                })
                .collect::<Result<Vec<f64>>>()?;
            PredictorModel::Linear { coefficients: train_linear(&x, &targets)? }
        }
    };
    Ok(Predictor { target, target_name: feature.name.clone(), inputs: encoding, model })
}

/// Draws an index from a probability vector; zero-mass vectors fall back to
/// the first class.
pub(crate) fn draw_class<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if target < p {
                return c;
            }
            target -= p;
            last = c;
        }
    }
    last
}

/// Attaches one new column per predictor to `table`, row by row. Existing
/// cells are left untouched.
pub fn extend_with_batch(
    table: &IndividualTable,
    schema: &Schema,
    predictors: &[Predictor],
    mode: Phase3Mode,
) -> Result<IndividualTable> {
    for p in predictors {
        if table.column_of(p.target).is_some() {
            return Err(Error::InvalidArgument(format!("table already has a column for `{}`", p.target_name)));
        }
        if p.target >= schema.len() || schema.feature(p.target).name != p.target_name {
            return Err(Error::InvalidArgument(format!("predictor target `{}` is not in the schema", p.target_name)));
        }
    }
    let input_columns = predictors.iter().map(|p| p.inputs.columns(table, schema)).collect::<Result<Vec<_>>>()?;
    let rows = table
        .rows
        .par_iter()
        .map(|row| {
            let mut row = row.clone();
            for (p, columns) in predictors.iter().zip(&input_columns) {
                let mut x = vec![0.0; p.inputs.dim() + 1];
                p.inputs.encode(&row.cells, columns, &mut x)?;
                let cell = match (p.predict_encoded(&x), mode) {
                    (Cell::Probs(probs), Phase3Mode::Argmax) => Cell::Probs(one_hot_argmax(&probs)),
                    (cell, _) => cell,
                };
                row.cells.push(cell);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut columns = table.columns.clone();
    columns.extend(predictors.iter().map(|p| p.target));
    Ok(IndividualTable { columns, rows })
}

fn one_hot_argmax(probs: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    let mut out = vec![0.0; probs.len()];
    out[best] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::individual::Record;
    use crate::schema::FeatureSchema;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        Schema::new(vec![
            FeatureSchema::categorical("gender", &["M", "F"], 0),
            FeatureSchema::continuous("age", 0),
            FeatureSchema::categorical("pet", &["cat", "dog", "none"], 1),
            FeatureSchema::continuous("rent", 1),
            FeatureSchema::categorical("car", &["yes", "no"], 2),
        ])
        .unwrap()
    }

    #[test]
    fn partitions_by_batch() {
        let plan = partition_batches(&schema());
        assert_eq!(plan.core, vec![0, 1]);
        assert_eq!(plan.batches, vec![vec![2, 3], vec![4]]);
        let core_only = Schema::new(vec![FeatureSchema::continuous("x", 0)]).unwrap();
        assert!(partition_batches(&core_only).batches.is_empty());
    }

    #[test]
    fn phase3_mode_names() {
        for mode in [Phase3Mode::Distribution, Phase3Mode::Argmax] {
            assert_eq!(mode.to_string().parse::<Phase3Mode>().unwrap(), mode);
        }
        assert!("soft".parse::<Phase3Mode>().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1000.0, -1000.0, 3.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    /// Rows with a probability-vector gender cell and the given target cell.
    fn sample_table(genders: &[[f64; 2]], targets: Vec<Cell>) -> IndividualTable {
        let mut table = IndividualTable::new(vec![0, 2]);
        for (k, (g, t)) in genders.iter().zip(targets).enumerate() {
            table.rows.push(Record { unit_id: "u".into(), person_index: k, cells: vec![Cell::Probs(g.to_vec()), t] });
        }
        table
    }

    #[test]
    fn independent_target_recovers_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let genders: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                [p, 1.0 - p]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| draw_class(&[0.5, 0.3, 0.2], &mut rng)).collect();
        let table = sample_table(&genders, labels.iter().map(|&c| Cell::Class(c)).collect());
        let predictor = fit_predictor(&table, &schema(), &[0], 2, &TrainingConfig::default(), &mut rng).unwrap();
        let freq: Vec<f64> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / n as f64).collect();
        for g in [0.0, 0.3, 1.0] {
            let Cell::Probs(p) = predictor.predict_encoded(&[1.0, g, 1.0 - g]) else { panic!() };
            for c in 0..3 {
                assert!((p[c] - freq[c]).abs() < 0.02, "input {g}: {p:?} vs {freq:?}");
            }
        }
    }

    #[test]
    fn separable_target_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let genders: Vec<[f64; 2]> =
                (0..n).map(|_| if rng.random::<bool>() { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
            let targets = genders.iter().map(|g| Cell::Class(if g[0] == 1.0 { 1 } else { 2 })).collect();
            sample_table(&genders, targets)
        };
        let train = make(&mut rng, 2000);
        let test = make(&mut rng, 1000);
        let predictor = fit_predictor(&train, &schema(), &[0], 2, &TrainingConfig::default(), &mut rng).unwrap();
        let extended = extend_with_batch(
            &IndividualTable {
                columns: vec![0],
                rows: test.rows.iter().map(|r| Record { cells: vec![r.cells[0].clone()], ..r.clone() }).collect(),
            },
            &schema(),
            &[predictor],
            Phase3Mode::Argmax,
        )
        .unwrap();
        let correct = extended
            .rows
            .iter()
            .zip(&test.rows)
            .filter(|(e, t)| {
                let Cell::Probs(p) = &e.cells[1] else { return false };
                let Cell::Class(c) = t.cells[1] else { return false };
                p[c] == 1.0
            })
            .count();
        assert!(correct as f64 / 1000.0 >= 0.99);
    }

    #[test]
    fn single_class_target_gives_constant_predictor() {
        let genders = vec![[0.3, 0.7]; 50];
        let table = sample_table(&genders, vec![Cell::Probs(vec![0.0, 1.0, 0.0]); 50]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let predictor = fit_predictor(&table, &schema(), &[0], 2, &TrainingConfig::default(), &mut rng).unwrap();
        assert_eq!(predictor.model, PredictorModel::Constant { probs: vec![0.0, 1.0, 0.0] });
        let core = IndividualTable {
            columns: vec![0],
            rows: table.rows.iter().map(|r| Record { cells: vec![r.cells[0].clone()], ..r.clone() }).collect(),
        };
        let out = extend_with_batch(&core, &schema(), &[predictor], Phase3Mode::Distribution).unwrap();
        assert!(out.rows.iter().all(|r| r.cells[1] == Cell::Probs(vec![0.0, 1.0, 0.0])));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = DMatrix::from_fn(10, 4, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
        let w = DMatrix::from_fn(3, 4, |_, _| rng.random::<f64>() - 0.5);
        let (_, grad) = softmax_objective(&w, &x, &labels, 1e-2);
        let h = 1e-6;
        for c in 0..3 {
            for j in 0..4 {
                let mut plus = w.clone();
                plus[(c, j)] += h;
                let mut minus = w.clone();
                minus[(c, j)] -= h;
                let numeric = (softmax_objective(&plus, &x, &labels, 1e-2).0
                    - softmax_objective(&minus, &x, &labels, 1e-2).0)
                    / (2.0 * h);
                assert!((numeric - grad[(c, j)]).abs() <= 1e-5 * grad[(c, j)].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn linear_target_is_fitted_exactly() {
        let mut table = IndividualTable::new(vec![0, 1, 3]);
        for k in 0..40 {
            let g = (k % 2) as usize;
            let age = 20.0 + k as f64;
            let rent = 500.0 + 10.0 * age + 300.0 * g as f64;
            table.rows.push(Record {
                unit_id: "u".into(),
                person_index: k,
                cells: vec![Cell::Class(g), Cell::Real(age), Cell::Real(rent)],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let predictor = fit_predictor(&table, &schema(), &[0, 1], 3, &TrainingConfig::default(), &mut rng).unwrap();
        let columns = predictor.inputs.columns(&table, &schema()).unwrap();
        let mut x = vec![0.0; predictor.inputs.dim() + 1];
        for row in &table.rows {
            predictor.inputs.encode(&row.cells, &columns, &mut x).unwrap();
            let (Cell::Real(p), Cell::Real(t)) = (predictor.predict_encoded(&x), &row.cells[2]) else { panic!() };
            assert!((p - t).abs() < 1e-4, "{p} vs {t}");
        }
    }

    #[test]
    fn extension_keeps_core_cells_and_counts_columns() {
        let schema = schema();
        let mut core = IndividualTable::new(vec![0, 1]);
        for k in 0..6 {
            core.rows.push(Record {
                unit_id: "u".into(),
                person_index: k,
                cells: vec![Cell::Probs(vec![0.4, 0.6]), Cell::Real(30.0 + k as f64)],
            });
        }
        let inputs = InputEncoding::fit(&core, &schema, &[0, 1]).unwrap();
        let constant = |target: usize, name: &str, probs: Vec<f64>| Predictor {
            target,
            target_name: name.into(),
            inputs: inputs.clone(),
            model: PredictorModel::Constant { probs },
        };
        let linear = Predictor {
            target: 3,
            target_name: "rent".into(),
            inputs: inputs.clone(),
            model: PredictorModel::Linear { coefficients: vec![100.0, 0.0, 0.0, 5.0] },
        };
        let first = extend_with_batch(
            &core,
            &schema,
            &[constant(2, "pet", vec![0.2, 0.3, 0.5]), linear],
            Phase3Mode::Distribution,
        )
        .unwrap();
        let second =
            extend_with_batch(&first, &schema, &[constant(4, "car", vec![0.9, 0.1])], Phase3Mode::Distribution)
                .unwrap();
        assert_eq!(second.columns, vec![0, 1, 2, 3, 4]);
        for (before, after) in core.rows.iter().zip(&second.rows) {
            assert_eq!(&after.cells[..2], &before.cells[..]);
            assert_eq!(after.cells.len(), 5);
        }
        assert!(extend_with_batch(&second, &schema, &[constant(4, "car", vec![0.9, 0.1])], Phase3Mode::Distribution)
            .is_err());
    }
}
