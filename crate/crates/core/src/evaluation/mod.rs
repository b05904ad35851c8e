//! Reconstruction accuracy of generated individuals against ground truth.
//!
//! Within each unit both tables are sorted by a list of key features (by
//! default the categorical core features in declaration order) with
//! `person_index` as the final tiebreak, and rows are paired by position.
//! Accuracy is the fraction of matching categorical cells.

mod simulation;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::individual::{Cell, IndividualTable, Record};
use crate::schema::Schema;

pub use simulation::{
    generate_truth, run_simulation_study, SimulationConfig, SimulationFeature, StudyOutcome, UnitSizes,
};

/// Unit-size buckets as `(label, smallest, largest)`.
pub const SIZE_BUCKETS: [(&str, usize, usize); 5] =
    [("1-10", 1, 10), ("11-25", 11, 25), ("26-50", 26, 50), ("51-100", 51, 100), ("101+", 101, usize::MAX)];

pub fn size_bucket(population: usize) -> usize {
    SIZE_BUCKETS.iter().position(|&(_, lo, hi)| (lo..=hi).contains(&population)).unwrap_or(0)
}

/// Categorical core features in declaration order.
pub fn default_sort_keys(schema: &Schema) -> Vec<usize> {
    schema.core_features().into_iter().filter(|&f| schema.feature(f).is_categorical()).collect()
}

/// A truth row paired with a generated row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowPair {
    pub truth: usize,
    pub generated: usize,
    /// Population of the unit both rows belong to.
    pub unit_size: usize,
}

/// Pairs rows unit by unit after sorting both sides by `keys` (schema
/// feature indices) and then `person_index`.
pub fn align_rows(truth: &IndividualTable, generated: &IndividualTable, keys: &[usize]) -> Result<Vec<RowPair>> {
    let truth_units = truth.unit_ranges();
    let generated_units: BTreeMap<&str, std::ops::Range<usize>> = generated.unit_ranges().into_iter().collect();
    if truth_units.len() != generated_units.len() {
        return Err(Error::InvalidArgument(format!(
            "truth has {} units, generated {}",
            truth_units.len(),
            generated_units.len()
        )));
    }
    let truth_keys = key_columns(truth, keys)?;
    let generated_keys = key_columns(generated, keys)?;
    let mut pairs = Vec::with_capacity(truth.len());
    for (unit_id, t_range) in truth_units {
        let g_range = generated_units
            .get(unit_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unit `{unit_id}` missing from generated table")))?;
        if g_range.len() != t_range.len() {
            return Err(Error::InvalidArgument(format!(
                "unit `{unit_id}`: {} truth rows but {} generated",
                t_range.len(),
                g_range.len()
            )));
        }
        let t_order = sorted_rows(&truth.rows, t_range.clone(), &truth_keys)?;
        let g_order = sorted_rows(&generated.rows, g_range.clone(), &generated_keys)?;
        let unit_size = t_range.len();
        pairs.extend(t_order.into_iter().zip(g_order).map(|(t, g)| RowPair { truth: t, generated: g, unit_size }));
    }
    Ok(pairs)
}

fn key_columns(table: &IndividualTable, keys: &[usize]) -> Result<Vec<usize>> {
    keys.iter()
        .map(|&f| table.column_of(f).ok_or_else(|| Error::InvalidArgument(format!("sort key {f} is not a column"))))
        .collect()
}

fn sorted_rows(rows: &[Record], range: std::ops::Range<usize>, keys: &[usize]) -> Result<Vec<usize>> {
    for i in range.clone() {
        for &k in keys {
            if !rows[i].cells[k].is_final() {
                return Err(Error::InvalidArgument("cannot align unfinalized rows".into()));
            }
        }
    }
    let mut order: Vec<usize> = range.collect();
    order.sort_by(|&a, &b| {
        keys.iter()
            .map(|&k| compare_cells(&rows[a].cells[k], &rows[b].cells[k]))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(rows[a].person_index.cmp(&rows[b].person_index))
    });
    Ok(order)
}

fn compare_cells(a: &Cell, b: &Cell) -> Ordering {
    match (a, b) {
        (Cell::Class(x), Cell::Class(y)) => x.cmp(y),
        (Cell::Real(x), Cell::Real(y)) => x.total_cmp(y),
        _ => Ordering::Equal,
    }
}

/// Matched and total cell counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub matched: u64,
    pub total: u64,
}

impl Tally {
    pub fn add(&mut self, matched: bool) {
        self.total += 1;
        self.matched += matched as u64;
    }

    pub fn merge(&mut self, other: Tally) {
        self.matched += other.matched;
        self.total += other.total;
    }

    /// `matched / total`, or NaN when empty.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucketAccuracy {
    pub bucket: String,
    pub units: usize,
    pub cells: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountAccuracy {
    pub classes: usize,
    pub cells: Tally,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// All categorical cells pooled.
    pub overall: Tally,
    /// Mean over rows of each row's matched fraction.
    pub per_row_mean: f64,
    pub by_unit_size: Vec<SizeBucketAccuracy>,
    pub by_class_count: Vec<ClassCountAccuracy>,
    pub by_feature: Vec<(String, Tally)>,
}

impl AccuracyReport {
    pub fn overall_accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn class_count(&self, classes: usize) -> Option<&ClassCountAccuracy> {
        self.by_class_count.iter().find(|c| c.classes == classes)
    }

    /// One line per figure: `section,key,accuracy,matched,cells,units,baseline`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["section", "key", "accuracy", "matched", "cells", "units", "baseline"])?;
        let mut line = |section: &str, key: &str, t: Tally, units: String, baseline: String| {
            wtr.write_record([
                section,
                key,
                &format_accuracy(t.accuracy()),
                &t.matched.to_string(),
                &t.total.to_string(),
                &units,
                &baseline,
            ])
        };
        let units: usize = self.by_unit_size.iter().map(|b| b.units).sum();
        line("overall", "cells", self.overall, units.to_string(), String::new())?;
        for b in &self.by_unit_size {
            line("unit_size", &b.bucket, b.cells, b.units.to_string(), String::new())?;
        }
        for c in &self.by_class_count {
            line("class_count", &c.classes.to_string(), c.cells, String::new(), format_accuracy(c.baseline))?;
        }
        for (name, t) in &self.by_feature {
            line("feature", name, *t, String::new(), String::new())?;
        }
        wtr.write_record(["overall", "per_row_mean", &format_accuracy(self.per_row_mean), "", "", "", ""])?;
        wtr.flush()?;
        Ok(())
    }
}

fn format_accuracy(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "overall accuracy   {:.3}  ({} / {} cells)",
            self.overall.accuracy(),
            self.overall.matched,
            self.overall.total
        )?;
        writeln!(f, "per-row mean       {:.3}", self.per_row_mean)?;
        writeln!(f)?;
        writeln!(f, "{:<10} {:>7} {:>9}", "unit size", "units", "accuracy")?;
        for b in &self.by_unit_size {
            writeln!(f, "{:<10} {:>7} {:>9}", b.bucket, b.units, format_short(b.cells.accuracy()))?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>9} {:>9}", "classes", "accuracy", "baseline")?;
        for c in &self.by_class_count {
            writeln!(f, "{:<10} {:>9} {:>9.3}", c.classes, format_short(c.cells.accuracy()), c.baseline)?;
        }
        Ok(())
    }
}

fn format_short(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{x:.3}")
    }
}

/// Scores aligned pairs over the categorical features of `schema`. Both
/// tables must hold a column for every schema feature.
pub fn cell_accuracy(
    truth: &IndividualTable,
    generated: &IndividualTable,
    pairs: &[RowPair],
    schema: &Schema,
) -> Result<AccuracyReport> {
    let categorical: Vec<usize> = (0..schema.len()).filter(|&f| schema.feature(f).is_categorical()).collect();
    if categorical.is_empty() {
        return Err(Error::InvalidArgument("schema has no categorical features to score".into()));
    }
    let t_cols = key_columns(truth, &categorical)?;
    let g_cols = key_columns(generated, &categorical)?;

    let mut overall = Tally::default();
    let mut by_feature = vec![Tally::default(); categorical.len()];
    let mut buckets = vec![Tally::default(); SIZE_BUCKETS.len()];
    let mut bucket_units = vec![0usize; SIZE_BUCKETS.len()];
    let mut by_classes: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut row_sum = 0.0;
    let mut seen_unit: Option<&str> = None;

    for pair in pairs {
        let t = &truth.rows[pair.truth];
        let g = &generated.rows[pair.generated];
        if t.unit_id != g.unit_id {
            return Err(Error::InvalidArgument(format!("pair mixes units `{}` and `{}`", t.unit_id, g.unit_id)));
        }
        let bucket = size_bucket(pair.unit_size);
        if seen_unit != Some(t.unit_id.as_str()) {
            bucket_units[bucket] += 1;
            seen_unit = Some(t.unit_id.as_str());
        }
        let mut row = Tally::default();
        for (i, &f) in categorical.iter().enumerate() {
            let matched = match (&t.cells[t_cols[i]], &g.cells[g_cols[i]]) {
                (Cell::Class(a), Cell::Class(b)) => a == b,
                _ => return Err(Error::InvalidArgument("cannot score unfinalized cells".into())),
            };
            row.add(matched);
            by_feature[i].add(matched);
            by_classes.entry(schema.feature(f).num_classes().unwrap_or(0)).or_default().add(matched);
        }
        row_sum += row.accuracy();
        overall.merge(row);
        buckets[bucket].merge(row);
    }

    Ok(AccuracyReport {
        overall,
        per_row_mean: if pairs.is_empty() { f64::NAN } else { row_sum / pairs.len() as f64 },
        by_unit_size: SIZE_BUCKETS
            .iter()
            .zip(buckets)
            .zip(bucket_units)
            .map(|((&(label, _, _), cells), units)| SizeBucketAccuracy { bucket: label.into(), units, cells })
            .collect(),
        by_class_count: by_classes
            .into_iter()
            .map(|(classes, cells)| ClassCountAccuracy { classes, cells, baseline: 1.0 / classes as f64 })
            .collect(),
        by_feature: categorical.iter().map(|&f| schema.feature(f).name.clone()).zip(by_feature).collect(),
    })
}

/// [`align_rows`] followed by [`cell_accuracy`].
pub fn evaluate(
    truth: &IndividualTable,
    generated: &IndividualTable,
    schema: &Schema,
    keys: &[usize],
) -> Result<AccuracyReport> {
    let pairs = align_rows(truth, generated, keys)?;
    cell_accuracy(truth, generated, &pairs, schema)
}
