//! Coarse (aggregated) data: one row of proportions and means per
//! aggregation unit, plus the CSV reader and writer for it.
//!
//! Column layout: `unit_id`, `population`, then for each categorical feature
//! `f` with classes `c1..ck` the columns `f:c1`..`f:ck`, or a single column
//! `f` holding the first class's proportion when the feature is binary. A
//! continuous feature is a single column `f` holding the unit mean.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result, StageExt};
use crate::schema::{Coordinate, FeatureKind, Schema};

/// Maximum deviation of a proportion vector's sum from 1 before it is rejected.
pub const PROPORTION_SUM_TOLERANCE: f64 = 1e-3;

/// Vectors closer to a unit sum than this are kept bit-for-bit.
const RENORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum AggregateValue {
    Proportions(Vec<f64>),
    Mean(f64),
}

impl AggregateValue {
    pub fn proportions(&self) -> Option<&[f64]> {
        match self {
            AggregateValue::Proportions(p) => Some(p),
            AggregateValue::Mean(_) => None,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match self {
            AggregateValue::Mean(m) => Some(*m),
            AggregateValue::Proportions(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationUnit {
    pub unit_id: String,
    pub population: usize,
    /// One value per schema feature, in schema order.
    pub values: Vec<AggregateValue>,
}

impl AggregationUnit {
    pub fn coordinate(&self, coord: Coordinate) -> f64 {
        match (&self.values[coord.feature], coord.class) {
            (AggregateValue::Proportions(p), Some(c)) => p[c],
            (AggregateValue::Mean(m), None) => *m,
            _ => panic!("coordinate does not match the value kind"),
        }
    }

    pub fn value(&self, schema: &Schema, feature: &str) -> Option<&AggregateValue> {
        schema.index_of(feature).map(|i| &self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoarseTable {
    pub units: Vec<AggregationUnit>,
}

impl CoarseTable {
    pub fn new(units: Vec<AggregationUnit>) -> Self {
        CoarseTable { units }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit(&self, unit_id: &str) -> Option<&AggregationUnit> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    pub fn total_population(&self) -> usize {
        self.units.iter().map(|u| u.population).sum()
    }

    /// Checks every aggregation-unit invariant against `schema`.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let mut seen = HashSet::new();
        for unit in &self.units {
            if !seen.insert(unit.unit_id.as_str()) {
                return Err(Error::Coarse(format!("duplicate unit_id `{}`", unit.unit_id)));
            }
            if unit.population == 0 {
                return Err(Error::Coarse(format!("unit `{}` has zero population", unit.unit_id)));
            }
            if unit.values.len() != schema.len() {
                return Err(Error::Coarse(format!(
                    "unit `{}` has {} values, schema declares {} features",
                    unit.unit_id,
                    unit.values.len(),
                    schema.len()
                )));
            }
            for (feature, value) in schema.features().iter().zip(&unit.values) {
                match (&feature.kind, value) {
                    (FeatureKind::Categorical { classes, .. }, AggregateValue::Proportions(p)) => {
                        if p.len() != classes.len() {
                            return Err(Error::Coarse(format!(
                                "unit `{}` feature `{}`: {} proportions for {} classes",
                                unit.unit_id,
                                feature.name,
                                p.len(),
                                classes.len()
                            )));
                        }
                        check_proportions(p, &unit.unit_id, &feature.name, 1e-6)?;
                    }
                    (FeatureKind::ContinuousPositive, AggregateValue::Mean(m)) => {
                        check_mean(*m, &unit.unit_id, &feature.name)?;
                    }
                    _ => {
                        return Err(Error::Coarse(format!(
                            "unit `{}` feature `{}`: value kind does not match schema",
                            unit.unit_id, feature.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_proportions(p: &[f64], unit: &str, feature: &str, sum_tol: f64) -> Result<()> {
    for &x in p {
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            return Err(Error::Coarse(format!("unit `{unit}` feature `{feature}`: proportion {x} outside [0, 1]")));
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > sum_tol {
        return Err(Error::Coarse(format!("unit `{unit}` feature `{feature}`: proportions sum to {sum}")));
    }
    Ok(())
}

fn check_mean(m: f64, unit: &str, feature: &str) -> Result<()> {
    if !m.is_finite() || m < 0.0 {
        return Err(Error::Coarse(format!("unit `{unit}` feature `{feature}`: invalid mean {m}")));
    }
    Ok(())
}

fn renormalize(p: &mut [f64]) {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_EPS {
        for x in p.iter_mut() {
            *x /= sum;
        }
    }
}

/// Reads a coarse CSV file.
pub fn load_coarse_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<CoarseTable> {
    let path = path.as_ref();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
        .and_then(|file| read_coarse_csv(file, schema))
        .stage("load_coarse_csv")
}

pub fn read_coarse_csv<R: Read>(reader: R, schema: &Schema) -> Result<CoarseTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Coarse("empty file: no header row".into()));
    }
    let column: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let unit_col = *column.get("unit_id").ok_or_else(|| Error::Coarse("missing `unit_id` column".into()))?;
    let pop_col = *column.get("population").ok_or_else(|| Error::Coarse("missing `population` column".into()))?;

    enum Source {
        Classes(Vec<usize>),
        Binary(usize),
        Mean(usize),
    }
    let mut sources = Vec::with_capacity(schema.len());
    for feature in schema.features() {
        let source = match &feature.kind {
            FeatureKind::Categorical { classes, .. } => {
                let cols: Option<Vec<usize>> =
                    classes.iter().map(|c| column.get(format!("{}:{}", feature.name, c).as_str()).copied()).collect();
                match (cols, column.get(feature.name.as_str())) {
                    (Some(cols), _) => Source::Classes(cols),
                    (None, Some(&col)) if classes.len() == 2 => Source::Binary(col),
                    _ => {
                        return Err(Error::Coarse(format!("missing proportion columns for feature `{}`", feature.name)))
                    }
                }
            }
            FeatureKind::ContinuousPositive => match column.get(feature.name.as_str()) {
                Some(&col) => Source::Mean(col),
                None => return Err(Error::Coarse(format!("missing column for feature `{}`", feature.name))),
            },
        };
        sources.push(source);
    }

    let mut units = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let unit_id = record.get(unit_col).unwrap_or("").to_string();
        if unit_id.is_empty() {
            return Err(Error::Coarse(format!("row {row}: empty unit_id")));
        }
        let population: usize = record
            .get(pop_col)
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n >= 1)
            .ok_or_else(|| Error::Coarse(format!("row {row}: population must be an integer >= 1")))?;
        let number = |col: usize| -> Result<f64> {
            let text = record.get(col).unwrap_or("");
            text.parse::<f64>().map_err(|_| {
                Error::Coarse(format!("row {row}: `{text}` in column `{}` is not a number", &headers[col]))
            })
        };
        let mut values = Vec::with_capacity(schema.len());
        for (feature, source) in schema.features().iter().zip(&sources) {
            let value = match source {
                Source::Classes(cols) => {
                    let mut p = cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
                    check_proportions(&p, &unit_id, &feature.name, PROPORTION_SUM_TOLERANCE)?;
                    renormalize(&mut p);
                    AggregateValue::Proportions(p)
                }
                Source::Binary(col) => {
                    let first = number(*col)?;
                    let p = vec![first, 1.0 - first];
                    check_proportions(&p, &unit_id, &feature.name, PROPORTION_SUM_TOLERANCE)?;
                    AggregateValue::Proportions(p)
                }
                Source::Mean(col) => {
                    let m = number(*col)?;
                    check_mean(m, &unit_id, &feature.name)?;
                    AggregateValue::Mean(m)
                }
            };
            values.push(value);
        }
        units.push(AggregationUnit { unit_id, population, values });
    }
    if units.is_empty() {
        return Err(Error::Coarse("no aggregation units in input".into()));
    }
    let table = CoarseTable { units };
    table.validate(schema)?;
    Ok(table)
}

pub fn write_coarse_csv<W: Write>(writer: W, table: &CoarseTable, schema: &Schema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id".to_string(), "population".to_string()];
    for f in schema.features() {
        match f.classes() {
            Some(classes) => header.extend(classes.iter().map(|c| format!("{}:{}", f.name, c))),
            None => header.push(f.name.clone()),
        }
    }
    wtr.write_record(&header)?;
    for unit in &table.units {
        let mut row = vec![unit.unit_id.clone(), unit.population.to_string()];
        for value in &unit.values {
            match value {
                AggregateValue::Proportions(p) => row.extend(p.iter().map(|x| x.to_string())),
                AggregateValue::Mean(m) => row.push(m.to_string()),
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_coarse_csv(path: impl AsRef<Path>, table: &CoarseTable, schema: &Schema) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_coarse_csv(std::io::BufWriter::new(file), table, schema)
}
