//! Person-level records and the aggregation operator that maps them back
//! to coarse data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::coarse::{AggregateValue, AggregationUnit, CoarseTable};
use crate::error::{Error, Result, StageExt};
use crate::schema::{FeatureKind, Schema};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    /// Index into the feature's class list.
    Class(usize),
    Real(f64),
    /// Intermediate distribution over a categorical feature's classes.
    Probs(Vec<f64>),
}

impl Cell {
    pub fn is_final(&self) -> bool {
        !matches!(self, Cell::Probs(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub unit_id: String,
    pub person_index: usize,
    /// One cell per table column.
    pub cells: Vec<Cell>,
}

/// Rows are stored grouped by unit, in unit order then `person_index` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndividualTable {
    /// Schema feature indices, one per column.
    pub columns: Vec<usize>,
    pub rows: Vec<Record>,
}

impl IndividualTable {
    pub fn new(columns: Vec<usize>) -> Self {
        IndividualTable { columns, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_of(&self, feature: usize) -> Option<usize> {
        self.columns.iter().position(|&f| f == feature)
    }

    pub fn is_finalized(&self) -> bool {
        self.rows.iter().all(|r| r.cells.iter().all(Cell::is_final))
    }

    /// Contiguous row ranges for each unit, in table order.
    pub fn unit_ranges(&self) -> Vec<(&str, Range<usize>)> {
        let mut out: Vec<(&str, Range<usize>)> = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            match out.last_mut() {
                Some((id, range)) if *id == row.unit_id => range.end = i + 1,
                _ => out.push((row.unit_id.as_str(), i..i + 1)),
            }
        }
        out
    }

    /// Cells of one column, in row order.
    pub fn column_cells(&self, column: usize) -> impl Iterator<Item = &Cell> {
        self.rows.iter().map(move |r| &r.cells[column])
    }
}

/// Re-aggregates a finalized table: class counts divided by the unit size
/// for categorical features and arithmetic means for continuous ones.
pub fn aggregate(individuals: &IndividualTable, schema: &Schema) -> Result<CoarseTable> {
    let mut column_for = Vec::with_capacity(schema.len());
    for feature in 0..schema.len() {
        let col = individuals
            .column_of(feature)
            .ok_or_else(|| Error::Individual(format!("table has no column for `{}`", schema.feature(feature).name)))?;
        column_for.push(col);
    }
    let mut units = Vec::new();
    for (unit_id, range) in individuals.unit_ranges() {
        let rows = &individuals.rows[range];
        let n = rows.len();
        let mut values = Vec::with_capacity(schema.len());
        for (feature, &col) in schema.features().iter().zip(&column_for) {
            let value = match &feature.kind {
                FeatureKind::Categorical { classes, .. } => {
                    let mut counts = vec![0usize; classes.len()];
                    for row in rows {
                        match row.cells[col] {
                            Cell::Class(c) if c < classes.len() => counts[c] += 1,
                            _ => return Err(unfinalized(unit_id, &feature.name)),
                        }
                    }
                    AggregateValue::Proportions(counts.iter().map(|&k| k as f64 / n as f64).collect())
                }
                FeatureKind::ContinuousPositive => {
                    let mut sum = 0.0;
                    for row in rows {
                        match row.cells[col] {
                            Cell::Real(v) => sum += v,
                            _ => return Err(unfinalized(unit_id, &feature.name)),
                        }
                    }
                    AggregateValue::Mean(sum / n as f64)
                }
            };
            values.push(value);
        }
        units.push(AggregationUnit { unit_id: unit_id.to_string(), population: n, values });
    }
    Ok(CoarseTable::new(units))
}

fn unfinalized(unit: &str, feature: &str) -> Error {
    Error::Individual(format!("unit `{unit}` feature `{feature}` holds a non-final cell"))
}

/// Writes `unit_id`, `person_index`, then one column per table column.
pub fn write_individual_csv<W: Write>(writer: W, table: &IndividualTable, schema: &Schema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id".to_string(), "person_index".to_string()];
    header.extend(table.columns.iter().map(|&f| schema.feature(f).name.clone()));
    wtr.write_record(&header)?;
    for row in &table.rows {
        let mut out = Vec::with_capacity(row.cells.len() + 2);
        out.push(row.unit_id.clone());
        out.push(row.person_index.to_string());
        for (cell, &f) in row.cells.iter().zip(&table.columns) {
            let feature = schema.feature(f);
            out.push(match (cell, feature.classes()) {
                (Cell::Class(c), Some(classes)) => classes[*c].clone(),
                (Cell::Real(v), None) => v.to_string(),
                _ => return Err(unfinalized(&row.unit_id, &feature.name)),
            });
        }
        wtr.write_record(&out)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_individual_csv(path: impl AsRef<Path>, table: &IndividualTable, schema: &Schema) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_individual_csv(std::io::BufWriter::new(file), table, schema)
}

/// Reads a finalized individual table. Columns not named in `schema` are
/// ignored; every schema feature must be present. Rows of the same unit must
/// be contiguous.
pub fn read_individual_csv<R: Read>(reader: R, schema: &Schema) -> Result<IndividualTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let unit_col = *column.get("unit_id").ok_or_else(|| Error::Individual("missing `unit_id` column".into()))?;
    let person_col = column.get("person_index").copied();
    let feature_cols = schema
        .features()
        .iter()
        .map(|f| {
            column
                .get(f.name.as_str())
                .copied()
                .ok_or_else(|| Error::Individual(format!("missing column `{}`", f.name)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = IndividualTable::new((0..schema.len()).collect());
    let mut next_index: HashMap<String, usize> = HashMap::new();
    let mut finished: Vec<String> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let unit_id = record.get(unit_col).unwrap_or("").to_string();
        if table.rows.last().map(|r: &Record| r.unit_id != unit_id).unwrap_or(false) {
            let prev = table.rows.last().unwrap().unit_id.clone();
            finished.push(prev);
            if finished.contains(&unit_id) {
                return Err(Error::Individual(format!("row {row}: rows of unit `{unit_id}` are not contiguous")));
            }
        }
        let counter = next_index.entry(unit_id.clone()).or_insert(0);
        let person_index = match person_col {
            Some(col) => record
                .get(col)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Individual(format!("row {row}: invalid person_index")))?,
            None => *counter,
        };
        *counter += 1;
        let mut cells = Vec::with_capacity(schema.len());
        for (feature, &col) in schema.features().iter().zip(&feature_cols) {
            let text = record.get(col).unwrap_or("");
            let cell = match feature.classes() {
                Some(_) => Cell::Class(feature.class_index(text).ok_or_else(|| {
                    Error::Individual(format!("row {row}: unknown class `{text}` for `{}`", feature.name))
                })?),
                None => {
                    let v: f64 =
                        text.parse().map_err(|_| Error::Individual(format!("row {row}: `{text}` is not a number")))?;
                    Cell::Real(v)
                }
            };
            cells.push(cell);
        }
        table.rows.push(Record { unit_id, person_index, cells });
    }
    Ok(table)
}

pub fn load_individual_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<IndividualTable> {
    let path = path.as_ref();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
        .and_then(|file| read_individual_csv(file, schema))
        .stage("load_individual_csv")
}
