//! Linking an external, partially identified record to the closest
//! synthetic individual of its aggregation unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::individual::{Cell, IndividualTable};
use crate::schema::{FeatureKind, Schema};

/// A known attribute: a class label for categorical features, a number for
/// continuous ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Number(f64),
    Label(String),
}

/// ```json
/// {"unit_id": "V3N1P5", "attributes": {"age": 53, "gender": "M"}, "weights": {"age": 2}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchQuery {
    pub unit_id: String,
    pub attributes: BTreeMap<String, AttributeValue>,
    /// Missing entries weigh 1.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

impl MatchQuery {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub rank: usize,
    /// Row index into the pool table.
    pub row: usize,
    pub person_index: usize,
    pub distance: f64,
}

enum Target {
    Class { index: usize, span: f64 },
    Real { value: f64, scale: f64 },
}

struct Term {
    column: usize,
    weight: f64,
    target: Target,
}

impl Term {
    fn distance(&self, cell: &Cell) -> Result<f64> {
        let d = match (&self.target, cell) {
            (Target::Class { index, span }, Cell::Class(c)) => {
                if *span > 0.0 {
                    index.abs_diff(*c) as f64 / span
                } else if index == c {
                    0.0
                } else {
                    1.0
                }
            }
            (Target::Real { value, scale }, Cell::Real(v)) => (value - v).abs() / scale,
            _ => return Err(Error::Individual("pool holds a non-final cell".into())),
        };
        Ok(self.weight * d)
    }
}

/// Ranks the rows of `query.unit_id` in `pool` by weighted distance to the
/// query and returns the first `k`. Per attribute the distance is 0/1 for
/// nominal classes, `|i − j| / (c − 1)` for ordinal ones and `|Δ| / s` for
/// continuous values, `s` being the sample sd of that feature over the
/// unit's rows (1 when it is zero or undefined). Ties go to the lower
/// `person_index`.
pub fn probabilistic_match(
    query: &MatchQuery,
    pool: &IndividualTable,
    schema: &Schema,
    k: usize,
) -> Result<Vec<MatchCandidate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.attributes.is_empty() {
        return Err(Error::InvalidArgument("query has no known attributes".into()));
    }
    if let Some(name) = query.weights.keys().find(|w| !query.attributes.contains_key(*w)) {
        return Err(Error::InvalidArgument(format!("weight given for `{name}`, which is not a query attribute")));
    }
    let range = pool
        .unit_ranges()
        .into_iter()
        .find(|(id, _)| *id == query.unit_id)
        .map(|(_, r)| r)
        .ok_or_else(|| Error::InvalidArgument(format!("unit `{}` is not in the pool", query.unit_id)))?;
    let rows = &pool.rows[range.clone()];

    let mut terms = Vec::with_capacity(query.attributes.len());
    for (name, value) in &query.attributes {
        let feature_index =
            schema.index_of(name).ok_or_else(|| Error::InvalidArgument(format!("unknown feature `{name}`")))?;
        let feature = schema.feature(feature_index);
        let column = pool
            .column_of(feature_index)
            .ok_or_else(|| Error::InvalidArgument(format!("pool has no column for `{name}`")))?;
        let weight = query.weights.get(name).copied().unwrap_or(1.0);
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight for `{name}` must be a nonnegative number")));
        }
        let target = match (&feature.kind, value) {
            (FeatureKind::Categorical { classes, ordinal }, AttributeValue::Label(label)) => {
                let index = feature
                    .class_index(label)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{label}` for `{name}`")))?;
                let span = if *ordinal { classes.len().saturating_sub(1) as f64 } else { 0.0 };
                Target::Class { index, span }
            }
            (FeatureKind::ContinuousPositive, AttributeValue::Number(x)) if x.is_finite() => {
                let values: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| match r.cells[column] {
                        Cell::Real(v) => Some(v),
                        _ => None,
                    })
                    .collect();
                Target::Real { value: *x, scale: spread(&values) }
            }
            (FeatureKind::Categorical { .. }, _) => {
                return Err(Error::InvalidArgument(format!("`{name}` is categorical and needs a class label")))
            }
            (FeatureKind::ContinuousPositive, _) => {
                return Err(Error::InvalidArgument(format!("`{name}` is continuous and needs a finite number")))
            }
        };
        terms.push(Term { column, weight, target });
    }

    let mut scored = Vec::with_capacity(rows.len());
    for (offset, row) in rows.iter().enumerate() {
        let mut distance = 0.0;
        for term in &terms {
            distance += term.distance(&row.cells[term.column])?;
        }
        scored.push((range.start + offset, row.person_index, distance));
    }
    scored.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (row, person_index, distance))| MatchCandidate { rank: i + 1, row, person_index, distance })
        .collect())
}

fn spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}
