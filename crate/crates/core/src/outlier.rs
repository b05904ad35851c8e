//! Unit-level outlier detection on the coarse data.
//!
//! Each coordinate (class proportion or mean) is scored by how far into
//! either tail of its empirical distribution across units a unit sits:
//!
//! ```text
//! score(m) = Σ_d −ln( min(F̂_d(x), Ŝ_d(x)) + ε ),   ε = 1 / (2M)
//! ```
//!
//! where `F̂_d(x) = #{x_j ≤ x} / M` and `Ŝ_d(x) = #{x_j ≥ x} / M`. Only ranks
//! enter the score. Constant coordinates contribute nothing. Flagged units
//! are left out of pooled estimates but are still populated.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use crate::coarse::CoarseTable;
use crate::error::{Error, Result};
use crate::schema::Schema;

/// Below this many units nothing is scored or flagged.
pub const MIN_UNITS: usize = 10;

pub const DEFAULT_CONTAMINATION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    pub unit_ids: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub unit_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub flagged: BTreeSet<String>,
    pub threshold: f64,
}

impl OutlierReport {
    /// A report that flags nothing, used when outlier removal is disabled.
    pub fn empty(coarse: &CoarseTable) -> Self {
        OutlierReport {
            unit_ids: coarse.units.iter().map(|u| u.unit_id.clone()).collect(),
            scores: vec![0.0; coarse.len()],
            flagged: BTreeSet::new(),
            threshold: f64::INFINITY,
        }
    }

    pub fn is_flagged(&self, unit_id: &str) -> bool {
        self.flagged.contains(unit_id)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["unit_id", "score", "flagged"])?;
        for (id, score) in self.unit_ids.iter().zip(&self.scores) {
            let flagged = if self.flagged.contains(id) { "true" } else { "false" };
            wtr.write_record([id.as_str(), &score.to_string(), flagged])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn score_units(coarse: &CoarseTable, schema: &Schema) -> UnitScores {
    let m = coarse.len();
    let unit_ids: Vec<String> = coarse.units.iter().map(|u| u.unit_id.clone()).collect();
    let mut scores = vec![0.0; m];
    if m < MIN_UNITS {
        return UnitScores { unit_ids, scores };
    }
    let eps = 1.0 / (2.0 * m as f64);
    let all: Vec<usize> = (0..schema.len()).collect();
    for coord in schema.coordinates(&all) {
        let values: Vec<f64> = coarse.units.iter().map(|u| u.coordinate(coord)).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[0] == sorted[m - 1] {
            continue;
        }
        for (score, &x) in scores.iter_mut().zip(&values) {
            let at_most = sorted.partition_point(|&v| v <= x) as f64 / m as f64;
            let at_least = (m - sorted.partition_point(|&v| v < x)) as f64 / m as f64;
            *score -= (at_most.min(at_least) + eps).ln();
        }
    }
    UnitScores { unit_ids, scores }
}

/// Flags the `⌊contamination · M⌋` highest-scoring units, ties broken by
/// ascending unit id.
pub fn flag_outliers(scores: &UnitScores, contamination: f64) -> Result<OutlierReport> {
    if !(0.0..0.5).contains(&contamination) {
        return Err(Error::InvalidArgument(format!("contamination {contamination} outside [0, 0.5)")));
    }
    let m = scores.scores.len();
    let count = (contamination * m as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        scores.scores[j]
            .partial_cmp(&scores.scores[i])
            .unwrap_or(Ordering::Equal)
            .then_with(|| scores.unit_ids[i].cmp(&scores.unit_ids[j]))
    });
    let flagged = order[..count].iter().map(|&i| scores.unit_ids[i].clone()).collect();
    let threshold = order.get(count).map(|&i| scores.scores[i]).unwrap_or(f64::INFINITY);
    Ok(OutlierReport { unit_ids: scores.unit_ids.clone(), scores: scores.scores.clone(), flagged, threshold })
}
