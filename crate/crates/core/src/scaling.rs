//! Resolving probability vectors to classes under exact per-unit counts,
//! and shifting continuous values onto the unit means.

use rand::Rng;
use rayon::prelude::*;

use crate::batching::draw_class;
use crate::coarse::{AggregateValue, CoarseTable};
use crate::error::{Error, Result};
use crate::individual::{Cell, IndividualTable, Record};
use crate::rng::SeededRng;
use crate::schema::Schema;

/// Maximum number of floor-and-redistribute passes in [`shift_continuous`].
pub const MAX_REDISTRIBUTION_PASSES: usize = 5;

/// Products `n·p` this close to an integer are taken as that integer, so
/// that representation error cannot move a seat.
const INTEGER_SNAP: f64 = 1e-9;

/// Largest-remainder apportionment of `population` seats by `proportions`.
/// Remaining seats go to the largest fractional parts, ties to the earlier
/// class.
pub fn integerize_budget(population: usize, proportions: &[f64]) -> Vec<usize> {
    let n = population as f64;
    let mut counts = Vec::with_capacity(proportions.len());
    let mut fractions = Vec::with_capacity(proportions.len());
    for &p in proportions {
        let mut exact = n * p.max(0.0);
        if (exact - exact.round()).abs() < INTEGER_SNAP {
            exact = exact.round();
        }
        let floor = exact.floor();
        counts.push(floor as usize);
        fractions.push(exact - floor);
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| fractions[b].total_cmp(&fractions[a]).then(a.cmp(&b)));
    if assigned <= population {
        for &c in order.iter().cycle().take(population - assigned) {
            counts[c] += 1;
        }
    } else {
        // only reachable through proportions summing above one
        let mut excess = assigned - population;
        for &c in order.iter().rev().cycle() {
            if excess == 0 {
                break;
            }
            if counts[c] > 0 {
                counts[c] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

/// Assigns one class per row, in row order. Each row's vector is masked to
/// the classes with budget left and renormalized; a row whose vector has no
/// mass on those classes draws from the remaining budget instead. Final
/// counts equal `budget` exactly.
pub fn assign_categories<R: Rng + ?Sized>(probs: &[Vec<f64>], budget: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let total: usize = budget.iter().sum();
    if total != probs.len() {
        return Err(Error::InvalidArgument(format!("budget of {total} for {} rows", probs.len())));
    }
    let mut remaining = budget.to_vec();
    let mut masked = vec![0.0; budget.len()];
    let mut out = Vec::with_capacity(probs.len());
    for p in probs {
        if p.len() != budget.len() {
            return Err(Error::InvalidArgument(format!("{} probabilities for {} classes", p.len(), budget.len())));
        }
        let mut mass = 0.0;
        for c in 0..budget.len() {
            masked[c] = if remaining[c] > 0 && p[c] > 0.0 { p[c] } else { 0.0 };
            mass += masked[c];
        }
        if !(mass > 0.0 && mass.is_finite()) {
            for c in 0..budget.len() {
                masked[c] = remaining[c] as f64;
            }
        }
        let class = draw_class(&masked, rng);
        remaining[class] -= 1;
        out.push(class);
    }
    Ok(out)
}

/// Shifts `values` by `target − mean`, then floors negatives at zero and
/// takes the added mass back proportionally from the positive values.
pub fn shift_continuous(values: &mut [f64], target: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot shift an empty unit".into()));
    }
    if !(target >= 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target mean {target} is not a nonnegative number")));
    }
    let n = values.len() as f64;
    let shift = values.iter().sum::<f64>() / n - target;
    for v in values.iter_mut() {
        *v -= shift;
    }
    for _ in 0..MAX_REDISTRIBUTION_PASSES {
        let deficit: f64 = values.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        if deficit == 0.0 {
            break;
        }
        let positive: f64 = values.iter().filter(|v| **v > 0.0).sum();
        let keep = if positive > 0.0 { (1.0 - deficit / positive).max(0.0) } else { 0.0 };
        for v in values.iter_mut() {
            *v = if *v > 0.0 { *v * keep } else { 0.0 };
        }
    }
    Ok(())
}

/// Resolves every unit of `table` against its coarse row: categorical cells
/// become classes matching the integer budgets, continuous cells are shifted
/// onto the unit mean. Columns come out in schema order.
pub fn scale_to_marginals(
    table: &IndividualTable,
    coarse: &CoarseTable,
    schema: &Schema,
    seeds: &SeededRng,
) -> Result<IndividualTable> {
    let columns = (0..schema.len())
        .map(|f| {
            table
                .column_of(f)
                .ok_or_else(|| Error::InvalidArgument(format!("table has no column for `{}`", schema.feature(f).name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ranges = table.unit_ranges();
    if ranges.len() != coarse.len() {
        return Err(Error::InvalidArgument(format!("table has {} units, coarse data {}", ranges.len(), coarse.len())));
    }
    let units = ranges
        .par_iter()
        .zip(coarse.units.par_iter())
        .map(|((unit_id, range), unit)| {
            if *unit_id != unit.unit_id || range.len() != unit.population {
                return Err(Error::InvalidArgument(format!(
                    "unit `{unit_id}` with {} rows does not match coarse unit `{}` of {}",
                    range.len(),
                    unit.unit_id,
                    unit.population
                )));
            }
            let rows = &table.rows[range.clone()];
            let mut resolved: Vec<Vec<Cell>> = Vec::with_capacity(schema.len());
            for (f, (&col, feature)) in columns.iter().zip(schema.features()).enumerate() {
                match &unit.values[f] {
                    AggregateValue::Proportions(p) => {
                        let classes = p.len();
                        let probs = rows
                            .iter()
                            .map(|r| match &r.cells[col] {
                                Cell::Probs(v) => Ok(v.clone()),
                                Cell::Class(c) if *c < classes => {
                                    let mut v = vec![0.0; classes];
                                    v[*c] = 1.0;
                                    Ok(v)
                                }
                                _ => Err(Error::InvalidArgument(format!("bad cell for `{}`", feature.name))),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let budget = integerize_budget(unit.population, p);
                        let mut rng = seeds.stream(&format!("scaling/{}", feature.name), &unit.unit_id);
                        let classes = assign_categories(&probs, &budget, &mut rng)?;
                        resolved.push(classes.into_iter().map(Cell::Class).collect());
                    }
                    AggregateValue::Mean(mean) => {
                        let mut values = rows
                            .iter()
                            .map(|r| match r.cells[col] {
                                Cell::Real(v) => Ok(v),
                                _ => Err(Error::InvalidArgument(format!("bad cell for `{}`", feature.name))),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        shift_continuous(&mut values, *mean)?;
                        resolved.push(values.into_iter().map(Cell::Real).collect());
                    }
                }
            }
            Ok(rows
                .iter()
                .enumerate()
                .map(|(i, r)| Record {
                    unit_id: r.unit_id.clone(),
                    person_index: r.person_index,
                    cells: resolved.iter().map(|col| col[i].clone()).collect(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IndividualTable { columns: (0..schema.len()).collect(), rows: units.into_iter().flatten().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(integerize_budget(3, &[0.5, 0.3, 0.2]), vec![1, 1, 1]);
        assert_eq!(integerize_budget(467, &[0.32, 0.68]), vec![149, 318]);
        assert_eq!(integerize_budget(17, &[1.0, 0.0]), vec![17, 0]);
        // equal remainders go to the earlier class
        assert_eq!(integerize_budget(1, &[0.5, 0.5]), vec![1, 0]);
        assert_eq!(integerize_budget(10, &[0.3, 0.3, 0.4]), vec![3, 3, 4]);
    }

    #[test]
    fn exhausted_budget_forces_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = vec![vec![0.1, 0.9]; 2];
        assert_eq!(assign_categories(&probs, &[2, 0], &mut rng).unwrap(), vec![0, 0]);
    }

    #[test]
    fn deterministic_vectors_follow_budget() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
            assert_eq!(assign_categories(&probs, &[1, 1], &mut rng).unwrap(), vec![0, 1]);
        }
    }

    #[test]
    fn zero_mass_rows_use_remaining_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = vec![vec![1.0, 0.0, 0.0]; 4];
        let out = assign_categories(&probs, &[1, 2, 1], &mut rng).unwrap();
        assert_eq!(out[0], 0);
        let mut counts = [0; 3];
        out.iter().for_each(|&c| counts[c] += 1);
        assert_eq!(counts, [1, 2, 1]);
    }

    #[test]
    fn budget_must_cover_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(assign_categories(&[vec![0.5, 0.5]], &[1, 1], &mut rng).is_err());
    }

    #[test]
    fn shift_examples() {
        let mut v = vec![1.0, 3.0];
        shift_continuous(&mut v, 3.0).unwrap();
        assert_eq!(v, vec![2.0, 4.0]);

        let mut v = vec![2.0, 5.0, 8.0];
        shift_continuous(&mut v, 5.0).unwrap();
        assert_eq!(v, vec![2.0, 5.0, 8.0]);

        let mut v = vec![0.1, 0.2, 9.0];
        shift_continuous(&mut v, 2.0).unwrap();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v.iter().sum::<f64>() / 3.0 - 2.0).abs() < 1e-6);
        assert!(v.iter().all(|&x| x >= 0.0));

        let mut v = vec![4.0, 6.0];
        shift_continuous(&mut v, 0.0).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(shift_continuous(&mut [], 1.0).is_err());
    }

    #[test]
    fn shift_conserves_the_sum_before_flooring() {
        let mut v = vec![10.0, 20.0, 33.0, 41.5];
        let before: f64 = v.iter().sum();
        shift_continuous(&mut v, 30.0).unwrap();
        let after: f64 = v.iter().sum();
        assert!(((after - before) - 4.0 * (30.0 - before / 4.0)).abs() < 1e-9 * before);
    }
}
