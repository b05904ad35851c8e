use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sync_core::coarse::{AggregateValue, AggregationUnit, CoarseTable};
use sync_core::copula::{solve_beta, solve_lognormal, Marginal};
use sync_core::individual::{aggregate, Cell, IndividualTable, Record};
use sync_core::matching::{probabilistic_match, AttributeValue, MatchQuery};
use sync_core::pipeline::{generate, PipelineConfig};
use sync_core::scaling::{assign_categories, integerize_budget, shift_continuous};
use sync_core::schema::{FeatureSchema, Schema};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], k).prop_map(|mut w| {
        if w.iter().sum::<f64>() == 0.0 {
            w[0] = 1.0;
        }
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    })
}

proptest! {
    #[test]
    fn budgets_sum_to_population_and_stay_near_quota(n in 1usize..2000, p in (2usize..8).prop_flat_map(simplex)) {
        let counts = integerize_budget(n, &p);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, q) in counts.iter().zip(&p) {
            prop_assert!((*c as f64 - n as f64 * q).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn assignments_meet_any_budget(
        probs in (1usize..6, 0usize..30).prop_flat_map(|(k, rows)| prop::collection::vec(prop::collection::vec(0.0..1.0f64, k), rows)),
        seed in any::<u64>(),
    ) {
        let k = probs.first().map_or(1, Vec::len);
        let mut budget = vec![0usize; k];
        for i in 0..probs.len() {
            budget[(i * 7 + seed as usize) % k] += 1;
        }
        let out = assign_categories(&probs, &budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut counts = vec![0usize; k];
        out.iter().for_each(|&c| counts[c] += 1);
        prop_assert_eq!(counts, budget);
    }

    #[test]
    fn shifted_values_hit_the_mean(values in prop::collection::vec(0.0..1e4f64, 1..50), target in 0.0..1e4f64) {
        let mut v = values.clone();
        shift_continuous(&mut v, target).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(v.iter().all(|&x| x >= 0.0));
        prop_assert!((mean - target).abs() <= 1e-6 * target.max(1.0));
    }

    #[test]
    fn beta_solver_keeps_the_mean(mean in 0.001..0.999f64, sd in 0.0..0.5f64) {
        let m = solve_beta(mean, sd).unwrap();
        prop_assert!((m.mean() - mean).abs() <= 1e-9 * mean);
        if let Marginal::Beta { alpha, beta } = m {
            prop_assert!(alpha > 0.0 && beta > 0.0);
        }
        let v = sd * sd;
        if v > 1e-6 && v < 0.999 * mean * (1.0 - mean) {
            prop_assert!((m.sd() - sd).abs() <= 1e-9 * sd.max(1e-3));
        }
    }

    #[test]
    fn lognormal_solver_keeps_the_moments(mean in 1e-3..1e6f64, cv in 0.0..5.0f64) {
        let m = solve_lognormal(mean, cv * mean).unwrap();
        prop_assert!((m.mean() - mean).abs() <= 1e-9 * mean);
        prop_assert!((m.sd() - cv * mean).abs() <= 1e-8 * mean.max(cv * mean));
    }

    #[test]
    fn match_order_ignores_weight_scale(
        people in prop::collection::vec((0usize..3, 0.0..90.0f64), 1..25),
        age in 0.0..90.0f64,
        w in 0.01..10.0f64,
        scale in 0.01..100.0f64,
    ) {
        let schema = Schema::new(vec![
            FeatureSchema::categorical("band", &["a", "b", "c"], 0).ordinal(),
            FeatureSchema::continuous("age", 0),
        ]).unwrap();
        let table = IndividualTable {
            columns: vec![0, 1],
            rows: people.iter().enumerate().map(|(k, &(b, a))| Record {
                unit_id: "u".into(), person_index: k, cells: vec![Cell::Class(b), Cell::Real(a)],
            }).collect(),
        };
        let rank = |s: f64| {
            let q = MatchQuery {
                unit_id: "u".into(),
                attributes: [("band".to_string(), AttributeValue::Label("b".into())), ("age".to_string(), AttributeValue::Number(age))].into(),
                weights: [("band".to_string(), w * s), ("age".to_string(), s)].into(),
            };
            probabilistic_match(&q, &table, &schema, people.len()).unwrap()
        };
        let (a, b) = (rank(1.0), rank(scale));
        prop_assert_eq!(a.len(), people.len());
        prop_assert!(a.windows(2).all(|p| p[0].distance <= p[1].distance));
        // orders agree up to distance ties, which rescaling can split by rounding
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.row == y.row || (x.distance - a.iter().find(|c| c.row == y.row).unwrap().distance).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_output_reaggregates_to_its_input(
        units in prop::collection::vec((1usize..40, simplex(2), simplex(3), 1.0..500.0f64, simplex(4)), 3..25),
        seed in any::<u64>(),
        outlier_removal in any::<bool>(),
    ) {
        let schema = Schema::new(vec![
            FeatureSchema::categorical("gender", &["F", "M"], 0),
            FeatureSchema::categorical("age", &["young", "mid", "old"], 0).ordinal(),
            FeatureSchema::continuous("income", 1),
            FeatureSchema::categorical("pet", &["cat", "dog", "fish", "none"], 1),
        ]).unwrap();
        let coarse = CoarseTable::new(units.iter().enumerate().map(|(i, (n, g, a, inc, pet))| AggregationUnit {
            unit_id: format!("u{i:02}"),
            population: *n,
            values: vec![
                AggregateValue::Proportions(g.clone()),
                AggregateValue::Proportions(a.clone()),
                AggregateValue::Mean(*inc),
                AggregateValue::Proportions(pet.clone()),
            ],
        }).collect());
        let config = PipelineConfig { seed, outlier_removal, ..PipelineConfig::default() };
        let out = generate(&coarse, &schema, &config).unwrap();
        let back = aggregate(&out.individuals, &schema).unwrap();
        for (u, b) in coarse.units.iter().zip(&back.units) {
            prop_assert_eq!(&u.unit_id, &b.unit_id);
            for (x, y) in u.values.iter().zip(&b.values) {
                match (x, y) {
                    (AggregateValue::Proportions(p), AggregateValue::Proportions(q)) => {
                        let want = integerize_budget(u.population, p);
                        let got: Vec<usize> = q.iter().map(|v| (v * u.population as f64).round() as usize).collect();
                        prop_assert_eq!(got, want);
                    }
                    (AggregateValue::Mean(m), AggregateValue::Mean(g)) => prop_assert!((m - g).abs() <= 1e-6 * m),
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
