//! Property tests for invariants that hold for every input, not just fixtures.

use proptest::prelude::*;

use autoduct::dataset::{fit_normalizer, generate_synthetic, split, SyntheticConfig};
use autoduct::ensemble::{aggregate, interval};
use autoduct::evaluation::{mape, rmse, rmspe};
use autoduct::hpo::sobol::Sobol;
use autoduct::hpo::{ei_closed_form, SearchSpace};
use autoduct::neural_net::GaussianPrediction;
use autoduct::stats::{normal_cdf, normal_quantile};

fn members() -> impl Strategy<Value = Vec<GaussianPrediction>> {
    prop::collection::vec((-1e4f64..1e4, 1e-6f64..1e6), 1..40)
        .prop_map(|v| v.into_iter().map(|(mu, var)| GaussianPrediction { mu, var }).collect())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn aggregate_decomposes_and_bounds(preds in members()) {
        let ep = aggregate(&preds).unwrap();
        prop_assert!(close(ep.aleatory_var + ep.epistemic_var, ep.total_var, 1e-12));
        prop_assert!(ep.epistemic_var >= 0.0 && ep.aleatory_var > 0.0);
        let lo = preds.iter().map(|p| p.mu).fold(f64::INFINITY, f64::min);
        let hi = preds.iter().map(|p| p.mu).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ep.mean >= lo - 1e-9 && ep.mean <= hi + 1e-9);
    }

    #[test]
    fn aggregate_ignores_member_order(preds in members(), rot in 0usize..40) {
        let mut shuffled = preds.clone();
        let k = rot % preds.len();
        shuffled.rotate_left(k);
        let (a, b) = (aggregate(&preds).unwrap(), aggregate(&shuffled).unwrap());
        prop_assert!(close(a.mean, b.mean, 1e-12));
        prop_assert!(close(a.total_var, b.total_var, 1e-10));
    }

    #[test]
    fn identical_members_have_no_epistemic_spread(mu in -1e4f64..1e4, var in 1e-6f64..1e6, m in 1usize..20) {
        let ep = aggregate(&vec![GaussianPrediction { mu, var }; m]).unwrap();
        prop_assert!(ep.epistemic_var.abs() <= 1e-9 * mu.abs().max(1.0).powi(2));
        prop_assert!(close(ep.aleatory_var, var, 1e-12));
    }

    #[test]
    fn intervals_nest_by_level(preds in members(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let ep = aggregate(&preds).unwrap();
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        let (lo_s, hi_s) = interval(&ep, small);
        let (lo_l, hi_l) = interval(&ep, large);
        prop_assert!(lo_l <= lo_s && lo_s <= ep.mean && ep.mean <= hi_s && hi_s <= hi_l);
        prop_assert!(close(ep.mean - lo_s, hi_s - ep.mean, 1e-9));
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        prop_assert!((normal_cdf(normal_quantile(p)) - p).abs() <= 1e-9);
    }

    #[test]
    fn expected_improvement_is_nonnegative_and_monotone(
        mu in -5f64..5.0, sigma in 1e-3f64..3.0, inc in -5f64..5.0, step in 0f64..2.0,
    ) {
        let ei = ei_closed_form(mu, sigma, inc);
        prop_assert!(ei >= 0.0);
        // A worse incumbent (larger, for minimization) can only raise the expected gain.
        prop_assert!(ei_closed_form(mu, sigma, inc + step) >= ei - 1e-12);
        prop_assert!(ei >= (inc - mu).max(0.0) - 1e-12);
    }

    #[test]
    fn metrics_are_consistent(pairs in prop::collection::vec((1f64..1e4, 0.1f64..3.0), 1..200)) {
        let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let yhat: Vec<f64> = pairs.iter().map(|p| p.0 * p.1).collect();
        let (r, a, s) = (rmse(&y, &yhat).unwrap(), mape(&y, &yhat).unwrap(), rmspe(&y, &yhat).unwrap());
        prop_assert!(r >= 0.0 && a >= 0.0);
        // Quadratic mean dominates the arithmetic mean.
        prop_assert!(s >= a * (1.0 - 1e-12));
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn sobol_points_stay_in_unit_cube(dims in 1usize..=10, n in 1usize..200, seed in any::<u64>()) {
        for gen in [Sobol::new(dims).unwrap(), Sobol::scrambled(dims, seed).unwrap()] {
            let mut gen = gen;
            for p in gen.take(n).unwrap() {
                prop_assert_eq!(p.len(), dims);
                prop_assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
            }
        }
    }

    #[test]
    fn search_space_round_trips(u in prop::collection::vec(0f64..=1.0, 7)) {
        let space = SearchSpace::standard();
        let hp = space.from_unit_cube(&u);
        prop_assert!(space.contains(&hp));
        let back = space.decode(&space.encode(&hp).unwrap()).unwrap();
        prop_assert!(close(back.learning_rate, hp.learning_rate, 1e-9));
        prop_assert!(close(back.weight_decay, hp.weight_decay, 1e-9));
        prop_assert!((back.dropout_rate - hp.dropout_rate).abs() <= 1e-12);
        prop_assert_eq!(
            (back.batch_size, back.hidden_layers, back.hidden_units, back.activation),
            (hp.batch_size, hp.hidden_layers, hp.hidden_units, hp.activation)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_the_dataset(n in 1usize..400, data_seed in any::<u64>(), seed in any::<u64>(), f in 0.05f64..0.9) {
        let ds = generate_synthetic(&SyntheticConfig { n, seed: data_seed, ..Default::default() }).unwrap();
        let rest = 1.0 - f;
        let fractions = [f, rest * 0.6, 1.0 - f - rest * 0.6];
        let s = split(&ds, fractions, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        let key = |p: &autoduct::dataset::DataPoint| p.inputs.map(f64::to_bits);
        let mut all: Vec<_> = s.train.points.iter().chain(&s.validation.points).chain(&s.test.points).map(key).collect();
        let mut orig: Vec<_> = ds.points.iter().map(key).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
        prop_assert_eq!(split(&ds, fractions, seed).unwrap(), s);
    }

    #[test]
    fn normalizer_round_trips(n in 2usize..300, seed in any::<u64>()) {
        let ds = generate_synthetic(&SyntheticConfig { n, seed, ..Default::default() }).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        for p in &ds.points {
            let back = norm.denormalize_inputs(&norm.normalize_inputs(&p.inputs));
            for (a, b) in back.iter().zip(&p.inputs) {
                prop_assert!(close(*a, *b, 1e-12));
            }
            let y = p.chf.unwrap();
            prop_assert!(close(norm.denormalize_target(norm.normalize_target(y)), y, 1e-12));
        }
    }
}
