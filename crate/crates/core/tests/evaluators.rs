mod common;

use latnas::evaluators::{by_name, Evaluator, StructuredSurrogate};
use latnas::latency::LatencyEstimator;
use latnas::optimizer::{best_so_far, run_search, Optimizer, OptimizerConfig, Strategy};
use latnas::sampler::{sample_encodings, LatencyBucket};
use latnas::search_space::SearchSpaceSpec;

/// Random search with 400 draws must not reliably get within 1% of the
/// enumerated optimum, or the surrogate would be too easy to say anything
/// about a guided search.
#[test]
fn random_search_leaves_a_gap_on_the_shrunken_space() {
    let small = common::enumerated_shrunken();
    let est = LatencyEstimator::analytic(small.space.clone());
    let eval = StructuredSurrogate::new(small.space.clone());
    let bucket = LatencyBucket::new(0.0, small.upper_ms);
    let gaps: Vec<f64> = (0..10)
        .map(|seed| {
            let opt = Optimizer::new(small.space.clone(), OptimizerConfig::default(), seed);
            let h = run_search(&opt, Strategy::Random, &eval, &bucket, &est, 400).unwrap();
            (small.optimum - best_so_far(&h).last().unwrap()) / small.optimum
        })
        .collect();
    let median = common::median(gaps.clone());
    assert!(median >= 0.01, "median gap {median:.4}, gaps {gaps:?}");
}

#[test]
fn shrunken_fixture_is_small_and_enumerable() {
    let small = common::enumerated_shrunken();
    let card: usize = small.space.cardinality().to_string().parse().unwrap();
    assert!(card <= 4096);
    assert_eq!(small.points.len(), card);
    let feasible = small.points.iter().filter(|p| p.0 < small.upper_ms).count();
    assert!(feasible * 2 <= card && feasible * 2 >= card - 2, "{feasible} of {card}");
}

#[test]
fn evaluators_are_pure() {
    let space = SearchSpaceSpec::table1();
    let encodings = sample_encodings(&space, 200, 1).unwrap();
    for (name, noise) in [("surrogate", None), ("surrogate", Some(3)), ("ackley", None)] {
        let a = by_name(name, space.clone(), noise).unwrap();
        let b = by_name(name, space.clone(), noise).unwrap();
        assert!(a.is_deterministic());
        for e in &encodings {
            let x = a.evaluate(e).unwrap();
            assert_eq!(x.to_bits(), b.evaluate(e).unwrap().to_bits(), "{name}");
            assert_eq!(x.to_bits(), a.evaluate(e).unwrap().to_bits(), "{name}");
        }
    }
}

#[test]
fn noise_changes_values_but_not_much() {
    let space = SearchSpaceSpec::table1();
    let clean = StructuredSurrogate::new(space.clone());
    let noisy = StructuredSurrogate::new(space.clone()).with_noise(1);
    let encodings = sample_encodings(&space, 100, 1).unwrap();
    let moved = encodings
        .iter()
        .filter(|e| clean.evaluate(e).unwrap() != noisy.evaluate(e).unwrap())
        .count();
    assert!(moved > 90);
    for e in &encodings {
        assert!((clean.evaluate(e).unwrap() - noisy.evaluate(e).unwrap()).abs() < 0.05);
    }
}

#[test]
fn unknown_evaluator_name() {
    assert!(by_name("resnet-training", SearchSpaceSpec::table1(), None).is_none());
}
