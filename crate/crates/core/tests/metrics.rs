mod oracles;

use std::collections::BTreeMap;

use mgrank_core::metrics::{average_ranks, eval_report};
use mgrank_core::{plcc, srcc, AttributeSchema, Dataset, DimensionId, ImageRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_permutations_up_to_eight() {
    for n in 2..=8 {
        let base: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 + 0.25).collect();
        oracles::for_each_permutation(n, |perm| {
            let y: Vec<f64> = perm.iter().map(|&i| (i * i) as f64 - 3.0).collect();
            let s = srcc(&base, &y).unwrap();
            assert!((s - oracles::spearman_no_ties(&base, &y)).abs() <= 1e-12, "{perm:?}");
            let p = plcc(&base, &y).unwrap();
            assert!((p - oracles::pearson(&base, &y)).abs() <= 1e-12, "{perm:?}");
        });
    }
}

#[test]
fn random_tied_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(3..40);
        let levels = rng.random_range(2..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let Ok(s) = srcc(&x, &y) else {
            // constant input, no oracle value either
            assert!(x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]));
            continue;
        };
        assert!((s - oracles::spearman(&x, &y)).abs() <= 1e-12);
        assert_eq!(average_ranks(&x), oracles::count_ranks(&x));
        done += 1;
    }
}

#[test]
fn worked_values() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(srcc(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
    assert_eq!(srcc(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!((srcc(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    let y: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
    assert!((plcc(&a, &y).unwrap() - 1.0).abs() < 1e-12);
    assert!((plcc(&[0.0, 1.0, 2.0], &[0.0, 1.0, 4.0]).unwrap() - 0.9608).abs() < 1e-4);
}

fn two_domain_dataset(n: usize) -> Dataset {
    let schema = AttributeSchema::default();
    let records = (0..n)
        .map(|i| {
            let mos = 1.0 + 4.0 * i as f64 / n as f64;
            let attrs = (0..4).map(|a| Some(1.0 + ((i * 7 + a * 3) % n) as f64 * 4.0 / n as f64)).collect();
            ImageRecord::new(format!("img{i}"), format!("d{}", i % 2), mos, attrs).unwrap()
        })
        .collect();
    Dataset::new(schema, records).unwrap()
}

#[test]
fn perfect_predictions_report_ones() {
    let ds = two_domain_dataset(20);
    let mut preds = BTreeMap::new();
    for r in ds.records() {
        for d in ds.schema().dimensions() {
            preds.insert((r.image_id.clone(), d), r.ground_truth(d).unwrap());
        }
    }
    let report = eval_report(&ds, &preds).unwrap();
    assert!(!report.rows.is_empty());
    for row in &report.rows {
        assert!((row.srcc - 1.0).abs() < 1e-12 && (row.plcc - 1.0).abs() < 1e-12, "{row:?}");
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("domain,dimension,n,srcc,plcc\n"));
}

#[test]
fn random_predictions_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let mut large = 0;
    for _ in 0..200 {
        let pred: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        if srcc(&truth, &pred).unwrap().abs() >= 0.3 {
            large += 1;
        }
    }
    // P(|srcc| >= 0.3) is about 0.002 under the null
    assert!(large <= 2, "{large} of 200");
}

#[test]
fn single_domain_report_has_one_domain() {
    let schema = AttributeSchema::from_names(&["Sharpness"]).unwrap();
    let records = (0..5)
        .map(|i| ImageRecord::new(format!("i{i}"), "only", 1.0 + i as f64, vec![Some(5.0 - i as f64)]).unwrap())
        .collect();
    let ds = Dataset::new(schema, records).unwrap();
    let mut preds = BTreeMap::new();
    for r in ds.records() {
        preds.insert((r.image_id.clone(), DimensionId::OVERALL), r.mos);
        preds.insert((r.image_id.clone(), DimensionId::attribute(1)), r.mos);
    }
    let report = eval_report(&ds, &preds).unwrap();
    let domains: std::collections::BTreeSet<_> = report.rows.iter().map(|r| r.domain.as_str()).collect();
    assert_eq!(domains.len(), 1);
    let attr = report.rows.iter().find(|r| r.dimension != "overall").unwrap();
    assert!((attr.srcc + 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn bounded_and_symmetric(x in prop::collection::vec(-5.0..5.0f64, 3..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        if let (Ok(a), Ok(b)) = (srcc(&x, &y), srcc(&y, &x)) {
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let Ok(p) = plcc(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
        }
    }
}
