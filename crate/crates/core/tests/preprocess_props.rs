mod support;

use bizinsight::datamodel::{Dataset, DimMap, FillStrategy, MetricKind, Period, Record, TransformPlan};
use bizinsight::insights::aggregate;
use bizinsight::preprocess::{apply_plan, clean, precalculate, standard_slices};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

/// Random dataset with strictly positive denominators and no missing cells.
fn complete_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let mut d = random_dataset(rng, 90);
    for r in &mut d.rows {
        let x = r.get("x").unwrap();
        let y = r.get("y").unwrap() + 1.0;
        r.values.insert("y".into(), Some(y));
        r.values.insert("r".into(), Some(x / y));
    }
    d
}

/// Adds duplicate keys and holes to a dataset.
fn dirty(rng: &mut ChaCha8Rng, d: &Dataset) -> Dataset {
    let mut out = d.clone();
    let n = out.rows.len();
    for _ in 0..rng.random_range(0..=n.min(5)) {
        let mut r: Record = out.rows[rng.random_range(0..n)].clone();
        r.values.insert("x".into(), Some(rng.random_range(-50..500) as f64));
        out.rows.push(r);
    }
    for r in &mut out.rows {
        if rng.random_bool(0.1) {
            r.values.insert("x".into(), None);
        }
    }
    out
}

fn periods(d: &Dataset) -> Vec<Period> {
    let dates = d.dates();
    let (first, last) = (dates[0], *dates.last().unwrap());
    let mid = dates[dates.len() / 2];
    vec![Period::new(first, last), Period::new(first, mid), Period::new(mid, last)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Ratio averages equal the ratio of summed components, never a mean
    /// of per-row ratios.
    #[test]
    fn precalc_ratios_are_sum_over_sum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = complete_dataset(&mut rng);
        let slices = standard_slices(&d);
        let ps = periods(&d);
        // Every slice covers the full period; sub-periods only for the whole dataset.
        let table = precalculate(&d, &ps[..1], &slices).unwrap();
        prop_assert_eq!(table.entries.len(), d.metrics.len() * slices.len());
        let whole = precalculate(&d, &ps, &[DimMap::new()]).unwrap();
        for e in table.entries.iter().chain(&whole.entries) {
            let keep = |r: &Record| e.period.contains(r.date) && e.slice.iter().all(|(k, v)| r.dims.get(k) == Some(v));
            let dates: std::collections::BTreeSet<_> = d.rows.iter().filter(|r| keep(r)).map(|r| r.date).collect();
            prop_assert_eq!(e.count, dates.len());
            let spec = d.metrics.get(&e.metric).unwrap();
            match spec.kind {
                MetricKind::Ratio => {
                    let num: f64 = d.rows.iter().filter(|r| keep(r)).map(|r| r.get("x").unwrap()).sum();
                    let den: f64 = d.rows.iter().filter(|r| keep(r)).map(|r| r.get("y").unwrap()).sum();
                    prop_assert_eq!(e.average, num / den);
                    prop_assert_eq!(e.total, None);
                }
                MetricKind::Additive => {
                    let total: f64 = d.rows.iter().filter(|r| keep(r)).map(|r| r.get(&e.metric).unwrap()).sum();
                    prop_assert_eq!(e.total, Some(total));
                    prop_assert_eq!(e.average, total / dates.len() as f64);
                }
            }
        }
    }

    /// Slice aggregates of additive metrics add up to the overall figure,
    /// and ratio metrics recombine from their summed components.
    #[test]
    fn slice_aggregates_recombine(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = complete_dataset(&mut rng);
        let values = d.dimension_values("channel");
        let parts = |m: &str| -> Vec<f64> {
            values.iter().map(|v| {
                let f = DimMap::from([("channel".to_string(), v.clone())]);
                aggregate(&d, d.metrics.get(m).unwrap(), &f, None).unwrap()
            }).collect()
        };
        let whole = |m: &str| aggregate(&d, d.metrics.get(m).unwrap(), &DimMap::new(), None).unwrap();
        // Values are multiples of 0.25, so these sums are exact.
        prop_assert_eq!(parts("x").iter().sum::<f64>(), whole("x"));
        prop_assert_eq!(parts("y").iter().sum::<f64>(), whole("y"));
        prop_assert_eq!(whole("r"), whole("x") / whole("y"));
    }

    #[test]
    fn clean_is_idempotent(seed in any::<u64>(), k in prop_oneof![Just(None), (1.0f64..6.0).prop_map(Some)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = complete_dataset(&mut rng);
        let d = dirty(&mut rng, &base);
        prop_assume!(d.rows.iter().any(|r| r.get("x").is_some()));
        for strategy in [FillStrategy::Median, FillStrategy::Zero, FillStrategy::Drop] {
            let (once, _) = clean(&d, strategy, k).unwrap();
            let (twice, report) = clean(&once, strategy, k).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report.duplicates_removed + report.values_imputed + report.rows_dropped + report.outliers_capped, 0);
            prop_assert!(!once.has_missing());
        }
    }

    #[test]
    fn empty_plan_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dataset(&mut rng, 60);
        prop_assert_eq!(apply_plan(&d, &TransformPlan::new(vec![])).unwrap(), d);
    }
}

/// A weighted average differs from the mean of per-row ratios whenever the
/// denominators are unequal.
#[test]
fn naive_mean_witness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut differs = 0;
    for _ in 0..200 {
        let d = complete_dataset(&mut rng);
        let all = Period::new(d.dates()[0], *d.dates().last().unwrap());
        let table = precalculate(&d, &[all], &[DimMap::new()]).unwrap();
        let avg = table.get("r", &DimMap::new(), &all).unwrap().average;
        if (naive_ratio_mean(&d, "x", "y").unwrap() - avg).abs() > 1e-9 * avg.abs().max(1.0) {
            differs += 1;
        }
    }
    assert!(differs > 100, "only {differs} of 200 datasets separate the two estimates");
}
