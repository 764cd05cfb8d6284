//! Random dataset generators and brute-force reference detectors shared by
//! the property tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bizinsight::datamodel::{
    AtomicInsight, Dataset, Date, DimMap, Direction, InsightKind, MetricKind, MetricRegistry,
    MetricSpec, Record,
};
use bizinsight::insights::DetectorConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Row = (InsightKind, String, DimMap, Date, Date, f64, f64, f64);

pub fn day(n: i32) -> Date {
    Date::from_num_days_from_ce_opt(738_886 + n).expect("valid date")
}

/// Series with ties, zeros, flat runs, jumps, and negative stretches.
pub fn random_series(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let style = rng.random_range(0..4);
    let mut level = rng.random_range(-5..50) as f64;
    (0..len)
        .map(|_| match style {
            0 => rng.random_range(0..6) as f64,
            1 => {
                if rng.random_bool(0.05) {
                    level * rng.random_range(2..6) as f64
                } else {
                    level
                }
            }
            2 => {
                level += rng.random_range(-4..=4) as f64 * 0.25;
                level
            }
            _ => (level + rng.random_range(-3..=3) as f64) * if rng.random_bool(0.04) { 5.0 } else { 1.0 },
        })
        .collect()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> DetectorConfig {
    DetectorConfig {
        window: rng.random_range(3..=30),
        z_threshold: [1.0, 2.0, 3.0, 3.5][rng.random_range(0..4)],
        spike_ratio: [1.5, 2.0, 3.0][rng.random_range(0..3)],
        spike_recovery_ratio: [1.1, 1.5][rng.random_range(0..2)],
        spike_recovery_span: rng.random_range(1..=5),
        min_history: rng.random_range(0..=40),
        top_n: rng.random_range(1..=4),
        comparison_delta: [0.1, 0.25, 0.5][rng.random_range(0..3)],
    }
}

/// Dataset over up to `max_dates` consecutive days with one dimension of
/// one to three values, additive `x` and `y`, and ratio `r = x / y`.
pub fn random_dataset(rng: &mut ChaCha8Rng, max_dates: usize) -> Dataset {
    let dates = rng.random_range(1..=max_dates);
    let slices = ["a", "b", "c"][..rng.random_range(1..=3)].to_vec();
    let xs: Vec<Vec<f64>> = slices.iter().map(|_| random_series(rng, dates)).collect();
    let ys: Vec<Vec<f64>> = slices
        .iter()
        .map(|_| random_series(rng, dates).into_iter().map(f64::abs).collect())
        .collect();
    let mut rows = Vec::new();
    for t in 0..dates {
        let before = rows.len();
        for (s, name) in slices.iter().enumerate() {
            // Holes are allowed, but every date keeps at least one row.
            let last = s + 1 == slices.len();
            if !(last && rows.len() == before) && rng.random_bool(0.05) {
                continue;
            }
            let (x, y) = (xs[s][t], ys[s][t]);
            let mut r = Record::new(day(t as i32)).dim("channel", name).value("x", x).value("y", y);
            r = if y != 0.0 { r.value("r", x / y) } else { r.missing("r") };
            rows.push(r);
        }
    }
    let direction = [Direction::HigherIsBetter, Direction::LowerIsBetter, Direction::Neutral]
        [rng.random_range(0..3)];
    let mut d = Dataset::new(
        rows,
        MetricRegistry::from_specs([
            MetricSpec::additive("x"),
            MetricSpec::additive("y"),
            MetricSpec::ratio("r", "x", "y").with_direction(direction),
        ]),
        vec!["channel".into()],
    );
    d.sort_canonical();
    d
}

pub fn to_rows(insights: &[AtomicInsight]) -> Vec<Row> {
    let mut v: Vec<Row> = insights
        .iter()
        .map(|i| {
            (
                i.kind,
                i.metric.clone(),
                i.dims.clone(),
                i.period_start,
                i.period_end,
                i.value,
                i.baseline,
                i.score,
            )
        })
        .collect();
    sort_rows(&mut v);
    v
}

pub fn sort_rows(v: &mut [Row]) {
    v.sort_by(|a, b| {
        (a.0, &a.1, &a.2, a.3, a.4)
            .cmp(&(b.0, &b.1, &b.2, b.3, b.4))
            .then(a.5.total_cmp(&b.5))
    });
}

// ------------------------------------------------------------- oracles

fn sorted_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn clamp(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else if x.is_infinite() {
        f64::MAX.copysign(x)
    } else {
        x
    }
}

/// (index, value, baseline, score) of every robust-z hit, recomputing the
/// window statistics from scratch at each point.
pub fn shifts_oracle(xs: &[f64], cfg: &DetectorConfig) -> Vec<(usize, f64, f64, f64)> {
    let w = cfg.window;
    let mut out = Vec::new();
    for t in w..xs.len() {
        let win = &xs[t - w..t];
        let med = sorted_median(win);
        let devs: Vec<f64> = win.iter().map(|v| (v - med).abs()).collect();
        let mut mad = sorted_median(&devs) * 1.4826;
        if mad == 0.0 {
            mad = if med == 0.0 { 1e-9 } else { 1e-9 * med.abs() };
        }
        let z = clamp((xs[t] - med) / mad);
        if z.abs() >= cfg.z_threshold {
            out.push((t, xs[t], med, z));
        }
    }
    out
}

/// Every (t, s) pair is tried: a spike at `t` needs some recovery point `s`.
pub fn spikes_oracle(xs: &[f64], cfg: &DetectorConfig) -> Vec<(usize, f64, f64, f64)> {
    let w = cfg.window;
    let mut out = Vec::new();
    if xs.len() < w + cfg.spike_recovery_span {
        return out;
    }
    for t in w..xs.len() {
        let med = sorted_median(&xs[t - w..t]);
        if !(med > 0.0 && xs[t] >= cfg.spike_ratio * med) {
            continue;
        }
        let mut recovered = false;
        for (s, &x) in xs.iter().enumerate().skip(t + 1) {
            if s - t <= cfg.spike_recovery_span && x <= cfg.spike_recovery_ratio * med {
                recovered = true;
            }
        }
        if recovered {
            out.push((t, xs[t], med, clamp(xs[t] / med)));
        }
    }
    out
}

pub fn highs_oracle(xs: &[f64], cfg: &DetectorConfig) -> Vec<(usize, f64, f64, f64)> {
    let mut out = Vec::new();
    for t in cfg.min_history.max(1)..xs.len() {
        let prev = xs[..t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if xs[t] > prev {
            let score = if prev != 0.0 { (xs[t] - prev) / prev.abs() } else { xs[t] - prev };
            out.push((t, xs[t], prev, clamp(score)));
        }
    }
    out
}

fn spec_parts(spec: &MetricSpec) -> Option<(&str, &str)> {
    match spec.kind {
        MetricKind::Ratio => Some((spec.numerator.as_deref()?, spec.denominator.as_deref()?)),
        MetricKind::Additive => None,
    }
}

/// Aggregate over rows for which `keep` holds, in row order.
pub fn agg_oracle(d: &Dataset, spec: &MetricSpec, keep: impl Fn(&Record) -> bool) -> Option<f64> {
    let (mut num, mut den, mut seen) = (0.0, 0.0, false);
    for r in d.rows.iter().filter(|r| keep(r)) {
        match spec_parts(spec) {
            None => {
                if let Some(v) = r.get(&spec.name) {
                    num += v;
                    seen = true;
                }
            }
            Some((n, m)) => {
                if let (Some(a), Some(b)) = (r.get(n), r.get(m)) {
                    num += a;
                    den += b;
                    seen = true;
                }
            }
        }
    }
    match (seen, spec.kind) {
        (false, _) => None,
        (true, MetricKind::Additive) => Some(num),
        (true, MetricKind::Ratio) => (den != 0.0).then(|| num / den),
    }
}

fn in_slice(r: &Record, slice: &DimMap) -> bool {
    slice.iter().all(|(k, v)| r.dims.get(k) == Some(v))
}

pub fn series_oracle(d: &Dataset, spec: &MetricSpec, slice: &DimMap) -> (Vec<Date>, Vec<f64>) {
    let dates: BTreeSet<Date> = d.rows.iter().map(|r| r.date).collect();
    let mut ds = Vec::new();
    let mut xs = Vec::new();
    for date in dates {
        if let Some(v) = agg_oracle(d, spec, |r| r.date == date && in_slice(r, slice)) {
            ds.push(date);
            xs.push(v);
        }
    }
    (ds, xs)
}

fn series_rows(
    d: &Dataset,
    kind: InsightKind,
    slice: &DimMap,
    f: impl Fn(&[f64]) -> Vec<(usize, f64, f64, f64)>,
) -> Vec<Row> {
    let mut out = Vec::new();
    for spec in d.metrics.iter() {
        let (dates, xs) = series_oracle(d, spec, slice);
        for (t, v, b, s) in f(&xs) {
            out.push((kind, spec.name.clone(), slice.clone(), dates[t], dates[t], v, b, s));
        }
    }
    out
}

fn slices(d: &Dataset) -> Vec<DimMap> {
    let mut out = Vec::new();
    for dim in &d.dimensions {
        let values: BTreeSet<&String> = d.rows.iter().filter_map(|r| r.dims.get(dim)).collect();
        for v in values {
            out.push(DimMap::from([(dim.clone(), v.clone())]));
        }
    }
    out
}

pub fn anomalous_shift_rows(d: &Dataset, cfg: &DetectorConfig) -> Vec<Row> {
    series_rows(d, InsightKind::AnomalousShift, &DimMap::new(), |xs| shifts_oracle(xs, cfg))
}

pub fn dimension_anomaly_rows(d: &Dataset, cfg: &DetectorConfig) -> Vec<Row> {
    slices(d)
        .iter()
        .flat_map(|s| series_rows(d, InsightKind::DimensionAnomaly, s, |xs| shifts_oracle(xs, cfg)))
        .collect()
}

pub fn spike_rows(d: &Dataset, cfg: &DetectorConfig) -> Vec<Row> {
    series_rows(d, InsightKind::Spike, &DimMap::new(), |xs| spikes_oracle(xs, cfg))
}

pub fn high_rows(d: &Dataset, cfg: &DetectorConfig) -> Vec<Row> {
    series_rows(d, InsightKind::AllTimeHigh, &DimMap::new(), |xs| highs_oracle(xs, cfg))
}

pub fn top_rows(d: &Dataset, cfg: &DetectorConfig, start: Date, end: Date) -> Vec<Row> {
    let within = |r: &Record| r.date >= start && r.date <= end;
    let mut out = Vec::new();
    for spec in d.metrics.iter() {
        let Some(overall) = agg_oracle(d, spec, within) else { continue };
        for dim in &d.dimensions {
            let mut ranked: Vec<(String, f64)> = Vec::new();
            for s in slices(d).into_iter().filter(|s| s.contains_key(dim)) {
                if let Some(a) = agg_oracle(d, spec, |r| within(r) && in_slice(r, &s)) {
                    ranked.push((s[dim].clone(), a));
                }
            }
            // Selection by repeated best-pick rather than a sort.
            let lower = spec.direction == Direction::LowerIsBetter;
            let mut order = Vec::new();
            let mut pool = ranked.clone();
            while !pool.is_empty() {
                let mut best = 0;
                for i in 1..pool.len() {
                    let (a, b) = (&pool[i], &pool[best]);
                    let better = if lower { a.1 < b.1 } else { a.1 > b.1 };
                    if better || (a.1 == b.1 && a.0 < b.0) {
                        best = i;
                    }
                }
                order.push(pool.remove(best));
            }
            let total: f64 = order.iter().map(|p| p.1).sum();
            for (rank, (name, a)) in order.into_iter().take(cfg.top_n).enumerate() {
                let score = match spec.kind {
                    MetricKind::Additive => {
                        if total != 0.0 {
                            a / total
                        } else {
                            0.0
                        }
                    }
                    MetricKind::Ratio => 1.0 / (rank as f64 + 1.0),
                };
                out.push((
                    InsightKind::TopDimension,
                    spec.name.clone(),
                    DimMap::from([(dim.clone(), name)]),
                    start,
                    end,
                    a,
                    overall,
                    score,
                ));
            }
        }
    }
    out
}

/// Last `window` dates against the `window` dates before them.
pub fn comparison_windows(d: &Dataset, window: usize) -> Option<((Date, Date), (Date, Date))> {
    let dates: Vec<Date> = d.rows.iter().map(|r| r.date).collect::<BTreeSet<_>>().into_iter().collect();
    let n = dates.len();
    if n < 2 * window {
        return None;
    }
    Some(((dates[n - 2 * window], dates[n - window - 1]), (dates[n - window], dates[n - 1])))
}

pub fn comparison_rows(d: &Dataset, cfg: &DetectorConfig, a: (Date, Date), b: (Date, Date)) -> Vec<Row> {
    let in_a = |r: &Record| r.date >= a.0 && r.date <= a.1;
    let in_b = |r: &Record| r.date >= b.0 && r.date <= b.1;
    let mut out = Vec::new();
    for spec in d.metrics.iter() {
        let (Some(oa), Some(ob)) = (agg_oracle(d, spec, in_a), agg_oracle(d, spec, in_b)) else {
            continue;
        };
        if oa == 0.0 {
            continue;
        }
        let g = (ob - oa) / oa.abs();
        for s in slices(d) {
            let sa = agg_oracle(d, spec, |r| in_a(r) && in_slice(r, &s));
            let sb = agg_oracle(d, spec, |r| in_b(r) && in_slice(r, &s));
            let (Some(sa), Some(sb)) = (sa, sb) else { continue };
            if sa == 0.0 {
                continue;
            }
            let gs = (sb - sa) / sa.abs();
            if (gs - g).abs() >= cfg.comparison_delta {
                out.push((InsightKind::DimensionComparison, spec.name.clone(), s, b.0, b.1, sb, sa, gs - g));
            }
        }
    }
    out
}

/// Brute-force result of all six detectors, in the same canonical
/// periods the engine uses.
pub fn all_rows(d: &Dataset, cfg: &DetectorConfig) -> Vec<Row> {
    let mut out = Vec::new();
    let dates: BTreeSet<Date> = d.rows.iter().map(|r| r.date).collect();
    let (Some(&first), Some(&last)) = (dates.first(), dates.last()) else {
        return out;
    };
    out.extend(anomalous_shift_rows(d, cfg));
    out.extend(dimension_anomaly_rows(d, cfg));
    out.extend(spike_rows(d, cfg));
    out.extend(high_rows(d, cfg));
    out.extend(top_rows(d, cfg, first, last));
    if let Some((a, b)) = comparison_windows(d, cfg.window) {
        out.extend(comparison_rows(d, cfg, a, b));
    }
    sort_rows(&mut out);
    out
}

/// Compares one detector's output with its oracle; `Err` describes the
/// first mismatch.
pub fn compare(name: &str, got: &[AtomicInsight], mut want: Vec<Row>) -> Result<(), String> {
    sort_rows(&mut want);
    let got = to_rows(got);
    if got == want {
        Ok(())
    } else {
        let first = got
            .iter()
            .zip(&want)
            .position(|(a, b)| a != b)
            .unwrap_or(got.len().min(want.len()));
        Err(format!(
            "{name}: {} found vs {} expected; first difference at {first}: {:?} vs {:?}",
            got.len(),
            want.len(),
            got.get(first),
            want.get(first)
        ))
    }
}

/// Runs every detector on `d` against its oracle.
pub fn check_all_detectors(d: &Dataset, cfg: &DetectorConfig) -> Result<(), String> {
    use bizinsight::insights::*;
    compare("anomalous_shift", &detect_anomalous_shifts(d, cfg), anomalous_shift_rows(d, cfg))?;
    compare("dimension_anomaly", &detect_dimension_anomalies(d, cfg), dimension_anomaly_rows(d, cfg))?;
    compare("spike", &detect_spikes(d, cfg), spike_rows(d, cfg))?;
    compare("all_time_high", &detect_all_time_highs(d, cfg), high_rows(d, cfg))?;
    let dates: BTreeSet<Date> = d.rows.iter().map(|r| r.date).collect();
    if let (Some(&first), Some(&last)) = (dates.first(), dates.last()) {
        let p = bizinsight::datamodel::Period::new(first, last);
        let top = detect_top_dimensions(d, cfg, p).map_err(|e| e.to_string())?;
        compare("top_dimension", &top, top_rows(d, cfg, first, last))?;
    }
    match (comparison_windows(d, cfg.window), comparison_periods(d, cfg.window)) {
        (Some((a, b)), Some((pa, pb))) => {
            let got = detect_dimension_comparison(d, cfg, pa, pb).map_err(|e| e.to_string())?;
            compare("dimension_comparison", &got.insights, comparison_rows(d, cfg, a, b))?;
        }
        (None, None) => {}
        _ => return Err("comparison periods disagree".into()),
    }
    compare("detect_all", &detect_all(d, cfg).map_err(|e| e.to_string())?, all_rows(d, cfg))
}

/// Plain mean of per-row ratios, the estimate a weighted average replaces.
pub fn naive_ratio_mean(d: &Dataset, num: &str, den: &str) -> Option<f64> {
    let ratios: Vec<f64> = d
        .rows
        .iter()
        .filter_map(|r| match (r.get(num), r.get(den)) {
            (Some(a), Some(b)) if b != 0.0 => Some(a / b),
            _ => None,
        })
        .collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Random text over a small alphabet that makes name collisions likely.
pub fn random_text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const PARTS: [&str; 14] = [
        "Acme", " ", "Corp", "Beta", "-", ".", "ads", "Ltd", "é", "\n", "x", "_", "Acme Corp", "7",
    ];
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| PARTS[rng.random_range(0..PARTS.len())]).collect()
}

pub fn random_names(rng: &mut ChaCha8Rng) -> Vec<String> {
    const POOL: [&str; 9] = ["Acme", "Acme Corp", "Beta", "Beta Ltd", "ads", "x", "Corp-7", "é", "a.b"];
    let n = rng.random_range(0..=4);
    (0..n).map(|_| POOL[rng.random_range(0..POOL.len())].to_string()).collect()
}
