//! Rule-based detectors for the six insight categories. The output of
//! [`detect_all`] is also the ground truth the benchmark scores recall
//! against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    sort_insights, AtomicInsight, Dataset, Date, DimMap, Direction, InsightKind, MetricKind,
    MetricSpec, Period,
};
use crate::stats::median;

/// Consistency constant that makes MAD estimate sigma under normality.
pub const MAD_SCALE: f64 = 1.4826;

/// Relative epsilon substituted for a zero MAD.
pub const MAD_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("period {0} contains no rows")]
    EmptyPeriod(Period),
    #[error("periods {0} and {1} are invalid or overlap")]
    InvalidPeriods(Period, Period),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub window: usize,
    pub z_threshold: f64,
    pub spike_ratio: f64,
    pub spike_recovery_ratio: f64,
    pub spike_recovery_span: usize,
    pub min_history: usize,
    pub top_n: usize,
    pub comparison_delta: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: 28,
            z_threshold: 3.0,
            spike_ratio: 2.0,
            spike_recovery_ratio: 1.5,
            spike_recovery_span: 3,
            min_history: 30,
            top_n: 3,
            comparison_delta: 0.25,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::InvalidConfig(m.to_string()));
        if self.window < 3 {
            return bad("window must be at least 3");
        }
        if !(self.spike_ratio > 1.0 && self.spike_recovery_ratio > 1.0) {
            return bad("spike ratios must exceed 1");
        }
        if !(self.z_threshold > 0.0 && self.comparison_delta > 0.0) {
            return bad("thresholds must be positive");
        }
        if self.top_n < 1 {
            return bad("top_n must be at least 1");
        }
        if self.spike_recovery_span < 1 {
            return bad("spike_recovery_span must be at least 1");
        }
        Ok(())
    }
}

/// Series-level primitives. Indices refer to positions in the input slice.
pub mod series {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Hit {
        pub index: usize,
        pub value: f64,
        pub baseline: f64,
        pub score: f64,
    }

    fn finite_or_max(x: f64) -> f64 {
        if x.is_finite() {
            x
        } else if x.is_nan() {
            0.0
        } else {
            f64::MAX.copysign(x)
        }
    }

    /// Sorted sliding window supporting O(w) updates.
    struct SortedWindow {
        buf: Vec<f64>,
    }

    impl SortedWindow {
        fn new(init: &[f64]) -> Self {
            let mut buf = init.to_vec();
            buf.sort_by(f64::total_cmp);
            Self { buf }
        }

        fn slide(&mut self, out: f64, inn: f64) {
            let pos = self
                .buf
                .binary_search_by(|p| p.total_cmp(&out))
                .expect("outgoing value present");
            self.buf.remove(pos);
            let at = self.buf.partition_point(|p| p.total_cmp(&inn).is_lt());
            self.buf.insert(at, inn);
        }

        fn median(&self) -> f64 {
            let n = self.buf.len();
            if n % 2 == 1 {
                self.buf[n / 2]
            } else {
                (self.buf[n / 2 - 1] + self.buf[n / 2]) / 2.0
            }
        }
    }

    /// Rolling median of the `w` points strictly before each index `t >= w`.
    pub fn trailing_medians(xs: &[f64], w: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; xs.len()];
        if xs.len() <= w {
            return out;
        }
        let mut win = SortedWindow::new(&xs[..w]);
        for t in w..xs.len() {
            if t > w {
                win.slide(xs[t - w - 1], xs[t - 1]);
            }
            out[t] = Some(win.median());
        }
        out
    }

    /// Points whose robust z against the trailing window reaches the threshold.
    pub fn anomalous_shifts(xs: &[f64], cfg: &DetectorConfig) -> Vec<Hit> {
        let w = cfg.window;
        if xs.len() < w + 1 {
            return Vec::new();
        }
        let medians = trailing_medians(xs, w);
        let mut hits = Vec::new();
        for t in w..xs.len() {
            let med = medians[t].expect("t >= window");
            let window = &xs[t - w..t];
            let devs: Vec<f64> = window.iter().map(|v| (v - med).abs()).collect();
            let mut spread = median(&devs).expect("non-empty") * MAD_SCALE;
            if spread == 0.0 {
                spread = if med != 0.0 {
                    MAD_EPSILON * med.abs()
                } else {
                    MAD_EPSILON
                };
            }
            let z = finite_or_max((xs[t] - med) / spread);
            if z.abs() >= cfg.z_threshold {
                hits.push(Hit {
                    index: t,
                    value: xs[t],
                    baseline: med,
                    score: z,
                });
            }
        }
        hits
    }

    /// Sharp rise to at least `spike_ratio` times the trailing median,
    /// followed within `spike_recovery_span` points by a fall back to at
    /// most `spike_recovery_ratio` times that median. Non-positive
    /// medians never produce spikes.
    pub fn spikes(xs: &[f64], cfg: &DetectorConfig) -> Vec<Hit> {
        let w = cfg.window;
        if xs.len() < w + cfg.spike_recovery_span {
            return Vec::new();
        }
        let medians = trailing_medians(xs, w);
        let mut hits = Vec::new();
        for t in w..xs.len() {
            let med = medians[t].expect("t >= window");
            if med <= 0.0 || xs[t] < cfg.spike_ratio * med {
                continue;
            }
            let last = (t + cfg.spike_recovery_span).min(xs.len() - 1);
            let recovered = xs[t + 1..=last]
                .iter()
                .any(|&s| s <= cfg.spike_recovery_ratio * med);
            if recovered {
                hits.push(Hit {
                    index: t,
                    value: xs[t],
                    baseline: med,
                    score: finite_or_max(xs[t] / med),
                });
            }
        }
        hits
    }

    /// Strict new maxima at or after `min_history` points.
    pub fn all_time_highs(xs: &[f64], cfg: &DetectorConfig) -> Vec<Hit> {
        let mut hits = Vec::new();
        let mut prev_max = f64::NEG_INFINITY;
        for (t, &x) in xs.iter().enumerate() {
            if t >= cfg.min_history && t > 0 && x > prev_max {
                let score = if prev_max != 0.0 {
                    (x - prev_max) / prev_max.abs()
                } else {
                    x - prev_max
                };
                hits.push(Hit {
                    index: t,
                    value: x,
                    baseline: prev_max,
                    score: finite_or_max(score),
                });
            }
            prev_max = prev_max.max(x);
        }
        hits
    }
}

fn metric_refs(spec: &MetricSpec) -> Option<(&str, &str)> {
    match spec.kind {
        MetricKind::Ratio => Some((spec.numerator.as_deref()?, spec.denominator.as_deref()?)),
        MetricKind::Additive => None,
    }
}

/// Running aggregate for one metric: sum for additive metrics,
/// sum/sum for ratio metrics.
#[derive(Debug, Clone, Copy, Default)]
struct Agg {
    num: f64,
    den: f64,
    seen: bool,
}

impl Agg {
    fn add(&mut self, spec: &MetricSpec, row: &crate::datamodel::Record) {
        match metric_refs(spec) {
            None => {
                if let Some(v) = row.get(&spec.name) {
                    self.num += v;
                    self.seen = true;
                }
            }
            Some((n, d)) => {
                if let (Some(a), Some(b)) = (row.get(n), row.get(d)) {
                    self.num += a;
                    self.den += b;
                    self.seen = true;
                }
            }
        }
    }

    fn value(&self, spec: &MetricSpec) -> Option<f64> {
        if !self.seen {
            return None;
        }
        match spec.kind {
            MetricKind::Additive => Some(self.num),
            MetricKind::Ratio => (self.den != 0.0).then(|| self.num / self.den),
        }
    }
}

/// Aggregate of one metric over the rows matching `filter` inside `period`.
pub fn aggregate(
    d: &Dataset,
    spec: &MetricSpec,
    filter: &DimMap,
    period: Option<Period>,
) -> Option<f64> {
    let mut agg = Agg::default();
    for row in &d.rows {
        if period.is_some_and(|p| !p.contains(row.date)) || !row.matches(filter) {
            continue;
        }
        agg.add(spec, row);
    }
    agg.value(spec)
}

/// Per-date aggregated series of one metric over the rows matching `filter`.
/// Dates where the aggregate is undefined are skipped.
pub fn metric_series(d: &Dataset, spec: &MetricSpec, filter: &DimMap) -> Vec<(Date, f64)> {
    let mut by_date: BTreeMap<Date, Agg> = BTreeMap::new();
    for row in d.rows.iter().filter(|r| r.matches(filter)) {
        by_date.entry(row.date).or_default().add(spec, row);
    }
    by_date
        .into_iter()
        .filter_map(|(date, agg)| agg.value(spec).map(|v| (date, v)))
        .collect()
}

fn hits_to_insights(
    kind: InsightKind,
    metric: &str,
    dims: &DimMap,
    dates: &[Date],
    hits: Vec<series::Hit>,
) -> Vec<AtomicInsight> {
    hits.into_iter()
        .map(|h| {
            let date = dates[h.index];
            AtomicInsight {
                kind,
                metric: metric.to_string(),
                dims: dims.clone(),
                period_start: date,
                period_end: date,
                value: h.value,
                baseline: h.baseline,
                score: h.score,
                description: describe(kind, metric),
            }
        })
        .collect()
}

fn describe(kind: InsightKind, metric: &str) -> String {
    match kind {
        InsightKind::AnomalousShift => format!("{metric} deviated from its recent pattern"),
        InsightKind::DimensionAnomaly => {
            format!("{metric} deviated from its recent pattern within one segment")
        }
        InsightKind::Spike => format!("{metric} rose sharply and fell back quickly"),
        InsightKind::AllTimeHigh => format!("{metric} reached a new all-time high"),
        InsightKind::TopDimension => format!("segment leading on {metric}"),
        InsightKind::DimensionComparison => {
            format!("segment growth on {metric} diverged from the overall trend")
        }
    }
}

fn run_series_detector(
    d: &Dataset,
    kind: InsightKind,
    filter: &DimMap,
    detector: impl Fn(&[f64]) -> Vec<series::Hit>,
) -> Vec<AtomicInsight> {
    let mut out = Vec::new();
    for spec in d.metrics.iter() {
        let s = metric_series(d, spec, filter);
        let dates: Vec<Date> = s.iter().map(|p| p.0).collect();
        let xs: Vec<f64> = s.iter().map(|p| p.1).collect();
        out.extend(hits_to_insights(kind, &spec.name, filter, &dates, detector(&xs)));
    }
    out
}

pub fn detect_anomalous_shifts(d: &Dataset, cfg: &DetectorConfig) -> Vec<AtomicInsight> {
    run_series_detector(d, InsightKind::AnomalousShift, &DimMap::new(), |xs| {
        series::anomalous_shifts(xs, cfg)
    })
}

/// Robust-z detection applied to every (dimension column, value) slice.
pub fn detect_dimension_anomalies(d: &Dataset, cfg: &DetectorConfig) -> Vec<AtomicInsight> {
    let mut out = Vec::new();
    for dim in &d.dimensions {
        for value in d.dimension_values(dim) {
            let filter = DimMap::from([(dim.clone(), value)]);
            out.extend(run_series_detector(
                d,
                InsightKind::DimensionAnomaly,
                &filter,
                |xs| series::anomalous_shifts(xs, cfg),
            ));
        }
    }
    out
}

pub fn detect_spikes(d: &Dataset, cfg: &DetectorConfig) -> Vec<AtomicInsight> {
    run_series_detector(d, InsightKind::Spike, &DimMap::new(), |xs| {
        series::spikes(xs, cfg)
    })
}

pub fn detect_all_time_highs(d: &Dataset, cfg: &DetectorConfig) -> Vec<AtomicInsight> {
    run_series_detector(d, InsightKind::AllTimeHigh, &DimMap::new(), |xs| {
        series::all_time_highs(xs, cfg)
    })
}

fn rows_in(d: &Dataset, p: Period) -> usize {
    d.rows.iter().filter(|r| p.contains(r.date)).count()
}

/// Best-performing dimension values per (metric, dimension column) over a
/// period. Higher is better unless the metric says otherwise; ties go to
/// the lexicographically smaller value.
pub fn detect_top_dimensions(
    d: &Dataset,
    cfg: &DetectorConfig,
    period: Period,
) -> Result<Vec<AtomicInsight>, DetectError> {
    if !period.is_valid() || rows_in(d, period) == 0 {
        return Err(DetectError::EmptyPeriod(period));
    }
    let mut out = Vec::new();
    for spec in d.metrics.iter() {
        let Some(overall) = aggregate(d, spec, &DimMap::new(), Some(period)) else {
            continue;
        };
        for dim in &d.dimensions {
            let mut ranked: Vec<(String, f64)> = d
                .dimension_values(dim)
                .into_iter()
                .filter_map(|v| {
                    let f = DimMap::from([(dim.clone(), v.clone())]);
                    aggregate(d, spec, &f, Some(period)).map(|a| (v, a))
                })
                .collect();
            let ascending = spec.direction == Direction::LowerIsBetter;
            ranked.sort_by(|a, b| {
                let ord = if ascending {
                    a.1.total_cmp(&b.1)
                } else {
                    b.1.total_cmp(&a.1)
                };
                ord.then_with(|| a.0.cmp(&b.0))
            });
            let total: f64 = ranked.iter().map(|r| r.1).sum();
            for (rank, (value, agg)) in ranked.into_iter().take(cfg.top_n).enumerate() {
                let score = match spec.kind {
                    MetricKind::Additive if total != 0.0 => agg / total,
                    MetricKind::Additive => 0.0,
                    MetricKind::Ratio => 1.0 / (rank + 1) as f64,
                };
                out.push(AtomicInsight {
                    kind: InsightKind::TopDimension,
                    metric: spec.name.clone(),
                    dims: DimMap::from([(dim.clone(), value)]),
                    period_start: period.start,
                    period_end: period.end,
                    value: agg,
                    baseline: overall,
                    score,
                    description: describe(InsightKind::TopDimension, &spec.name),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonOutcome {
    pub insights: Vec<AtomicInsight>,
    /// Slices (or whole metrics) skipped because their first-period aggregate was zero or undefined.
    pub skipped: usize,
}

/// Slices whose growth from `period_a` to `period_b` diverges from the
/// overall growth by at least `comparison_delta`.
pub fn detect_dimension_comparison(
    d: &Dataset,
    cfg: &DetectorConfig,
    period_a: Period,
    period_b: Period,
) -> Result<ComparisonOutcome, DetectError> {
    if !period_a.is_valid() || !period_b.is_valid() || period_a.overlaps(&period_b) {
        return Err(DetectError::InvalidPeriods(period_a, period_b));
    }
    for p in [period_a, period_b] {
        if rows_in(d, p) == 0 {
            return Err(DetectError::EmptyPeriod(p));
        }
    }
    let growth = |a: f64, b: f64| (b - a) / a.abs();
    let mut outcome = ComparisonOutcome::default();
    for spec in d.metrics.iter() {
        let all = DimMap::new();
        let (Some(agg_a), Some(agg_b)) = (
            aggregate(d, spec, &all, Some(period_a)),
            aggregate(d, spec, &all, Some(period_b)),
        ) else {
            outcome.skipped += 1;
            continue;
        };
        if agg_a == 0.0 {
            outcome.skipped += 1;
            continue;
        }
        let g = growth(agg_a, agg_b);
        for dim in &d.dimensions {
            for value in d.dimension_values(dim) {
                let f = DimMap::from([(dim.clone(), value)]);
                let a = aggregate(d, spec, &f, Some(period_a));
                let b = aggregate(d, spec, &f, Some(period_b));
                let (Some(a), Some(b)) = (a, b) else {
                    outcome.skipped += 1;
                    continue;
                };
                if a == 0.0 {
                    outcome.skipped += 1;
                    continue;
                }
                let gs = growth(a, b);
                if (gs - g).abs() >= cfg.comparison_delta {
                    outcome.insights.push(AtomicInsight {
                        kind: InsightKind::DimensionComparison,
                        metric: spec.name.clone(),
                        dims: f,
                        period_start: period_b.start,
                        period_end: period_b.end,
                        value: b,
                        baseline: a,
                        score: gs - g,
                        description: describe(InsightKind::DimensionComparison, &spec.name),
                    });
                }
            }
        }
    }
    Ok(outcome)
}

/// The canonical comparison periods: the last `window` dates against the
/// `window` dates before them. `None` when there is not enough history.
pub fn comparison_periods(d: &Dataset, window: usize) -> Option<(Period, Period)> {
    let dates = d.dates();
    if dates.len() < 2 * window {
        return None;
    }
    let n = dates.len();
    let b = Period::new(dates[n - window], dates[n - 1]);
    let a = Period::new(dates[n - 2 * window], dates[n - window - 1]);
    Some((a, b))
}

/// Union of all six detectors over canonical periods, sorted canonically.
pub fn detect_all(d: &Dataset, cfg: &DetectorConfig) -> Result<Vec<AtomicInsight>, DetectError> {
    cfg.validate()?;
    let Some((first, last)) = d.date_range() else {
        return Ok(Vec::new());
    };
    let mut out = detect_anomalous_shifts(d, cfg);
    out.extend(detect_dimension_anomalies(d, cfg));
    out.extend(detect_spikes(d, cfg));
    out.extend(detect_all_time_highs(d, cfg));
    out.extend(detect_top_dimensions(d, cfg, Period::new(first, last))?);
    if let Some((a, b)) = comparison_periods(d, cfg.window) {
        out.extend(detect_dimension_comparison(d, cfg, a, b)?.insights);
    }
    sort_insights(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{MetricRegistry, Record};
    use chrono::Duration;

    fn day0() -> Date {
        Date::from_ymd_opt(2024, 1, 1).unwrap()
    }

    fn single_series(xs: &[f64]) -> Dataset {
        let rows = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| Record::new(day0() + Duration::days(i as i64)).value("sessions", x))
            .collect();
        Dataset::new(
            rows,
            MetricRegistry::from_specs([MetricSpec::additive("sessions")]),
            vec![],
        )
    }

    fn channel_dataset(per_day: &[(&str, Vec<f64>)]) -> Dataset {
        let mut rows = Vec::new();
        for (ch, xs) in per_day {
            for (i, &x) in xs.iter().enumerate() {
                rows.push(
                    Record::new(day0() + Duration::days(i as i64))
                        .dim("channel", ch)
                        .value("sessions", x),
                );
            }
        }
        let mut d = Dataset::new(
            rows,
            MetricRegistry::from_specs([MetricSpec::additive("sessions")]),
            vec!["channel".into()],
        );
        d.sort_canonical();
        d
    }

    #[test]
    fn constant_then_jump_gives_one_shift() {
        let mut xs = vec![100.0; 40];
        xs.push(200.0);
        let got = detect_anomalous_shifts(&single_series(&xs), &DetectorConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].period_start, day0() + Duration::days(40));
        assert!(got[0].score > 0.0);
        assert_eq!(got[0].baseline, 100.0);
    }

    #[test]
    fn constant_series_has_no_shift() {
        let xs = vec![100.0; 60];
        assert!(detect_anomalous_shifts(&single_series(&xs), &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn scaled_series_same_shift_dates_and_signs() {
        let mut xs: Vec<f64> = (0..40).map(|i| 100.0 + (i % 5) as f64).collect();
        xs.push(300.0);
        xs.push(10.0);
        let cfg = DetectorConfig::default();
        let a = detect_anomalous_shifts(&single_series(&xs), &cfg);
        let scaled: Vec<f64> = xs.iter().map(|x| x * 10.0).collect();
        let b = detect_anomalous_shifts(&single_series(&scaled), &cfg);
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.period_start, y.period_start);
            assert_eq!(x.score.signum(), y.score.signum());
            assert!((x.score - y.score).abs() <= 1e-9 * x.score.abs());
        }
    }

    #[test]
    fn short_series_yields_nothing() {
        let xs = vec![1.0; 28];
        let cfg = DetectorConfig::default();
        let d = single_series(&xs);
        assert!(detect_anomalous_shifts(&d, &cfg).is_empty());
        assert!(detect_spikes(&d, &cfg).is_empty());
    }

    #[test]
    fn anomaly_only_in_one_slice() {
        let mut ads = vec![100.0; 40];
        ads.push(160.0);
        let organic: Vec<f64> = (0..41).map(|i| 1000.0 + 40.0 * ((i % 7) as f64)).collect();
        let d = channel_dataset(&[("ads", ads), ("organic", organic)]);
        let cfg = DetectorConfig::default();
        let dim = detect_dimension_anomalies(&d, &cfg);
        assert_eq!(dim.len(), 1);
        assert_eq!(dim[0].dims, DimMap::from([("channel".into(), "ads".into())]));
        assert!(detect_anomalous_shifts(&d, &cfg).is_empty());
    }

    #[test]
    fn anomaly_in_every_slice() {
        let mut a = vec![100.0; 40];
        a.push(300.0);
        let mut b = vec![50.0; 40];
        b.push(150.0);
        let d = channel_dataset(&[("ads", a), ("email", b)]);
        let cfg = DetectorConfig::default();
        assert_eq!(detect_dimension_anomalies(&d, &cfg).len(), 2);
        assert_eq!(detect_anomalous_shifts(&d, &cfg).len(), 1);
    }

    #[test]
    fn short_slice_is_skipped() {
        let mut a = vec![100.0; 40];
        a.push(300.0);
        let short = vec![5.0; 10];
        let d = channel_dataset(&[("ads", a), ("email", short)]);
        let dim = detect_dimension_anomalies(&d, &DetectorConfig::default());
        assert!(dim.iter().all(|i| i.dims["channel"] == "ads"));
    }

    #[test]
    fn spike_with_recovery() {
        let mut xs = vec![10.0; 30];
        xs.extend([50.0, 11.0, 10.0]);
        let got = detect_spikes(&single_series(&xs), &DetectorConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].value, 50.0);
        assert_eq!(got[0].baseline, 10.0);
        assert_eq!(got[0].period_start, day0() + Duration::days(30));
    }

    #[test]
    fn plateau_is_not_a_spike() {
        let mut xs = vec![10.0; 30];
        xs.extend([50.0; 10]);
        assert!(detect_spikes(&single_series(&xs), &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn two_spikes_in_date_order() {
        let mut xs = vec![10.0; 30];
        xs.extend([50.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0]);
        xs.extend([60.0, 10.0, 10.0, 10.0]);
        let got = detect_spikes(&single_series(&xs), &DetectorConfig::default());
        assert_eq!(got.len(), 2);
        assert!(got[0].period_start < got[1].period_start);
        assert_eq!(
            (got[1].period_start - got[0].period_start).num_days(),
            10
        );
    }

    #[test]
    fn increasing_series_highs() {
        let xs: Vec<f64> = (1..=40).map(f64::from).collect();
        let got = detect_all_time_highs(&single_series(&xs), &DetectorConfig::default());
        assert_eq!(got.len(), 10);
        assert_eq!(got[0].period_start, day0() + Duration::days(30));
        assert_eq!(got[0].baseline, 30.0);
    }

    #[test]
    fn decreasing_and_tied_series_have_no_highs() {
        let cfg = DetectorConfig::default();
        let xs: Vec<f64> = (0..40).map(|i| 100.0 - i as f64).collect();
        assert!(detect_all_time_highs(&single_series(&xs), &cfg).is_empty());
        let mut flat = vec![5.0; 35];
        flat[0] = 7.0;
        flat.push(7.0);
        assert!(detect_all_time_highs(&single_series(&flat), &cfg).is_empty());
    }

    fn one_day_channels(values: &[(&str, f64)]) -> Dataset {
        let v: Vec<(&str, Vec<f64>)> = values.iter().map(|(c, x)| (*c, vec![*x])).collect();
        channel_dataset(&v)
    }

    #[test]
    fn top_dimensions_by_share() {
        let d = one_day_channels(&[("ads", 600.0), ("organic", 300.0), ("email", 100.0)]);
        let cfg = DetectorConfig {
            top_n: 2,
            ..DetectorConfig::default()
        };
        let got = detect_top_dimensions(&d, &cfg, Period::day(day0())).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].dims["channel"], "ads");
        assert!((got[0].score - 0.6).abs() < 1e-12);
        assert_eq!(got[1].dims["channel"], "organic");
        assert!((got[1].score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn top_dimension_single_value_and_tie() {
        let d = one_day_channels(&[("ads", 10.0)]);
        let got = detect_top_dimensions(&d, &DetectorConfig::default(), Period::day(day0())).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].score, 1.0);

        let d = one_day_channels(&[("b", 100.0), ("a", 100.0)]);
        let cfg = DetectorConfig {
            top_n: 1,
            ..DetectorConfig::default()
        };
        let got = detect_top_dimensions(&d, &cfg, Period::day(day0())).unwrap();
        assert_eq!(got[0].dims["channel"], "a");
    }

    #[test]
    fn top_dimensions_empty_period() {
        let d = one_day_channels(&[("ads", 10.0)]);
        let p = Period::day(day0() + Duration::days(5));
        assert_eq!(
            detect_top_dimensions(&d, &DetectorConfig::default(), p),
            Err(DetectError::EmptyPeriod(p))
        );
    }

    fn two_period_dataset(pairs: &[(&str, f64, f64)]) -> (Dataset, Period, Period) {
        let v: Vec<(&str, Vec<f64>)> = pairs.iter().map(|(c, a, b)| (*c, vec![*a, *b])).collect();
        let d = channel_dataset(&v);
        let a = Period::day(day0());
        let b = Period::day(day0() + Duration::days(1));
        (d, a, b)
    }

    #[test]
    fn comparison_flags_divergent_slice() {
        // overall 1000 -> 1100 (+10%); email 100 -> 180 (+80%)
        let (d, a, b) = two_period_dataset(&[("ads", 600.0, 620.0), ("organic", 300.0, 300.0), ("email", 100.0, 180.0)]);
        let out = detect_dimension_comparison(&d, &DetectorConfig::default(), a, b).unwrap();
        assert_eq!(out.insights.len(), 1);
        assert_eq!(out.insights[0].dims["channel"], "email");
        assert!((out.insights[0].score - 0.70).abs() < 1e-9);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn comparison_uniform_growth_and_zero_baseline() {
        let (d, a, b) = two_period_dataset(&[("ads", 100.0, 110.0), ("organic", 200.0, 220.0)]);
        let out = detect_dimension_comparison(&d, &DetectorConfig::default(), a, b).unwrap();
        assert!(out.insights.is_empty());

        let (d, a, b) = two_period_dataset(&[("ads", 100.0, 110.0), ("new", 0.0, 50.0)]);
        let out = detect_dimension_comparison(&d, &DetectorConfig::default(), a, b).unwrap();
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn comparison_rejects_overlap() {
        let (d, a, _) = two_period_dataset(&[("ads", 1.0, 2.0)]);
        assert!(matches!(
            detect_dimension_comparison(&d, &DetectorConfig::default(), a, a),
            Err(DetectError::InvalidPeriods(..))
        ));
    }

    #[test]
    fn ratio_metrics_aggregate_sum_over_sum() {
        let reg = MetricRegistry::from_specs([
            MetricSpec::additive("cost"),
            MetricSpec::additive("clicks"),
            MetricSpec::ratio("cpc", "cost", "clicks"),
        ]);
        let rows = vec![
            Record::new(day0()).dim("channel", "a").value("cost", 10.0).value("clicks", 5.0).value("cpc", 2.0),
            Record::new(day0()).dim("channel", "b").value("cost", 20.0).value("clicks", 20.0).value("cpc", 1.0),
        ];
        let d = Dataset::new(rows, reg, vec!["channel".into()]);
        let spec = d.metrics.get("cpc").unwrap().clone();
        assert_eq!(aggregate(&d, &spec, &DimMap::new(), None), Some(30.0 / 25.0));
    }

    #[test]
    fn detect_all_empty_and_deterministic() {
        let d = Dataset::default();
        assert!(detect_all(&d, &DetectorConfig::default()).unwrap().is_empty());
        let mut xs: Vec<f64> = (0..80).map(|i| 100.0 + (i % 7) as f64).collect();
        xs[50] = 400.0;
        let d = single_series(&xs);
        let a = detect_all(&d, &DetectorConfig::default()).unwrap();
        let b = detect_all(&d, &DetectorConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|i| i.kind == InsightKind::Spike));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = DetectorConfig {
            window: 2,
            ..DetectorConfig::default()
        };
        assert!(detect_all(&Dataset::default(), &cfg).is_err());
    }
}
