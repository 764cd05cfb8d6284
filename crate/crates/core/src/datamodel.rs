//! Domain types shared by every stage: metric registry, dataset rows,
//! atomic insights, transform plans, and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Calendar day. Intraday data is not modelled.
pub type Date = NaiveDate;

/// A dimension filter / slice. Empty means the whole dataset.
pub type DimMap = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Additive,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
    Neutral,
}

/// Per-metric metadata. Ratio metrics are always aggregated as
/// `sum(numerator) / sum(denominator)`, never as a mean of row ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    #[serde(default)]
    pub numerator: Option<String>,
    #[serde(default)]
    pub denominator: Option<String>,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub direction: Direction,
}

impl MetricSpec {
    pub fn additive(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: MetricKind::Additive,
            numerator: None,
            denominator: None,
            unit: String::new(),
            direction: Direction::HigherIsBetter,
        }
    }

    pub fn ratio(
        name: impl Into<String>,
        numerator: impl Into<String>,
        denominator: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: MetricKind::Ratio,
            numerator: Some(numerator.into()),
            denominator: Some(denominator.into()),
            unit: String::new(),
            direction: Direction::Neutral,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    pub fn is_ratio(&self) -> bool {
        self.kind == MetricKind::Ratio
    }
}

/// Metric registry keyed by name. Iteration order is by name, which keeps
/// every derived output canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRegistry {
    specs: BTreeMap<String, MetricSpec>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: impl IntoIterator<Item = MetricSpec>) -> Self {
        let mut reg = Self::new();
        for spec in specs {
            reg.insert(spec);
        }
        reg
    }

    pub fn insert(&mut self, spec: MetricSpec) {
        self.specs.insert(spec.name.clone(), spec);
    }

    pub fn remove(&mut self, name: &str) -> Option<MetricSpec> {
        self.specs.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&MetricSpec> {
        self.specs.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.specs.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricSpec> {
        self.specs.values()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Ratio metrics that reference `name` as numerator or denominator.
    pub fn dependents_of(&self, name: &str) -> Vec<String> {
        self.specs
            .values()
            .filter(|s| {
                s.numerator.as_deref() == Some(name) || s.denominator.as_deref() == Some(name)
            })
            .map(|s| s.name.clone())
            .collect()
    }

    /// Parses the registry file format: a JSON array of `MetricSpec` objects.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let specs: Vec<MetricSpec> = serde_json::from_str(text)?;
        Ok(Self::from_specs(specs))
    }

    pub fn to_json(&self) -> String {
        let specs: Vec<&MetricSpec> = self.specs.values().collect();
        serde_json::to_string_pretty(&specs).expect("registry serializes")
    }

    /// Structural problems of the registry on its own.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for spec in self.specs.values() {
            match spec.kind {
                MetricKind::Additive => {
                    if spec.numerator.is_some() || spec.denominator.is_some() {
                        out.push(Violation::registry(&spec.name, Rule::AdditiveHasRefs));
                    }
                }
                MetricKind::Ratio => {
                    let refs = [spec.numerator.as_deref(), spec.denominator.as_deref()];
                    if refs.iter().any(Option::is_none) {
                        out.push(Violation::registry(&spec.name, Rule::RatioMissingRefs));
                        continue;
                    }
                    for r in refs.into_iter().flatten() {
                        match self.specs.get(r) {
                            None => {
                                out.push(Violation::registry(&spec.name, Rule::DanglingRatioRef))
                            }
                            Some(target) if target.kind != MetricKind::Additive => out.push(
                                Violation::registry(&spec.name, Rule::RatioRefNotAdditive),
                            ),
                            Some(_) => {}
                        }
                    }
                }
            }
        }
        out
    }
}

impl Serialize for MetricRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.specs.values())
    }
}

impl<'de> Deserialize<'de> for MetricRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let specs = Vec::<MetricSpec>::deserialize(d)?;
        Ok(Self::from_specs(specs))
    }
}

/// One row: a date, its dimension values, and one entry per registered
/// metric. `None` is the explicit missing marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub date: Date,
    pub dims: DimMap,
    pub values: BTreeMap<String, Option<f64>>,
}

impl Record {
    pub fn new(date: Date) -> Self {
        Self {
            date,
            dims: DimMap::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn dim(mut self, name: &str, value: &str) -> Self {
        self.dims.insert(name.to_string(), value.to_string());
        self
    }

    pub fn value(mut self, metric: &str, v: f64) -> Self {
        self.values.insert(metric.to_string(), Some(v));
        self
    }

    pub fn missing(mut self, metric: &str) -> Self {
        self.values.insert(metric.to_string(), None);
        self
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied().flatten()
    }

    /// Whether every filter entry matches this row's dimensions.
    pub fn matches(&self, filter: &DimMap) -> bool {
        filter.iter().all(|(k, v)| self.dims.get(k) == Some(v))
    }
}

/// Date-indexed table of metric and dimension columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<Record>,
    pub metrics: MetricRegistry,
    pub dimensions: Vec<String>,
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Period {
    pub start: Date,
    pub end: Date,
}

impl Period {
    pub fn new(start: Date, end: Date) -> Self {
        Self { start, end }
    }

    pub fn day(d: Date) -> Self {
        Self { start: d, end: d }
    }

    pub fn contains(&self, d: Date) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn overlaps(&self, other: &Period) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn is_valid(&self) -> bool {
        self.start <= self.end
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{} to {}", self.start, self.end)
        }
    }
}

/// Canonical sort key of a row: date, then dimension values in column order.
pub type RowKey = (Date, Vec<String>);

impl Dataset {
    pub fn new(rows: Vec<Record>, metrics: MetricRegistry, dimensions: Vec<String>) -> Self {
        Self {
            rows,
            metrics,
            dimensions,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn key_of(&self, row: &Record) -> RowKey {
        let dims = self
            .dimensions
            .iter()
            .map(|d| row.dims.get(d).cloned().unwrap_or_default())
            .collect();
        (row.date, dims)
    }

    /// Sorts rows into canonical (date, dimension tuple) order. Stable, so
    /// rows sharing a key keep their relative order.
    pub fn sort_canonical(&mut self) {
        let dims = self.dimensions.clone();
        self.rows.sort_by_cached_key(|r| {
            let key: Vec<String> = dims
                .iter()
                .map(|d| r.dims.get(d).cloned().unwrap_or_default())
                .collect();
            (r.date, key)
        });
    }

    /// Distinct dates present, ascending.
    pub fn dates(&self) -> Vec<Date> {
        let set: BTreeSet<Date> = self.rows.iter().map(|r| r.date).collect();
        set.into_iter().collect()
    }

    pub fn date_range(&self) -> Option<(Date, Date)> {
        let first = self.rows.iter().map(|r| r.date).min()?;
        let last = self.rows.iter().map(|r| r.date).max()?;
        Some((first, last))
    }

    /// Distinct values of a dimension column, sorted.
    pub fn dimension_values(&self, dim: &str) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().filter_map(|r| r.dims.get(dim)).collect();
        set.into_iter().cloned().collect()
    }

    /// Copy of this dataset restricted to the given row indices (in the
    /// given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            metrics: self.metrics.clone(),
            dimensions: self.dimensions.clone(),
        }
    }

    pub fn filter(&self, pred: impl Fn(&Record) -> bool) -> Dataset {
        Dataset {
            rows: self.rows.iter().filter(|r| pred(r)).cloned().collect(),
            metrics: self.metrics.clone(),
            dimensions: self.dimensions.clone(),
        }
    }

    /// All protected-name candidates: every dimension value in the data.
    pub fn all_dimension_values(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.dims.values()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().any(|r| r.values.values().any(Option::is_none))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateKey,
    Unsorted,
    NonFinite,
    UnknownMetricColumn,
    MissingMetricColumn,
    UnknownDimension,
    MissingDimension,
    DuplicateDimensionColumn,
    DanglingRatioRef,
    RatioRefNotAdditive,
    RatioMissingRefs,
    AdditiveHasRefs,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("rule serializes");
        write!(f, "{}", s.as_str().unwrap_or_default())
    }
}

/// A structural problem. `row` is absent for registry-level problems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub row: Option<usize>,
    pub column: Option<String>,
    pub rule: Rule,
}

impl Violation {
    fn at(row: usize, column: impl Into<String>, rule: Rule) -> Self {
        Self {
            row: Some(row),
            column: Some(column.into()),
            rule,
        }
    }

    fn registry(column: &str, rule: Rule) -> Self {
        Self {
            row: None,
            column: Some(column.to_string()),
            rule,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.row, &self.column) {
            (Some(r), Some(c)) => write!(f, "row {r}, column `{c}`: {}", self.rule),
            (Some(r), None) => write!(f, "row {r}: {}", self.rule),
            (None, Some(c)) => write!(f, "registry `{c}`: {}", self.rule),
            (None, None) => write!(f, "{}", self.rule),
        }
    }
}

/// Checks every Dataset, Record, and MetricSpec invariant. Pure.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = d.metrics.violations();

    let mut seen_dims = BTreeSet::new();
    for dim in &d.dimensions {
        if !seen_dims.insert(dim) {
            out.push(Violation::registry(dim, Rule::DuplicateDimensionColumn));
        }
    }

    let mut prev: Option<RowKey> = None;
    for (i, row) in d.rows.iter().enumerate() {
        for dim in &d.dimensions {
            if !row.dims.contains_key(dim) {
                out.push(Violation::at(i, dim, Rule::MissingDimension));
            }
        }
        for dim in row.dims.keys() {
            if !seen_dims.contains(dim) {
                out.push(Violation::at(i, dim, Rule::UnknownDimension));
            }
        }
        for name in d.metrics.names() {
            if !row.values.contains_key(name) {
                out.push(Violation::at(i, name, Rule::MissingMetricColumn));
            }
        }
        for (name, v) in &row.values {
            if !d.metrics.contains(name) {
                out.push(Violation::at(i, name, Rule::UnknownMetricColumn));
            }
            if let Some(x) = v {
                if !x.is_finite() {
                    out.push(Violation::at(i, name, Rule::NonFinite));
                }
            }
        }

        let key = d.key_of(row);
        if let Some(p) = &prev {
            match key.cmp(p) {
                std::cmp::Ordering::Less => out.push(Violation {
                    row: Some(i),
                    column: None,
                    rule: Rule::Unsorted,
                }),
                std::cmp::Ordering::Equal => out.push(Violation {
                    row: Some(i),
                    column: None,
                    rule: Rule::DuplicateKey,
                }),
                std::cmp::Ordering::Greater => {}
            }
        }
        prev = Some(key);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsightKind {
    AnomalousShift,
    DimensionAnomaly,
    Spike,
    AllTimeHigh,
    TopDimension,
    DimensionComparison,
}

impl InsightKind {
    pub const ALL: [InsightKind; 6] = [
        InsightKind::AnomalousShift,
        InsightKind::DimensionAnomaly,
        InsightKind::Spike,
        InsightKind::AllTimeHigh,
        InsightKind::TopDimension,
        InsightKind::DimensionComparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InsightKind::AnomalousShift => "anomalous_shift",
            InsightKind::DimensionAnomaly => "dimension_anomaly",
            InsightKind::Spike => "spike",
            InsightKind::AllTimeHigh => "all_time_high",
            InsightKind::TopDimension => "top_dimension",
            InsightKind::DimensionComparison => "dimension_comparison",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            InsightKind::AnomalousShift => "Anomalous shifts",
            InsightKind::DimensionAnomaly => "Dimension anomalies",
            InsightKind::Spike => "Spikes",
            InsightKind::AllTimeHigh => "All-time highs",
            InsightKind::TopDimension => "Top performers",
            InsightKind::DimensionComparison => "Dimension comparisons",
        }
    }

    pub fn from_heading(h: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.heading() == h.trim())
    }
}

impl fmt::Display for InsightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One self-contained finding about one metric, slice, and period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomicInsight {
    pub kind: InsightKind,
    pub metric: String,
    #[serde(default)]
    pub dims: DimMap,
    pub period_start: Date,
    pub period_end: Date,
    pub value: f64,
    pub baseline: f64,
    pub score: f64,
    #[serde(default)]
    pub description: String,
}

impl AtomicInsight {
    /// Identity used for deduplication and recall matching.
    pub fn identity(&self) -> (InsightKind, &str, &DimMap, Date, Date) {
        (
            self.kind,
            &self.metric,
            &self.dims,
            self.period_start,
            self.period_end,
        )
    }

    /// Stable short reference `ins_xxxxxxxx` derived from the identity.
    pub fn reference_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        h.update([0]);
        h.update(self.metric.as_bytes());
        for (k, v) in &self.dims {
            h.update([0]);
            h.update(k.as_bytes());
            h.update([1]);
            h.update(v.as_bytes());
        }
        h.update([0]);
        h.update(self.period_start.to_string().as_bytes());
        h.update(self.period_end.to_string().as_bytes());
        let digest = h.finalize();
        format!("ins_{}", &hex::encode(digest)[..8])
    }

    pub fn period(&self) -> Period {
        Period::new(self.period_start, self.period_end)
    }

    /// Relative change of value against baseline; `None` when the baseline is zero.
    pub fn relative_change(&self) -> Option<f64> {
        (self.baseline != 0.0).then(|| (self.value - self.baseline) / self.baseline.abs())
    }

    pub fn is_well_formed(&self) -> bool {
        self.period_start <= self.period_end
            && self.score.is_finite()
            && self.value.is_finite()
            && self.baseline.is_finite()
    }
}

/// Canonical ordering: (date, kind, metric, dims), then period end.
pub fn sort_insights(insights: &mut [AtomicInsight]) {
    insights.sort_by(|a, b| {
        (a.period_start, a.kind, &a.metric, &a.dims, a.period_end)
            .cmp(&(b.period_start, b.kind, &b.metric, &b.dims, b.period_end))
    });
}

pub fn insights_to_json(insights: &[AtomicInsight]) -> String {
    serde_json::to_string_pretty(insights).expect("insights serialize")
}

pub fn insights_from_json(text: &str) -> Result<Vec<AtomicInsight>, serde_json::Error> {
    serde_json::from_str(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStrategy {
    Drop,
    Median,
    Zero,
}

impl std::str::FromStr for FillStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" => Ok(Self::Drop),
            "median" => Ok(Self::Median),
            "zero" => Ok(Self::Zero),
            other => Err(format!("unknown fill strategy `{other}`")),
        }
    }
}

/// One preprocessing primitive. Serialized as `{"op": ..., "args": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanStep {
    Dedup {},
    FillMissing { strategy: FillStrategy },
    CapOutliers { k: f64 },
    Rename { map: BTreeMap<String, String> },
    Scale { metric: String, factor: f64 },
    DropColumn { name: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformPlan {
    pub steps: Vec<PlanStep>,
}

impl TransformPlan {
    pub fn new(steps: Vec<PlanStep>) -> Self {
        Self { steps }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}
