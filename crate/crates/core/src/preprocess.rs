//! Cleaning, column reduction, precalculated totals and weighted averages,
//! and example-driven inference of declarative transform plans.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    Dataset, Date, DimMap, FillStrategy, MetricKind, Period, PlanStep, RowKey, TransformPlan,
};
use crate::ingest::write_csv;
use crate::llm::{LlmError, LlmHandle, LlmRequest};
use crate::stats::{lower_median, median, sample_variance};

/// Attempts `infer_transform_plan` makes before giving up.
pub const DEFAULT_PLAN_ATTEMPTS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("metric `{0}` has no values to impute from")]
    EmptyMetric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric `{metric}` has missing values; clean the dataset first")]
    NotClean { metric: String },
    #[error("no rows for slice {slice:?} in period {period}")]
    EmptyPeriod { slice: DimMap, period: Period },
    #[error("metric `{metric}` has a zero denominator sum for slice {slice:?} in period {period}")]
    ZeroDenominator {
        metric: String,
        slice: DimMap,
        period: Period,
    },
    #[error("plan step {index}: {message}")]
    BadStep { index: usize, message: String },
    #[error("response is not a transform plan: {0}")]
    PlanInvalid(String),
    #[error("no plan reproduced the output sample after {attempts} attempts; last: {last}")]
    PlanRejected { attempts: u32, last: String },
    #[error("input and output samples share no column")]
    NoSharedColumns,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub duplicates_removed: usize,
    pub values_imputed: usize,
    pub rows_dropped: usize,
    pub outliers_capped: usize,
}

/// Removes rows whose (date, dimensions) key was already seen, keeping the
/// first, and returns the canonically sorted result.
pub fn dedup(d: &Dataset) -> (Dataset, usize) {
    let mut seen: BTreeSet<RowKey> = BTreeSet::new();
    let mut out = d.clone();
    out.rows.clear();
    for r in &d.rows {
        if seen.insert(d.key_of(r)) {
            out.rows.push(r.clone());
        }
    }
    out.sort_canonical();
    let removed = d.rows.len() - out.rows.len();
    (out, removed)
}

/// Returns `(dataset, values_imputed, rows_dropped)`.
pub fn fill_missing(
    d: &Dataset,
    strategy: FillStrategy,
) -> Result<(Dataset, usize, usize), PreprocessError> {
    let mut out = d.clone();
    match strategy {
        FillStrategy::Drop => {
            let before = out.rows.len();
            out.rows
                .retain(|r| out.metrics.names().all(|m| r.get(m).is_some()));
            let dropped = before - out.rows.len();
            Ok((out, 0, dropped))
        }
        FillStrategy::Median | FillStrategy::Zero => {
            let mut imputed = 0;
            let names: Vec<String> = out.metrics.names().map(String::from).collect();
            for m in names {
                let missing = out.rows.iter().filter(|r| r.get(&m).is_none()).count();
                if missing == 0 {
                    continue;
                }
                let fill = if strategy == FillStrategy::Zero {
                    0.0
                } else {
                    let present: Vec<f64> = out.rows.iter().filter_map(|r| r.get(&m)).collect();
                    median(&present).ok_or_else(|| PreprocessError::EmptyMetric(m.clone()))?
                };
                for r in &mut out.rows {
                    if r.get(&m).is_none() {
                        r.values.insert(m.clone(), Some(fill));
                    }
                }
                imputed += missing;
            }
            Ok((out, imputed, 0))
        }
    }
}

fn beyond(x: f64, bound: f64, above: bool) -> bool {
    let excess = if above { x - bound } else { bound - x };
    excess > 1e-9 * bound.abs().max(x.abs())
}

/// Caps every metric column to `median ± k·MAD`, where MAD is the lower
/// median of absolute deviations from the median. With MAD = 0 both bounds
/// collapse to the median. Missing values are left alone.
pub fn cap_outliers(d: &Dataset, k: f64) -> Result<(Dataset, usize), PreprocessError> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(PreprocessError::InvalidArgument(format!(
            "cap_k must be positive, got {k}"
        )));
    }
    let mut out = d.clone();
    let mut capped = 0;
    let names: Vec<String> = out.metrics.names().map(String::from).collect();
    for m in names {
        let xs: Vec<f64> = out.rows.iter().filter_map(|r| r.get(&m)).collect();
        let Some(center) = median(&xs) else { continue };
        let devs: Vec<f64> = xs.iter().map(|x| (x - center).abs()).collect();
        let spread = lower_median(&devs).expect("non-empty");
        let (lo, hi) = (center - k * spread, center + k * spread);
        for r in &mut out.rows {
            if let Some(Some(x)) = r.values.get_mut(&m) {
                if beyond(*x, hi, true) {
                    *x = hi;
                    capped += 1;
                } else if beyond(*x, lo, false) {
                    *x = lo;
                    capped += 1;
                }
            }
        }
    }
    Ok((out, capped))
}

/// Dedup, then imputation, then optional outlier capping (`cap_k = None`
/// skips it). Idempotent for `cap_k >= 1`.
pub fn clean(
    d: &Dataset,
    strategy: FillStrategy,
    cap_k: Option<f64>,
) -> Result<(Dataset, CleanReport), PreprocessError> {
    let (out, duplicates_removed) = dedup(d);
    let (out, values_imputed, rows_dropped) = fill_missing(&out, strategy)?;
    let (out, outliers_capped) = match cap_k {
        Some(k) => cap_outliers(&out, k)?,
        None => (out, 0),
    };
    Ok((
        out,
        CleanReport {
            duplicates_removed,
            values_imputed,
            rows_dropped,
            outliers_capped,
        },
    ))
}

/// Removes a metric column along with every ratio metric built on it.
/// Returns the names removed.
fn drop_metric(d: &mut Dataset, name: &str) -> Vec<String> {
    let mut gone = vec![name.to_string()];
    gone.extend(d.metrics.dependents_of(name));
    for g in &gone {
        d.metrics.remove(g);
    }
    for r in &mut d.rows {
        for g in &gone {
            r.values.remove(g);
        }
    }
    gone
}

/// Drops metric columns whose sample variance is below `min_variance`,
/// plus ratio metrics that depend on them.
pub fn reduce(d: &Dataset, min_variance: f64) -> Dataset {
    let mut out = d.clone();
    let low: Vec<String> = d
        .metrics
        .names()
        .filter(|m| {
            let xs: Vec<f64> = d.rows.iter().filter_map(|r| r.get(m)).collect();
            sample_variance(&xs) < min_variance
        })
        .map(String::from)
        .collect();
    for m in low {
        if out.metrics.contains(&m) {
            let gone = drop_metric(&mut out, &m);
            log::info!("reduce dropped {}", gone.join(", "));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecalcEntry {
    pub metric: String,
    pub slice: DimMap,
    pub period: Period,
    /// Absent for ratio metrics.
    pub total: Option<f64>,
    /// Per-day mean for additive metrics, sum/sum for ratio metrics.
    pub average: f64,
    /// Distinct dates covered.
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecalcTable {
    pub entries: Vec<PrecalcEntry>,
}

impl PrecalcTable {
    pub fn get(&self, metric: &str, slice: &DimMap, period: &Period) -> Option<&PrecalcEntry> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && &e.slice == slice && &e.period == period)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("table serializes")
    }
}

fn precalc_one(
    d: &Dataset,
    metric: &str,
    slice: &DimMap,
    period: &Period,
) -> Result<PrecalcEntry, PreprocessError> {
    let spec = d.metrics.get(metric).expect("metric from registry");
    let rows: Vec<_> = d
        .rows
        .iter()
        .filter(|r| period.contains(r.date) && r.matches(slice))
        .collect();
    if rows.is_empty() {
        return Err(PreprocessError::EmptyPeriod {
            slice: slice.clone(),
            period: *period,
        });
    }
    let count = rows.iter().map(|r| r.date).collect::<BTreeSet<Date>>().len();
    let column_sum = |name: &str| -> Result<f64, PreprocessError> {
        rows.iter().try_fold(0.0, |acc, r| {
            r.get(name)
                .map(|x| acc + x)
                .ok_or_else(|| PreprocessError::NotClean {
                    metric: name.to_string(),
                })
        })
    };
    match spec.kind {
        MetricKind::Additive => {
            let total = column_sum(metric)?;
            Ok(PrecalcEntry {
                metric: metric.to_string(),
                slice: slice.clone(),
                period: *period,
                total: Some(total),
                average: total / count as f64,
                count,
            })
        }
        MetricKind::Ratio => {
            let num = column_sum(spec.numerator.as_deref().expect("ratio has numerator"))?;
            let den = column_sum(spec.denominator.as_deref().expect("ratio has denominator"))?;
            if den == 0.0 {
                return Err(PreprocessError::ZeroDenominator {
                    metric: metric.to_string(),
                    slice: slice.clone(),
                    period: *period,
                });
            }
            Ok(PrecalcEntry {
                metric: metric.to_string(),
                slice: slice.clone(),
                period: *period,
                total: None,
                average: num / den,
                count,
            })
        }
    }
}

/// Totals and averages for every (metric, slice, period). An empty filter
/// in `slices` means the whole dataset. Combinations are computed in
/// parallel and returned in (metric, slice, period) input order.
pub fn precalculate(
    d: &Dataset,
    periods: &[Period],
    slices: &[DimMap],
) -> Result<PrecalcTable, PreprocessError> {
    let mut combos = Vec::new();
    for m in d.metrics.names() {
        for s in slices {
            for p in periods {
                combos.push((m, s, p));
            }
        }
    }
    let entries = combos
        .par_iter()
        .map(|(m, s, p)| precalc_one(d, m, s, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PrecalcTable { entries })
}

/// The whole-dataset slice plus one slice per dimension value.
pub fn standard_slices(d: &Dataset) -> Vec<DimMap> {
    let mut out = vec![DimMap::new()];
    for dim in &d.dimensions {
        for v in d.dimension_values(dim) {
            out.push(DimMap::from([(dim.clone(), v)]));
        }
    }
    out
}

fn bad(index: usize, message: impl Into<String>) -> PreprocessError {
    PreprocessError::BadStep {
        index,
        message: message.into(),
    }
}

fn rename(d: &mut Dataset, map: &BTreeMap<String, String>, index: usize) -> Result<(), PreprocessError> {
    let existing: BTreeSet<String> = d
        .metrics
        .names()
        .map(String::from)
        .chain(d.dimensions.iter().cloned())
        .collect();
    for (from, to) in map {
        if !existing.contains(from) {
            return Err(bad(index, format!("unknown column `{from}`")));
        }
        if to.is_empty() || to == "date" {
            return Err(bad(index, format!("invalid new name `{to}`")));
        }
    }
    let mut after: BTreeSet<String> = existing
        .iter()
        .filter(|c| !map.contains_key(*c))
        .cloned()
        .collect();
    for to in map.values() {
        if !after.insert(to.clone()) {
            return Err(bad(index, format!("new name `{to}` collides")));
        }
    }
    let new_name = |n: &str| map.get(n).cloned().unwrap_or_else(|| n.to_string());

    let specs: Vec<_> = d.metrics.iter().cloned().collect();
    let mut registry = crate::datamodel::MetricRegistry::new();
    for mut s in specs {
        s.name = new_name(&s.name);
        s.numerator = s.numerator.as_deref().map(new_name);
        s.denominator = s.denominator.as_deref().map(new_name);
        registry.insert(s);
    }
    d.metrics = registry;
    d.dimensions = d.dimensions.iter().map(|c| new_name(c)).collect();
    for r in &mut d.rows {
        r.values = std::mem::take(&mut r.values)
            .into_iter()
            .map(|(k, v)| (new_name(&k), v))
            .collect();
        r.dims = std::mem::take(&mut r.dims)
            .into_iter()
            .map(|(k, v)| (new_name(&k), v))
            .collect();
    }
    Ok(())
}

/// Applies plan steps in order. Any step naming an absent column or
/// carrying an invalid argument fails with its index.
pub fn apply_plan(d: &Dataset, plan: &TransformPlan) -> Result<Dataset, PreprocessError> {
    let mut out = d.clone();
    for (index, step) in plan.steps.iter().enumerate() {
        match step {
            PlanStep::Dedup {} => out = dedup(&out).0,
            PlanStep::FillMissing { strategy } => {
                out = fill_missing(&out, *strategy)
                    .map_err(|e| bad(index, e.to_string()))?
                    .0
            }
            PlanStep::CapOutliers { k } => {
                out = cap_outliers(&out, *k).map_err(|e| bad(index, e.to_string()))?.0
            }
            PlanStep::Rename { map } => rename(&mut out, map, index)?,
            PlanStep::Scale { metric, factor } => {
                if !out.metrics.contains(metric) {
                    return Err(bad(index, format!("unknown metric `{metric}`")));
                }
                if !factor.is_finite() {
                    return Err(bad(index, "factor must be finite"));
                }
                for r in &mut out.rows {
                    if let Some(Some(x)) = r.values.get_mut(metric) {
                        *x *= factor;
                    }
                }
            }
            PlanStep::DropColumn { name } => {
                if out.metrics.contains(name) {
                    drop_metric(&mut out, name);
                } else if let Some(pos) = out.dimensions.iter().position(|c| c == name) {
                    out.dimensions.remove(pos);
                    for r in &mut out.rows {
                        r.dims.remove(name);
                    }
                    out.sort_canonical();
                } else {
                    return Err(bad(index, format!("unknown column `{name}`")));
                }
            }
        }
    }
    Ok(out)
}

fn columns(d: &Dataset) -> BTreeSet<String> {
    d.metrics
        .names()
        .map(String::from)
        .chain(d.dimensions.iter().cloned())
        .collect()
}

/// Pulls the outermost JSON array out of a model response.
fn plan_from_response(text: &str) -> Result<TransformPlan, PreprocessError> {
    let (Some(start), Some(end)) = (text.find('['), text.rfind(']')) else {
        return Err(PreprocessError::PlanInvalid("no JSON array found".into()));
    };
    if end < start {
        return Err(PreprocessError::PlanInvalid("no JSON array found".into()));
    }
    TransformPlan::from_json(&text[start..=end])
        .map_err(|e| PreprocessError::PlanInvalid(e.to_string()))
}

fn describe_mismatch(got: &Dataset, want: &Dataset) -> String {
    if columns(got) != columns(want) {
        let g: Vec<_> = columns(got).into_iter().collect();
        let w: Vec<_> = columns(want).into_iter().collect();
        return format!("columns differ: got {g:?}, expected {w:?}");
    }
    if got.rows.len() != want.rows.len() {
        return format!(
            "row count differs: got {}, expected {}",
            got.rows.len(),
            want.rows.len()
        );
    }
    match got.rows.iter().zip(&want.rows).position(|(a, b)| a != b) {
        Some(i) => format!("row {i} differs"),
        None => "metric definitions differ".into(),
    }
}

const PLAN_SYSTEM: &str = "You are a data engineer. You describe data transformations as \
declarative plans built only from the listed primitives. Never write code.";

const PLAN_PRIMITIVES: &str = "Available steps (JSON objects with fields `op` and `args`):\n\
- {\"op\":\"dedup\",\"args\":{}}\n\
- {\"op\":\"fill_missing\",\"args\":{\"strategy\":\"drop|median|zero\"}}\n\
- {\"op\":\"cap_outliers\",\"args\":{\"k\":3.0}}\n\
- {\"op\":\"rename\",\"args\":{\"map\":{\"old\":\"new\"}}}\n\
- {\"op\":\"scale\",\"args\":{\"metric\":\"name\",\"factor\":2.0}}\n\
- {\"op\":\"drop_column\",\"args\":{\"name\":\"column\"}}\n";

fn plan_request(
    input: &Dataset,
    output: &Dataset,
    attempt: u32,
    attempts: u32,
    feedback: Option<&str>,
) -> LlmRequest {
    let mut user = format!(
        "Find the transformation that turns the input table into the output table \
(attempt {attempt} of {attempts}).\n{PLAN_PRIMITIVES}Respond with a JSON array of steps only.\n\n\
Input metrics: {}\nInput table:\n{}\nOutput metrics: {}\nOutput table:\n{}",
        input.metrics.to_json(),
        write_csv(input),
        output.metrics.to_json(),
        write_csv(output),
    );
    if let Some(f) = feedback {
        user.push_str(&format!("\nYour previous plan failed: {f}\n"));
    }
    LlmRequest {
        system_text: PLAN_SYSTEM.into(),
        user_text: user,
        max_tokens: 4096,
    }
}

/// Asks the model for a plan mapping `input` to `output`, validating each
/// answer with [`apply_plan`] and feeding failures back, for at most
/// `attempts` rounds.
pub fn infer_transform_plan(
    input: &Dataset,
    output: &Dataset,
    llm: &LlmHandle,
    attempts: u32,
) -> Result<TransformPlan, PreprocessError> {
    if columns(input).is_disjoint(&columns(output)) {
        return Err(PreprocessError::NoSharedColumns);
    }
    let attempts = attempts.max(1);
    let mut feedback: Option<String> = None;
    for n in 1..=attempts {
        let req = plan_request(input, output, n, attempts, feedback.as_deref());
        let resp = llm.complete(&req)?;
        let outcome = plan_from_response(&resp.text).and_then(|plan| {
            let got = apply_plan(input, &plan)?;
            if &got == output {
                Ok(plan)
            } else {
                Err(PreprocessError::InvalidArgument(describe_mismatch(&got, output)))
            }
        });
        match outcome {
            Ok(plan) => return Ok(plan),
            Err(e) => {
                let msg = match e {
                    PreprocessError::InvalidArgument(m) => m,
                    other => other.to_string(),
                };
                log::info!("plan attempt {n}/{attempts} rejected: {msg}");
                feedback = Some(msg);
            }
        }
    }
    Err(PreprocessError::PlanRejected {
        attempts,
        last: feedback.unwrap_or_default(),
    })
}
