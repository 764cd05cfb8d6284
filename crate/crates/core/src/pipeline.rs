//! The five interchangeable pipelines: pure rules, a single LLM prompt,
//! chunked LLM analysis, sequential fragment analysis, and rules followed
//! by LLM summarization.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymize::{decode, AnonymizeError, NameVault};
use crate::chunk::{chunk_tokens, plan_chunks, BytesPerToken, ChunkError, ChunkStrategy, TokenEstimator};
use crate::datamodel::{
    sort_insights, AtomicInsight, Dataset, DimMap, InsightKind, MetricKind, MetricRegistry,
    MetricSpec, Period, Record,
};
use crate::insights::{detect_all, detect_top_dimensions, DetectError, DetectorConfig};
use crate::llm::{HttpConfig, LlmError, LlmHandle, SimConfig};
use crate::narrative::{
    anonymize_block, check_fidelity, render_template, summarize, FidelityReport, Generator,
    NarrativeError, ReportDoc, SummarizeOptions, TemplateOptions, DEFAULT_TITLE,
};
use crate::preprocess::{precalculate, standard_slices, PreprocessError};
use crate::prompt::{analysis_request, FactBlock, PromptOverrides, ResponseFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    RuleOnly,
    LlmOnly,
    LlmChunked,
    Sequential,
    Hybrid,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::RuleOnly,
        Mode::LlmOnly,
        Mode::LlmChunked,
        Mode::Sequential,
        Mode::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::RuleOnly => "rule_only",
            Mode::LlmOnly => "llm_only",
            Mode::LlmChunked => "llm_chunked",
            Mode::Sequential => "sequential",
            Mode::Hybrid => "hybrid",
        }
    }

    pub fn uses_llm(self) -> bool {
        self != Mode::RuleOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    /// Accepts `rule_only` as well as `rule-only`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                format!(
                    "unknown pipeline `{s}` (expected one of rule_only, llm_only, llm_chunked, sequential, hybrid)"
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSettings {
    pub strategy: ChunkStrategy,
    /// Token budget for the data part of one analysis prompt.
    pub budget_tokens: usize,
}

impl Default for ChunkSettings {
    fn default() -> Self {
        Self {
            strategy: ChunkStrategy::default(),
            budget_tokens: 8_000,
        }
    }
}

/// File form of the pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub mode: Mode,
    pub detector: DetectorConfig,
    pub chunk: ChunkSettings,
    pub anonymize: bool,
    pub precalc: bool,
    pub prompt_overrides: PromptOverrides,
    /// Worker threads for chunk fan-out; 0 uses available parallelism.
    pub jobs: usize,
    pub salt: String,
    /// Context window assumed for summarization prompts.
    pub context_tokens: usize,
    pub title: String,
    pub sim: SimConfig,
    pub http: HttpConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            mode: Mode::RuleOnly,
            detector: DetectorConfig::default(),
            chunk: ChunkSettings::default(),
            anonymize: true,
            precalc: true,
            prompt_overrides: PromptOverrides::new(),
            jobs: 0,
            salt: "bizinsight".into(),
            context_tokens: 128_000,
            title: DEFAULT_TITLE.into(),
            sim: SimConfig::default(),
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub detector: DetectorConfig,
    pub chunk: ChunkSettings,
    pub llm: Option<LlmHandle>,
    pub anonymize: bool,
    pub precalc: bool,
    pub prompt_overrides: PromptOverrides,
    pub jobs: usize,
    pub salt: String,
    pub context_tokens: usize,
    pub title: String,
}

impl PipelineConfig {
    pub fn new(mode: Mode, llm: Option<LlmHandle>) -> Self {
        Self::from_settings(
            &PipelineSettings {
                mode,
                ..PipelineSettings::default()
            },
            llm,
        )
    }

    pub fn from_settings(s: &PipelineSettings, llm: Option<LlmHandle>) -> Self {
        Self {
            mode: s.mode,
            detector: s.detector.clone(),
            chunk: s.chunk.clone(),
            llm,
            anonymize: s.anonymize,
            precalc: s.precalc,
            prompt_overrides: s.prompt_overrides.clone(),
            jobs: s.jobs,
            salt: s.salt.clone(),
            context_tokens: s.context_tokens,
            title: s.title.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Detect,
    Precalc,
    Anonymize,
    Chunk,
    Analysis,
    Fragment,
    Summary,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Detect => "detect",
            Stage::Precalc => "precalc",
            Stage::Anonymize => "anonymize",
            Stage::Chunk => "chunk",
            Stage::Analysis => "analysis",
            Stage::Fragment => "fragment",
            Stage::Summary => "summary",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Anonymize(#[from] AnonymizeError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Narrative(#[from] NarrativeError),
}

#[derive(Debug, Error)]
pub struct PipelineError {
    pub stage: Stage,
    pub chunk: Option<usize>,
    #[source]
    pub source: StageError,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.chunk {
            Some(i) => write!(f, "{} stage, chunk {i}: {}", self.stage, self.source),
            None => write!(f, "{} stage: {}", self.stage, self.source),
        }
    }
}

fn at<E: Into<StageError>>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        chunk: None,
        source: e.into(),
    }
}

fn at_chunk<E: Into<StageError>>(stage: Stage, chunk: usize) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        chunk: Some(chunk),
        source: e.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timings {
    pub total_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub report: ReportDoc,
    /// Insights the pipeline stands behind: rule output, or model claims.
    pub insights: Vec<AtomicInsight>,
    /// Rule-engine insights over exactly the data the pipeline saw; the
    /// ground truth for numeric fidelity.
    pub reference: Vec<AtomicInsight>,
    pub fidelity: FidelityReport,
    /// Fabricated entity tokens caught while decoding model output.
    pub leak_count: usize,
    /// Facts and table rows placed in prompts.
    pub facts_sent: usize,
    pub rows_processed: usize,
    pub rows_total: usize,
    pub llm_calls: usize,
    /// Analysis responses that did not parse as insight arrays.
    pub unparsed_responses: usize,
    #[serde(skip)]
    pub timings: Timings,
}

/// Concatenates per-chunk findings, sorts canonically, and removes exact
/// duplicates (same kind, metric, dims, and period), keeping the first.
pub fn merge_chunk_results(parts: Vec<Vec<AtomicInsight>>) -> Vec<AtomicInsight> {
    let mut all: Vec<AtomicInsight> = parts.into_iter().flatten().collect();
    sort_insights(&mut all);
    let mut seen = BTreeSet::new();
    all.retain(|i| {
        seen.insert((
            i.kind,
            i.metric.clone(),
            i.dims.clone(),
            i.period_start,
            i.period_end,
        ))
    });
    all
}

/// Insight array in a model answer: the text between the first `[` and
/// the last `]`. `None` when that does not parse.
pub fn parse_claims(text: &str) -> Option<Vec<AtomicInsight>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    let claims: Vec<AtomicInsight> = serde_json::from_str(&text[start..=end]).ok()?;
    Some(claims.into_iter().filter(|c| c.is_well_formed()).collect())
}

/// Number of leading rows whose serialized form fits in `budget` tokens.
pub fn rows_within_budget(d: &Dataset, budget: usize, est: &dyn TokenEstimator) -> usize {
    let mut used = chunk_tokens(d, &[], est);
    for (i, r) in d.rows.iter().enumerate() {
        used += est.estimate(&crate::ingest::csv_row_line(d, r));
        if used > budget {
            return i;
        }
    }
    d.rows.len()
}

/// Replaces dimension values by vault tokens.
pub fn anonymize_dataset(d: &Dataset, vault: &NameVault) -> Dataset {
    let mut out = d.clone();
    for r in &mut out.rows {
        for v in r.dims.values_mut() {
            if let Some(t) = vault.token_for(v) {
                *v = t.to_string();
            }
        }
    }
    out.sort_canonical();
    out
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    llm: &'a LlmHandle,
    vault: NameVault,
}

struct Analysis {
    claims: Vec<AtomicInsight>,
    leaks: usize,
    parsed: bool,
}

impl Ctx<'_> {
    fn overrides(&self) -> PromptOverrides {
        self.cfg
            .prompt_overrides
            .iter()
            .map(|(k, v)| (k.clone(), self.vault.encode_text(v)))
            .collect()
    }

    /// One analysis call over raw rows; answers are decoded and parsed.
    fn analyze(
        &self,
        stage: &str,
        data: &Dataset,
        context: Option<serde_json::Value>,
    ) -> Result<Analysis, LlmError> {
        let mut block =
            FactBlock::new(ResponseFormat::JsonInsights).with_table(&anonymize_dataset(data, &self.vault), &self.cfg.detector);
        block.context = context;
        let block = anonymize_block(&block, &self.vault);
        let req = analysis_request(stage, &block, &self.overrides());
        let resp = self.llm.complete(&req)?;
        // Without a vault nothing was encoded, so nothing is decoded or
        // flagged: fabricated tokens pass through as written.
        let (text, leaks) = if self.vault.is_empty() {
            (resp.text, 0)
        } else {
            decode(&resp.text, &self.vault)
        };
        let parsed = parse_claims(&text);
        if parsed.is_none() {
            log::warn!("{stage} response is not an insight array; counted as no insights");
        }
        Ok(Analysis {
            parsed: parsed.is_some(),
            claims: parsed.unwrap_or_default(),
            leaks,
        })
    }

    fn summarize(
        &self,
        insights: &[AtomicInsight],
        precomputed: bool,
        context: Option<serde_json::Value>,
    ) -> Result<(ReportDoc, usize), NarrativeError> {
        let opts = SummarizeOptions {
            title: self.cfg.title.clone(),
            precomputed,
            context,
            overrides: self.cfg.prompt_overrides.clone(),
            context_tokens: self.cfg.context_tokens,
        };
        summarize(insights, self.llm, &self.vault, &opts)
    }
}

fn make_vault(d: &Dataset, cfg: &PipelineConfig, enabled: bool) -> Result<NameVault, PipelineError> {
    if !enabled {
        return Ok(NameVault::new(cfg.salt.clone()));
    }
    NameVault::with_names(cfg.salt.clone(), &d.all_dimension_values()).map_err(at(Stage::Anonymize))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| at(Stage::Config)(StageError::Config(e.to_string())))
}

fn empty_result(mode: Mode, report: ReportDoc, rows_total: usize) -> RunResult {
    RunResult {
        mode,
        report,
        insights: Vec::new(),
        reference: Vec::new(),
        fidelity: FidelityReport::empty(),
        leak_count: 0,
        facts_sent: 0,
        rows_processed: 0,
        rows_total,
        llm_calls: 0,
        unparsed_responses: 0,
        timings: Timings::default(),
    }
}

/// Runs one pipeline over a validated, cleaned dataset.
pub fn run(d: &Dataset, cfg: &PipelineConfig) -> Result<RunResult, PipelineError> {
    let started = Instant::now();
    cfg.detector.validate().map_err(at(Stage::Config))?;
    let mut result = match cfg.mode {
        Mode::RuleOnly => run_rule_only(d, cfg),
        mode => {
            let llm = cfg.llm.as_ref().ok_or_else(|| {
                at(Stage::Config)(StageError::Config(format!(
                    "pipeline {mode} needs an LLM provider"
                )))
            })?;
            match mode {
                Mode::LlmOnly => run_llm_only(d, cfg, llm),
                Mode::LlmChunked => run_llm_chunked(d, cfg, llm),
                Mode::Sequential => run_sequential(d, cfg, llm),
                Mode::Hybrid => run_hybrid(d, cfg, llm),
                Mode::RuleOnly => unreachable!(),
            }
        }
    }?;
    result.fidelity = check_fidelity(&result.report, &result.reference);
    result.timings.total_ms = started.elapsed().as_millis();
    Ok(result)
}

fn run_rule_only(d: &Dataset, cfg: &PipelineConfig) -> Result<RunResult, PipelineError> {
    let insights = detect_all(d, &cfg.detector).map_err(at(Stage::Detect))?;
    let report = render_template(
        &insights,
        &TemplateOptions {
            title: cfg.title.clone(),
        },
    );
    let mut r = empty_result(Mode::RuleOnly, report, d.len());
    r.reference = insights.clone();
    r.insights = insights;
    r.rows_processed = d.len();
    Ok(r)
}

fn run_llm_only(d: &Dataset, cfg: &PipelineConfig, llm: &LlmHandle) -> Result<RunResult, PipelineError> {
    let keep = rows_within_budget(d, cfg.chunk.budget_tokens, &BytesPerToken);
    if keep < d.len() {
        log::info!("llm_only prompt truncated to {keep} of {} rows", d.len());
    }
    let visible = d.subset(&(0..keep).collect::<Vec<_>>());
    // A single raw prompt: no name protection.
    let ctx = Ctx {
        cfg,
        llm,
        vault: NameVault::new(cfg.salt.clone()),
    };
    let a = ctx
        .analyze("analysis", &visible, None)
        .map_err(at(Stage::Analysis))?;
    let mut report = render_template(
        &a.claims,
        &TemplateOptions {
            title: cfg.title.clone(),
        },
    );
    report.generator = Generator::LlmClaims;
    let mut r = empty_result(Mode::LlmOnly, report, d.len());
    r.reference = detect_all(&visible, &cfg.detector).map_err(at(Stage::Detect))?;
    r.insights = a.claims;
    r.leak_count = a.leaks;
    r.facts_sent = keep;
    r.rows_processed = keep;
    r.llm_calls = 1;
    r.unparsed_responses = usize::from(!a.parsed);
    Ok(r)
}

fn run_llm_chunked(d: &Dataset, cfg: &PipelineConfig, llm: &LlmHandle) -> Result<RunResult, PipelineError> {
    let plan = plan_chunks(d, &cfg.chunk.strategy, cfg.chunk.budget_tokens, &BytesPerToken)
        .map_err(at(Stage::Chunk))?;
    let ctx = Ctx {
        cfg,
        llm,
        vault: make_vault(d, cfg, cfg.anonymize)?,
    };
    let pool = thread_pool(cfg.jobs)?;
    let outcomes: Vec<Result<(Analysis, Vec<AtomicInsight>), PipelineError>> = pool.install(|| {
        plan.chunks
            .par_iter()
            .enumerate()
            .map(|(i, rows)| {
                let part = d.subset(rows);
                let a = ctx
                    .analyze("analysis", &part, None)
                    .map_err(at_chunk(Stage::Analysis, i))?;
                let reference = detect_all(&part, &cfg.detector).map_err(at_chunk(Stage::Detect, i))?;
                Ok((a, reference))
            })
            .collect()
    });
    let mut claims = Vec::with_capacity(outcomes.len());
    let mut references = Vec::with_capacity(outcomes.len());
    let mut leaks = 0;
    let mut unparsed = 0;
    for o in outcomes {
        let (a, reference) = o?;
        leaks += a.leaks;
        unparsed += usize::from(!a.parsed);
        claims.push(a.claims);
        references.push(reference);
    }
    let merged = merge_chunk_results(claims);
    let (report, summary_leaks) = ctx
        .summarize(&merged, true, None)
        .map_err(at(Stage::Summary))?;
    let mut r = empty_result(Mode::LlmChunked, report, d.len());
    r.reference = merge_chunk_results(references);
    r.facts_sent = d.len() + merged.len();
    r.insights = merged;
    r.leak_count = leaks + summary_leaks;
    r.rows_processed = plan.chunks.iter().map(Vec::len).sum();
    r.llm_calls = plan.len() + 1;
    r.unparsed_responses = unparsed;
    Ok(r)
}

/// One metric's per-date aggregate over the rows matching `slice`, as a
/// dataset without dimension columns. Ratio metrics carry their
/// numerator and denominator.
pub fn fragment(d: &Dataset, spec: &MetricSpec, slice: &DimMap) -> Dataset {
    let mut columns = vec![spec.name.clone()];
    let mut registry = MetricRegistry::from_specs([spec.clone()]);
    if spec.kind == MetricKind::Ratio {
        for part in [&spec.numerator, &spec.denominator].into_iter().flatten() {
            columns.push(part.clone());
            registry.insert(
                d.metrics
                    .get(part)
                    .cloned()
                    .unwrap_or_else(|| MetricSpec::additive(part.clone())),
            );
        }
    }
    let mut by_date: std::collections::BTreeMap<_, Record> = std::collections::BTreeMap::new();
    for r in d.rows.iter().filter(|r| r.matches(slice)) {
        let row = by_date.entry(r.date).or_insert_with(|| Record::new(r.date));
        for c in &columns {
            if let Some(x) = r.get(c) {
                let slot = row.values.entry(c.clone()).or_insert(Some(0.0));
                *slot = Some(slot.unwrap_or(0.0) + x);
            }
        }
    }
    let mut rows: Vec<Record> = by_date.into_values().collect();
    if let (MetricKind::Ratio, Some(n), Some(den)) =
        (spec.kind, spec.numerator.as_deref(), spec.denominator.as_deref())
    {
        for r in &mut rows {
            let v = match (r.get(n), r.get(den)) {
                (Some(a), Some(b)) if b != 0.0 => Some(a / b),
                _ => None,
            };
            r.values.insert(spec.name.clone(), v);
        }
    }
    for r in &mut rows {
        for c in &columns {
            r.values.entry(c.clone()).or_insert(None);
        }
    }
    Dataset::new(rows, registry, Vec::new())
}

/// Fragments: per metric, the whole-dataset series plus each top-ranked
/// dimension slice.
fn fragment_slices(d: &Dataset, cfg: &PipelineConfig) -> Result<Vec<(MetricSpec, DimMap)>, PipelineError> {
    let mut out = Vec::new();
    let Some((first, last)) = d.date_range() else {
        return Ok(out);
    };
    let tops = detect_top_dimensions(d, &cfg.detector, Period::new(first, last))
        .map_err(at(Stage::Detect))?;
    for spec in d.metrics.iter() {
        out.push((spec.clone(), DimMap::new()));
        for t in tops.iter().filter(|t| t.metric == spec.name) {
            out.push((spec.clone(), t.dims.clone()));
        }
    }
    Ok(out)
}

/// Puts a fragment's findings back into the slice they came from.
fn attribute_to_slice(mut found: Vec<AtomicInsight>, slice: &DimMap) -> Vec<AtomicInsight> {
    if slice.is_empty() {
        return found;
    }
    for i in &mut found {
        i.dims.extend(slice.clone());
        if i.kind == InsightKind::AnomalousShift {
            i.kind = InsightKind::DimensionAnomaly;
        }
    }
    found
}

fn run_sequential(d: &Dataset, cfg: &PipelineConfig, llm: &LlmHandle) -> Result<RunResult, PipelineError> {
    let ctx = Ctx {
        cfg,
        llm,
        vault: make_vault(d, cfg, cfg.anonymize)?,
    };
    let slices = fragment_slices(d, cfg)?;
    let pool = thread_pool(cfg.jobs)?;
    type FragmentOutcome = Result<(Analysis, Vec<AtomicInsight>, usize), PipelineError>;
    let outcomes: Vec<FragmentOutcome> = pool.install(|| {
        slices
            .par_iter()
            .enumerate()
            .map(|(i, (spec, slice))| {
                let full = fragment(d, spec, slice);
                let keep = rows_within_budget(&full, cfg.chunk.budget_tokens, &BytesPerToken);
                let part = full.subset(&(0..keep).collect::<Vec<_>>());
                let encoded: DimMap = slice
                    .iter()
                    .map(|(k, v)| (k.clone(), ctx.vault.token_for(v).unwrap_or(v).to_string()))
                    .collect();
                let context = serde_json::json!({ "slice": encoded });
                let a = ctx
                    .analyze("fragment", &part, Some(context))
                    .map_err(at_chunk(Stage::Fragment, i))?;
                let reference = detect_all(&part, &cfg.detector).map_err(at_chunk(Stage::Detect, i))?;
                Ok((
                    Analysis {
                        claims: attribute_to_slice(a.claims, slice),
                        ..a
                    },
                    attribute_to_slice(reference, slice),
                    keep,
                ))
            })
            .collect()
    });
    let mut claims = Vec::new();
    let mut references = Vec::new();
    let mut leaks = 0;
    let mut unparsed = 0;
    let mut rows_sent = 0;
    for o in outcomes {
        let (a, reference, keep) = o?;
        leaks += a.leaks;
        unparsed += usize::from(!a.parsed);
        rows_sent += keep;
        claims.push(a.claims);
        references.push(reference);
    }
    let merged = merge_chunk_results(claims);
    let (report, summary_leaks) = ctx
        .summarize(&merged, true, None)
        .map_err(at(Stage::Summary))?;
    let mut r = empty_result(Mode::Sequential, report, d.len());
    r.reference = merge_chunk_results(references);
    r.facts_sent = rows_sent + merged.len();
    r.insights = merged;
    r.leak_count = leaks + summary_leaks;
    r.rows_processed = d.len();
    r.llm_calls = slices.len() + 1;
    r.unparsed_responses = unparsed;
    Ok(r)
}

fn run_hybrid(d: &Dataset, cfg: &PipelineConfig, llm: &LlmHandle) -> Result<RunResult, PipelineError> {
    let insights = detect_all(d, &cfg.detector).map_err(at(Stage::Detect))?;
    let context = match (cfg.precalc, d.date_range()) {
        (true, Some((first, last))) => Some(
            precalculate(d, &[Period::new(first, last)], &standard_slices(d))
                .map_err(at(Stage::Precalc))?
                .to_value(),
        ),
        _ => None,
    };
    let ctx = Ctx {
        cfg,
        llm,
        vault: make_vault(d, cfg, cfg.anonymize)?,
    };
    let (report, leaks) = ctx
        .summarize(&insights, cfg.precalc, context)
        .map_err(at(Stage::Summary))?;
    let mut r = empty_result(Mode::Hybrid, report, d.len());
    r.facts_sent = insights.len();
    r.reference = insights.clone();
    r.insights = insights;
    r.leak_count = leaks;
    r.rows_processed = d.len();
    r.llm_calls = usize::from(!r.insights.is_empty());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Date;
    use chrono::Duration;

    fn dataset(days: i64) -> Dataset {
        let start = Date::from_ymd_opt(2024, 1, 1).unwrap();
        let mut rows = Vec::new();
        for i in 0..days {
            for (ch, level) in [("ads", 600.0), ("email", 100.0), ("organic", 300.0)] {
                let bump = if i == 50 { 5.0 } else { 1.0 };
                let wiggle = 1.0 + 0.05 * ((i % 7) as f64 - 3.0) / 3.0;
                rows.push(
                    Record::new(start + Duration::days(i))
                        .dim("channel", ch)
                        .value("sessions", (level * wiggle * bump).round())
                        .value("clicks", (level * 0.1 * wiggle).round()),
                );
            }
        }
        let mut d = Dataset::new(
            rows,
            MetricRegistry::from_specs([MetricSpec::additive("sessions"), MetricSpec::additive("clicks")]),
            vec!["channel".into()],
        );
        d.sort_canonical();
        d
    }

    fn sim() -> Option<LlmHandle> {
        Some(LlmHandle::simulated(SimConfig::default()))
    }

    #[test]
    fn rule_only_is_exact() {
        let d = dataset(90);
        let r = run(&d, &PipelineConfig::new(Mode::RuleOnly, None)).unwrap();
        assert_eq!(r.insights, detect_all(&d, &DetectorConfig::default()).unwrap());
        assert_eq!(r.leak_count, 0);
        assert_eq!(r.rows_processed, d.len());
        assert_eq!(r.fidelity.precision, Some(1.0));
    }

    #[test]
    fn llm_modes_need_a_provider() {
        let err = run(&dataset(10), &PipelineConfig::new(Mode::Hybrid, None)).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
    }

    #[test]
    fn llm_only_truncates() {
        let d = dataset(90);
        let mut cfg = PipelineConfig::new(Mode::LlmOnly, sim());
        cfg.chunk.budget_tokens = chunk_tokens(&d, &(0..d.len()).collect::<Vec<_>>(), &BytesPerToken) / 2;
        let r = run(&d, &cfg).unwrap();
        assert!(r.rows_processed < d.len());
        assert_eq!(r.fidelity.precision, Some(1.0));
    }

    #[test]
    fn hybrid_zero_error_is_faithful() {
        let d = dataset(90);
        let r = run(&d, &PipelineConfig::new(Mode::Hybrid, sim())).unwrap();
        assert_eq!(r.leak_count, 0);
        assert_eq!(r.fidelity.precision, Some(1.0));
        assert_eq!(r.rows_processed, d.len());
    }

    #[test]
    fn chunked_is_job_count_invariant() {
        let d = dataset(120);
        let mut cfg = PipelineConfig::new(
            Mode::LlmChunked,
            Some(LlmHandle::simulated(SimConfig {
                seed: 3,
                p_math_error: 0.3,
                p_hallucination: 0.5,
                ..SimConfig::default()
            })),
        );
        cfg.chunk.budget_tokens = 2_000;
        cfg.jobs = 1;
        let mut one = run(&d, &cfg).unwrap();
        cfg.jobs = 8;
        let mut eight = run(&d, &cfg).unwrap();
        one.timings = Timings::default();
        eight.timings = Timings::default();
        assert!(one.llm_calls > 2);
        assert_eq!(one, eight);
    }

    #[test]
    fn sequential_runs() {
        let d = dataset(90);
        let r = run(&d, &PipelineConfig::new(Mode::Sequential, sim())).unwrap();
        assert_eq!(r.fidelity.precision, Some(1.0));
        assert!(r.insights.iter().any(|i| i.kind == InsightKind::DimensionAnomaly));
    }

    #[test]
    fn merge_dedups_and_sorts() {
        let d = dataset(60);
        let all = detect_all(&d, &DetectorConfig::default()).unwrap();
        assert!(!all.is_empty());
        let merged = merge_chunk_results(vec![all.clone(), all.iter().rev().cloned().collect()]);
        assert_eq!(merged, all);
        assert!(merge_chunk_results(vec![]).is_empty());
    }

    #[test]
    fn fragment_aggregates_ratio_parts() {
        let mut d = dataset(3);
        d.metrics.insert(MetricSpec::ratio("ctr", "clicks", "sessions"));
        let f = fragment(&d, d.metrics.get("ctr").unwrap(), &DimMap::new());
        assert_eq!(f.len(), 3);
        let r = &f.rows[0];
        assert_eq!(r.get("ctr"), Some(r.get("clicks").unwrap() / r.get("sessions").unwrap()));
        assert!(f.metrics.violations().is_empty());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("llm-chunked".parse::<Mode>().unwrap(), Mode::LlmChunked);
        assert!("nope".parse::<Mode>().is_err());
    }
}
