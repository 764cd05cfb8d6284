//! Reports from atomic insights: fixed per-kind templates, LLM
//! summarization, and the numeric fidelity check.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::anonymize::{decode, NameVault, UNKNOWN_ENTITY};
use crate::chunk::estimate_tokens;
use crate::datamodel::{AtomicInsight, DimMap, InsightKind, Period};
use crate::llm::{LlmError, LlmHandle};
use crate::prompt::{summary_request, FactBlock, PromptOverrides, ResponseFormat};

pub const DEFAULT_TITLE: &str = "Insight report";
const EMPTY_HEADING: &str = "Summary";
const EMPTY_TEXT: &str = "No notable insights.";

/// Absolute slack on top of the relative tolerance, so two-decimal
/// rounding of values near zero still matches.
const ROUNDING_SLACK: f64 = 0.006;
pub const RELATIVE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("summary prompt needs {tokens} tokens, budget is {budget}")]
    BudgetExceeded { tokens: usize, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Template,
    LlmSummarized,
    /// Template text over insights claimed by a model.
    LlmClaims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub paragraphs: Vec<String>,
}

/// Reader reaction counts. Reserved; nothing collects them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub likes: u32,
    pub dislikes: u32,
}

impl Feedback {
    pub fn likes_to_dislikes(&self) -> Option<f64> {
        (self.dislikes > 0).then(|| self.likes as f64 / self.dislikes as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub title: String,
    pub period: Option<Period>,
    pub sections: Vec<Section>,
    pub source_insights: Vec<String>,
    pub generator: Generator,
    #[serde(default)]
    pub feedback: Option<Feedback>,
}

impl ReportDoc {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n", self.title);
        if let Some(p) = self.period {
            out.push_str(&format!("\nPeriod: {p}\n"));
        }
        for s in &self.sections {
            out.push_str(&format!("\n## {}\n\n", s.heading));
            for p in &s.paragraphs {
                out.push_str("- ");
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// All paragraph text, one per line.
    pub fn body_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            for p in &s.paragraphs {
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }
}

/// Canonical number text: at most two decimals, no trailing zeros, no
/// thousands separators.
pub fn fmt_num(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn fmt_dims(dims: &DimMap) -> String {
    dims.iter()
        .map(|(k, v)| format!("{k} \"{v}\""))
        .collect::<Vec<_>>()
        .join(", ")
}

fn subject(ins: &AtomicInsight) -> String {
    if ins.dims.is_empty() {
        ins.metric.clone()
    } else {
        format!("{} for {}", ins.metric, fmt_dims(&ins.dims))
    }
}

/// One sentence per insight from a fixed template. Mentions value,
/// baseline, and score, nothing else numeric besides dates.
pub fn insight_sentence(ins: &AtomicInsight) -> String {
    let (v, b, s) = (fmt_num(ins.value), fmt_num(ins.baseline), fmt_num(ins.score));
    let when = ins.period();
    match ins.kind {
        InsightKind::AnomalousShift | InsightKind::DimensionAnomaly => format!(
            "{} moved to {v} on {when} against a typical level of {b} (robust z {s}).",
            subject(ins)
        ),
        InsightKind::Spike => format!(
            "{} spiked to {v} on {when} from a typical level of {b} and fell back soon after (ratio {s}).",
            subject(ins)
        ),
        InsightKind::AllTimeHigh => format!(
            "{} reached an all-time high of {v} on {when}, above the previous high of {b} (gain {s}).",
            subject(ins)
        ),
        InsightKind::TopDimension => format!(
            "{} ranked among the best for {} over {when} with {v} against an overall {b} (score {s}).",
            fmt_dims(&ins.dims),
            ins.metric
        ),
        InsightKind::DimensionComparison => format!(
            "{} went from {b} to {v} by {when}, diverging from overall growth by {s}.",
            subject(ins)
        ),
    }
}

fn ref_tag(reference: &str) -> String {
    format!("(ref: {reference})")
}

fn covering_period(insights: &[AtomicInsight]) -> Option<Period> {
    let start = insights.iter().map(|i| i.period_start).min()?;
    let end = insights.iter().map(|i| i.period_end).max()?;
    Some(Period::new(start, end))
}

fn empty_report(title: &str, generator: Generator) -> ReportDoc {
    ReportDoc {
        title: title.to_string(),
        period: None,
        sections: vec![Section {
            heading: EMPTY_HEADING.into(),
            paragraphs: vec![EMPTY_TEXT.into()],
        }],
        source_insights: Vec::new(),
        generator,
        feedback: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateOptions {
    pub title: String,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        Self {
            title: DEFAULT_TITLE.into(),
        }
    }
}

/// Deterministic report: one section per kind, one sentence per insight in
/// date order.
pub fn render_template(insights: &[AtomicInsight], opts: &TemplateOptions) -> ReportDoc {
    if insights.is_empty() {
        return empty_report(&opts.title, Generator::Template);
    }
    let mut sections = Vec::new();
    for kind in InsightKind::ALL {
        let mut group: Vec<&AtomicInsight> = insights.iter().filter(|i| i.kind == kind).collect();
        if group.is_empty() {
            continue;
        }
        group.sort_by(|a, b| {
            (a.period_start, &a.metric, &a.dims, a.period_end).cmp(&(
                b.period_start,
                &b.metric,
                &b.dims,
                b.period_end,
            ))
        });
        sections.push(Section {
            heading: kind.heading().into(),
            paragraphs: group
                .iter()
                .map(|i| format!("{} {}", insight_sentence(i), ref_tag(&i.reference_id())))
                .collect(),
        });
    }
    ReportDoc {
        title: opts.title.clone(),
        period: covering_period(insights),
        sections,
        source_insights: insights.iter().map(AtomicInsight::reference_id).collect(),
        generator: Generator::Template,
        feedback: None,
    }
}

/// Reads `# title`, `## heading`, and bullet or plain lines back into
/// sections. Text before the first heading, other than the period line,
/// lands in a "Summary" section.
pub fn parse_markdown(text: &str) -> (Option<String>, Vec<Section>) {
    let mut title = None;
    let mut sections: Vec<Section> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix("## ") {
            sections.push(Section {
                heading: h.trim().to_string(),
                paragraphs: Vec::new(),
            });
        } else if let Some(t) = line.strip_prefix("# ") {
            if title.is_none() {
                title = Some(t.trim().to_string());
            }
        } else if sections.is_empty() && line.starts_with("Period: ") {
            continue;
        } else {
            let body = line
                .strip_prefix("- ")
                .or_else(|| line.strip_prefix("* "))
                .unwrap_or(line);
            if sections.is_empty() {
                sections.push(Section {
                    heading: EMPTY_HEADING.into(),
                    paragraphs: Vec::new(),
                });
            }
            sections
                .last_mut()
                .expect("non-empty")
                .paragraphs
                .push(body.to_string());
        }
    }
    (title, sections)
}

#[derive(Debug, Clone)]
pub struct SummarizeOptions {
    pub title: String,
    /// Whether the insight numbers come from the rule engine.
    pub precomputed: bool,
    /// Extra facts for the model, such as precalculated totals.
    pub context: Option<Value>,
    pub overrides: PromptOverrides,
    /// Context window of the provider, in estimated tokens.
    pub context_tokens: usize,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self {
            title: DEFAULT_TITLE.into(),
            precomputed: true,
            context: None,
            overrides: PromptOverrides::new(),
            context_tokens: 128_000,
        }
    }
}

const VERBATIM_KEYS: [&str; 6] = ["ref", "format", "kind", "period_start", "period_end", "precomputed"];

fn encode_strings(v: &mut Value, vault: &NameVault, key: Option<&str>) {
    match v {
        Value::String(s) => {
            if !key.is_some_and(|k| VERBATIM_KEYS.contains(&k)) {
                *s = vault.encode_text(s);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|i| encode_strings(i, vault, key)),
        Value::Object(map) => {
            for (k, item) in map.iter_mut() {
                encode_strings(item, vault, Some(k));
            }
        }
        _ => {}
    }
}

/// Replaces vault names in every free-text field of a fact block.
pub fn anonymize_block(block: &FactBlock, vault: &NameVault) -> FactBlock {
    if vault.is_empty() {
        return block.clone();
    }
    let mut v = serde_json::to_value(block).expect("fact block serializes");
    encode_strings(&mut v, vault, None);
    serde_json::from_value(v).expect("encoding keeps the block shape")
}

/// encode → prompt → complete → decode. An empty insight list renders the
/// empty template without calling the provider.
pub fn summarize(
    insights: &[AtomicInsight],
    h: &LlmHandle,
    vault: &NameVault,
    opts: &SummarizeOptions,
) -> Result<(ReportDoc, usize), NarrativeError> {
    if insights.is_empty() {
        return Ok((empty_report(&opts.title, Generator::LlmSummarized), 0));
    }
    let mut block =
        FactBlock::new(ResponseFormat::Narrative).with_facts(insights, opts.precomputed);
    block.context = opts.context.clone();
    let block = anonymize_block(&block, vault);
    let overrides: PromptOverrides = opts
        .overrides
        .iter()
        .map(|(k, v)| (k.clone(), vault.encode_text(v)))
        .collect();
    let req = summary_request(&block, &overrides);
    let tokens = estimate_tokens(&req.system_text) + estimate_tokens(&req.user_text);
    if tokens > opts.context_tokens {
        return Err(NarrativeError::BudgetExceeded {
            tokens,
            budget: opts.context_tokens,
        });
    }
    let resp = h.complete(&req)?;
    let (text, leaks) = decode(&resp.text, vault);
    // The configured title wins over whatever heading the model wrote.
    let (_, sections) = parse_markdown(&text);
    let sections = if sections.is_empty() {
        empty_report("", Generator::LlmSummarized).sections
    } else {
        sections
    };
    Ok((
        ReportDoc {
            title: opts.title.clone(),
            period: covering_period(insights),
            sections,
            source_insights: insights.iter().map(AtomicInsight::reference_id).collect(),
            generator: Generator::LlmSummarized,
            feedback: None,
        },
        leaks,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub claims_checked: usize,
    pub claims_correct: usize,
    /// `None` when no claim was checked.
    pub precision: Option<f64>,
}

impl FidelityReport {
    pub fn merge(self, other: FidelityReport) -> FidelityReport {
        let checked = self.claims_checked + other.claims_checked;
        let correct = self.claims_correct + other.claims_correct;
        FidelityReport {
            claims_checked: checked,
            claims_correct: correct,
            precision: (checked > 0).then(|| correct as f64 / checked as f64),
        }
    }

    pub fn empty() -> FidelityReport {
        FidelityReport {
            claims_checked: 0,
            claims_correct: 0,
            precision: None,
        }
    }
}

fn ref_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(ref: (ins_[0-9a-f]{8})\)").expect("valid pattern"))
}

fn noise_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"\(ref: [^)]*\)|"[^"]*"|\d{4}-\d{2}-\d{2}"#).expect("valid pattern")
    })
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^\w.])(-?\d+(?:\.\d+)?)").expect("valid pattern"))
}

/// Numeric literals of a paragraph, skipping dates, quoted names, and
/// reference tags.
pub fn extract_numbers(text: &str) -> Vec<f64> {
    let cleaned = noise_regex().replace_all(text, " ");
    number_regex()
        .captures_iter(&cleaned)
        .filter_map(|c| c[1].parse::<f64>().ok())
        .collect()
}

/// Every number a paragraph about `ins` may legitimately state.
pub fn candidate_numbers(ins: &AtomicInsight) -> Vec<f64> {
    let mut c = vec![ins.value, ins.baseline, ins.score];
    c.extend(ins.relative_change());
    c
}

pub fn number_matches(x: f64, c: f64) -> bool {
    (x - c).abs() <= (RELATIVE_TOLERANCE * c.abs()).max(ROUNDING_SLACK)
}

/// Numeric-claim precision. Each number is matched against the insight
/// its paragraph references, or against every insight of the section's
/// kind when the paragraph carries no known reference.
pub fn check_fidelity(report: &ReportDoc, insights: &[AtomicInsight]) -> FidelityReport {
    let by_ref: BTreeMap<String, &AtomicInsight> =
        insights.iter().map(|i| (i.reference_id(), i)).collect();
    let mut checked = 0;
    let mut correct = 0;
    for section in &report.sections {
        let kind = InsightKind::from_heading(&section.heading);
        let section_pool: Vec<f64> = insights
            .iter()
            .filter(|i| kind.is_none_or(|k| i.kind == k))
            .flat_map(candidate_numbers)
            .collect();
        for para in &section.paragraphs {
            let referenced = ref_regex()
                .captures(para)
                .and_then(|c| by_ref.get(&c[1]).copied());
            let pool = match referenced {
                Some(ins) => candidate_numbers(ins),
                None => section_pool.clone(),
            };
            for x in extract_numbers(para) {
                checked += 1;
                if pool.iter().any(|&c| number_matches(x, c)) {
                    correct += 1;
                }
            }
        }
    }
    FidelityReport {
        claims_checked: checked,
        claims_correct: correct,
        precision: (checked > 0).then(|| correct as f64 / checked as f64),
    }
}

/// Quoted entity mentions that name nothing in `known`. The flagged
/// placeholder for decoded leaks is not counted.
pub fn count_unknown_mentions(text: &str, known: &BTreeSet<String>) -> usize {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#""([^"]*)""#).expect("valid pattern"));
    re.captures_iter(text)
        .filter(|c| &c[1] != UNKNOWN_ENTITY && !known.contains(&c[1]))
        .count()
}
