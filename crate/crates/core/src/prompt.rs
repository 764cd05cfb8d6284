//! Prompt construction and the structured fact block embedded in prompts.
//!
//! Every analysis or summarization prompt carries exactly one fenced block
//! opened by a line reading `` ```facts `` and closed by `` ``` ``, holding
//! `{"format": ..., "facts": [...], "table": {...}}`, so a real model and the
//! simulator see the same payload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AtomicInsight, Dataset, InsightKind, MetricRegistry};
use crate::insights::DetectorConfig;
use crate::llm::LlmRequest;

const FENCE_OPEN: &str = "```facts\n";
const FENCE_CLOSE: &str = "\n```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    /// A JSON array of insight objects.
    JsonInsights,
    /// Markdown narrative, one bullet per fact, grouped by kind.
    Narrative,
}

/// A precomputed finding handed to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    #[serde(rename = "ref")]
    pub reference: String,
    /// `true` when value, baseline, and score were computed by the rule
    /// engine and only need restating.
    pub precomputed: bool,
    pub insight: AtomicInsight,
}

/// Raw rows the model must analyze itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFacts {
    pub registry: MetricRegistry,
    pub dimensions: Vec<String>,
    pub csv: String,
    pub criteria: DetectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactBlock {
    pub format: ResponseFormat,
    #[serde(default)]
    pub facts: Vec<Fact>,
    #[serde(default)]
    pub table: Option<TableFacts>,
    /// Precalculated totals and averages, informational.
    #[serde(default)]
    pub context: Option<serde_json::Value>,
}

impl FactBlock {
    pub fn new(format: ResponseFormat) -> Self {
        Self {
            format,
            facts: Vec::new(),
            table: None,
            context: None,
        }
    }

    pub fn with_facts(mut self, insights: &[AtomicInsight], precomputed: bool) -> Self {
        self.facts.extend(insights.iter().map(|i| Fact {
            reference: i.reference_id(),
            precomputed,
            insight: i.clone(),
        }));
        self
    }

    pub fn with_table(mut self, d: &Dataset, criteria: &DetectorConfig) -> Self {
        self.table = Some(TableFacts {
            registry: d.metrics.clone(),
            dimensions: d.dimensions.clone(),
            csv: crate::ingest::write_csv(d),
            criteria: criteria.clone(),
        });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fact block serializes")
    }
}

/// Wraps a fact block in its fence.
pub fn embed(block: &FactBlock) -> String {
    format!("{FENCE_OPEN}{}{FENCE_CLOSE}", block.to_json())
}

/// Finds and parses the fact block. `None` when the text has no fence.
pub fn extract(text: &str) -> Option<Result<FactBlock, serde_json::Error>> {
    let start = text.find(FENCE_OPEN)? + FENCE_OPEN.len();
    let len = text[start..].find(FENCE_CLOSE)?;
    Some(serde_json::from_str(&text[start..start + len]))
}

/// Domain-expert text per prompt key. Keys are insight kind names
/// (`spike`, `top_dimension`, ...) or the stage names `analysis`,
/// `fragment`, `summary`.
pub type PromptOverrides = BTreeMap<String, String>;

const ANALYST_SYSTEM: &str = "You are a business data analyst. You read marketing and web \
analytics metrics and report notable events precisely. Never invent entities.";

fn kind_guidance(overrides: &PromptOverrides) -> String {
    let mut out = String::new();
    for kind in InsightKind::ALL {
        if let Some(text) = overrides.get(kind.as_str()) {
            out.push_str(&format!("- {}: {}\n", kind.as_str(), text));
        }
    }
    out
}

pub const DEFAULT_MAX_TOKENS: u32 = 65_536;

/// Asks the model to detect insights in raw rows and answer with JSON.
pub fn analysis_request(stage: &str, block: &FactBlock, overrides: &PromptOverrides) -> LlmRequest {
    let mut user = String::new();
    user.push_str(
        "Analyze the table below. Report anomalous shifts, dimension anomalies, spikes, \
all-time highs, top-performing segments, and segment-versus-overall comparisons, using \
the detection criteria included with the table.\n",
    );
    if let Some(expert) = overrides.get(stage) {
        user.push_str(expert);
        user.push('\n');
    }
    user.push_str(&kind_guidance(overrides));
    user.push_str(
        "Respond with a JSON array only. Each element has the fields kind, metric, dims, \
period_start, period_end, value, baseline, score, description.\n",
    );
    user.push_str(&embed(block));
    LlmRequest {
        system_text: ANALYST_SYSTEM.to_string(),
        user_text: user,
        max_tokens: DEFAULT_MAX_TOKENS,
    }
}

/// Asks the model to turn atomic insights into a narrative report.
pub fn summary_request(block: &FactBlock, overrides: &PromptOverrides) -> LlmRequest {
    let mut user = String::new();
    user.push_str(
        "Write a concise business report from the atomic insights below. Group findings \
under one `## ` heading per insight kind, one bullet per insight. Restate each value, \
baseline, and score, give the relative change against the baseline, and keep each \
insight's `(ref: ...)` tag. Write numbers without thousands separators and with at \
most two decimals.\n",
    );
    if let Some(expert) = overrides.get("summary") {
        user.push_str(expert);
        user.push('\n');
    }
    user.push_str(&kind_guidance(overrides));
    user.push_str(&embed(block));
    LlmRequest {
        system_text: ANALYST_SYSTEM.to_string(),
        user_text: user,
        max_tokens: DEFAULT_MAX_TOKENS,
    }
}
