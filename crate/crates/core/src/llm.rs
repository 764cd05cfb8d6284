//! Text generation behind one interface: an HTTP chat-completion client
//! and a deterministic simulated model with injectable error rates.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anonymize::{find_tokens, TOKEN_PREFIX};
use crate::chunk::estimate_tokens;
use crate::datamodel::{sort_insights, AtomicInsight, DimMap, InsightKind};
use crate::ingest::{parse_csv_str, IngestConfig};
use crate::insights::detect_all;
use crate::narrative::{fmt_num, insight_sentence};
use crate::prompt::{extract, FactBlock, ResponseFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("bad facts: {0}")]
    BadFacts(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider not configured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: String,
    pub usage: Usage,
}

// ---------------------------------------------------------------- HTTP

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Full chat-completions endpoint URL.
    pub url: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub model: String,
    pub timeout_secs: f64,
    /// Maximum wire attempts per logical request.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub temperature: Option<f64>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: String::new(),
            model: "gpt-4".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_base_ms: 500,
            temperature: None,
        }
    }
}

impl HttpConfig {
    /// Fills url, key, and model from `LLM_API_URL`, `LLM_API_KEY`, `LLM_MODEL`
    /// where set.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("LLM_API_URL") {
            self.url = v;
        }
        if let Ok(v) = std::env::var("LLM_API_KEY") {
            self.api_key = v;
        }
        if let Ok(v) = std::env::var("LLM_MODEL") {
            self.model = v;
        }
        self
    }

    pub fn is_configured(&self) -> bool {
        !self.url.is_empty() && !self.api_key.is_empty()
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Clone)]
pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("url", &self.config.url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(Result<LlmResponse, LlmError>),
    Retry(LlmError),
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if !config.is_configured() {
            return Err(LlmError::Config(
                "endpoint URL and API key are required (LLM_API_URL, LLM_API_KEY)".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body<'a>(&'a self, req: &'a LlmRequest) -> WireRequest<'a> {
        let mut messages = Vec::with_capacity(2);
        if !req.system_text.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &req.system_text,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &req.user_text,
        });
        WireRequest {
            model: &self.config.model,
            messages,
            max_tokens: req.max_tokens,
            temperature: self.config.temperature,
        }
    }

    fn attempt(&self, body: &[u8], attempt: u32) -> Attempt {
        let sent = self
            .agent
            .post(&self.config.url)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(LlmError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(LlmError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        match status {
            200..=299 => Attempt::Done(parse_wire_response(&text)),
            401 | 403 => Attempt::Done(Err(LlmError::Auth(status))),
            429 => Attempt::Retry(LlmError::RateLimited { attempts: attempt }),
            500..=599 => Attempt::Retry(LlmError::Transport {
                attempts: attempt,
                message: format!("HTTP {status}"),
            }),
            _ => Attempt::Done(Err(LlmError::Http { status, body: text })),
        }
    }

    /// One logical request: at most `max_retries` wire attempts with
    /// identical bodies and exponential backoff between them.
    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let body = serde_json::to_vec(&self.body(req)).expect("request serializes");
        let attempts = self.config.max_retries.max(1);
        let mut last = None;
        for n in 1..=attempts {
            match self.attempt(&body, n) {
                Attempt::Done(r) => return r,
                Attempt::Retry(e) => {
                    log::warn!("LLM attempt {n}/{attempts} failed: {e}");
                    last = Some(e);
                    if n < attempts {
                        let delay = self.config.backoff_base_ms.saturating_mul(1 << (n - 1));
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

fn parse_wire_response(text: &str) -> Result<LlmResponse, LlmError> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::MalformedResponse("no choices".into()))?;
    let content = choice
        .message
        .content
        .ok_or_else(|| LlmError::MalformedResponse("choice has no content".into()))?;
    let usage = wire.usage.map_or_else(Usage::default, |u| Usage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok(LlmResponse {
        text: content,
        finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
        usage,
    })
}

// ----------------------------------------------------------- simulator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub p_math_error: f64,
    pub math_error_scale: f64,
    pub p_hallucination: f64,
    pub miss_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            p_math_error: 0.0,
            math_error_scale: 0.2,
            p_hallucination: 0.0,
            miss_rate: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        let probs = [
            ("p_math_error", self.p_math_error),
            ("p_hallucination", self.p_hallucination),
            ("miss_rate", self.miss_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(LlmError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.math_error_scale > 0.0 && self.math_error_scale.is_finite()) {
            return Err(LlmError::Config("math_error_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Scripted answer hook for the simulated provider. Returning `None`
/// falls through to the simulated analysis.
pub type Responder = Arc<dyn Fn(&LlmRequest) -> Option<String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct SimulatedProvider {
    pub config: SimConfig,
    responder: Option<Responder>,
}

impl fmt::Debug for SimulatedProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulatedProvider")
            .field("config", &self.config)
            .field("scripted", &self.responder.is_some())
            .finish()
    }
}

impl SimulatedProvider {
    pub fn new(config: SimConfig) -> Self {
        Self {
            config,
            responder: None,
        }
    }

    /// Provider whose answers come from `f` (must be a pure function of the
    /// request to keep runs reproducible).
    pub fn scripted(
        config: SimConfig,
        f: impl Fn(&LlmRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            config,
            responder: Some(Arc::new(f)),
        }
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.config.validate()?;
        let text = match self.responder.as_ref().and_then(|f| f(req)) {
            Some(t) => t,
            None => {
                let block = extract(&req.user_text)
                    .ok_or_else(|| LlmError::BadFacts("request carries no fact block".into()))?
                    .map_err(|e| LlmError::BadFacts(e.to_string()))?;
                let mut rng = request_rng(self.config.seed, req);
                let known: BTreeSet<&str> = find_tokens(&req.user_text).into_iter().collect();
                simulate_with_rng(&self.config, &block, &known, &mut rng)?
            }
        };
        let limit = req.max_tokens as usize * 4;
        let (text, finish) = if text.len() > limit {
            let mut cut = limit;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            (text[..cut].to_string(), "length")
        } else {
            (text, "stop")
        };
        Ok(LlmResponse {
            usage: Usage {
                prompt_tokens: (estimate_tokens(&req.system_text) + estimate_tokens(&req.user_text))
                    as u64,
                completion_tokens: estimate_tokens(&text) as u64,
            },
            text,
            finish_reason: finish.into(),
        })
    }
}

/// Per-request generator derived from (seed, request), so concurrency and
/// call order cannot change any response.
fn request_rng(seed: u64, req: &LlmRequest) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(req.system_text.as_bytes());
    h.update([0]);
    h.update(req.user_text.as_bytes());
    h.update([0]);
    h.update(req.max_tokens.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Restates the facts with seeded errors. Computed numbers (from raw rows,
/// or facts not marked precomputed) are each perturbed with probability
/// `p_math_error`; precomputed numbers are copied. Each fact is dropped
/// with probability `miss_rate`; one fabricated entity token is added with
/// probability `p_hallucination`.
pub fn simulate_analysis(cfg: &SimConfig, facts: &FactBlock) -> Result<String, LlmError> {
    cfg.validate()?;
    let req = LlmRequest {
        system_text: String::new(),
        user_text: facts.to_json(),
        max_tokens: 0,
    };
    let mut rng = request_rng(cfg.seed, &req);
    let json = facts.to_json();
    let known: BTreeSet<&str> = find_tokens(&json).into_iter().collect();
    simulate_with_rng(cfg, facts, &known, &mut rng)
}

struct Claim {
    reference: String,
    insight: AtomicInsight,
    /// Whether value, baseline, and score must be computed by the model.
    computed: bool,
}

fn perturb(x: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> f64 {
    // Magnitude in [scale/4, scale] keeps every error above rounding noise.
    let mag = rng.random_range(cfg.math_error_scale / 4.0..=cfg.math_error_scale);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    if x == 0.0 {
        sign * mag
    } else {
        x * (1.0 + sign * mag)
    }
}

fn maybe_perturb(x: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(cfg.p_math_error) {
        perturb(x, cfg, rng)
    } else {
        x
    }
}

fn fabricate_token(rng: &mut ChaCha8Rng, known: &BTreeSet<&str>) -> String {
    loop {
        let t = format!("{TOKEN_PREFIX}{:08x}", rng.random::<u32>());
        if !known.contains(t.as_str()) {
            return t;
        }
    }
}

fn simulate_with_rng(
    cfg: &SimConfig,
    block: &FactBlock,
    known: &BTreeSet<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<String, LlmError> {
    let mut claims = Vec::new();
    let mut dims_seen: Vec<String> = Vec::new();

    if let Some(table) = &block.table {
        let ingest = IngestConfig {
            dimension_columns: Some(table.dimensions.clone()),
            ..IngestConfig::default()
        };
        let data = parse_csv_str(&table.csv, &table.registry, &ingest)
            .map_err(|e| LlmError::BadFacts(e.to_string()))?
            .dataset;
        dims_seen.extend(table.dimensions.iter().cloned());
        let found =
            detect_all(&data, &table.criteria).map_err(|e| LlmError::BadFacts(e.to_string()))?;
        claims.extend(found.into_iter().map(|i| Claim {
            reference: i.reference_id(),
            insight: i,
            computed: true,
        }));
    }
    claims.extend(block.facts.iter().map(|f| Claim {
        reference: f.reference.clone(),
        insight: f.insight.clone(),
        computed: !f.precomputed,
    }));
    for c in &claims {
        for k in c.insight.dims.keys() {
            if !dims_seen.contains(k) {
                dims_seen.push(k.clone());
            }
        }
    }

    let mut kept = Vec::with_capacity(claims.len());
    for mut c in claims {
        if rng.random_bool(cfg.miss_rate) {
            continue;
        }
        if c.computed {
            c.insight.value = maybe_perturb(c.insight.value, cfg, rng);
            c.insight.baseline = maybe_perturb(c.insight.baseline, cfg, rng);
            c.insight.score = maybe_perturb(c.insight.score, cfg, rng);
        }
        kept.push(c);
    }

    let fabricated = rng
        .random_bool(cfg.p_hallucination)
        .then(|| fabricate_token(rng, known));
    let dim_name = dims_seen.first().cloned().unwrap_or_else(|| "account".into());

    match block.format {
        ResponseFormat::JsonInsights => {
            let mut out: Vec<AtomicInsight> = kept.into_iter().map(|c| c.insight).collect();
            if let Some(tok) = fabricated {
                let mut fake = out.first().cloned().unwrap_or_else(|| AtomicInsight {
                    kind: InsightKind::TopDimension,
                    metric: "sessions".into(),
                    dims: DimMap::new(),
                    period_start: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid"),
                    period_end: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid"),
                    value: 0.0,
                    baseline: 0.0,
                    score: 0.0,
                    description: String::new(),
                });
                fake.dims = DimMap::from([(dim_name, tok)]);
                fake.description = "segment performing unusually well".into();
                out.push(fake);
            }
            sort_insights(&mut out);
            Ok(serde_json::to_string_pretty(&out).expect("insights serialize"))
        }
        ResponseFormat::Narrative => {
            let mut text = String::from("# Insight report\n");
            for kind in InsightKind::ALL {
                let group: Vec<&Claim> = kept.iter().filter(|c| c.insight.kind == kind).collect();
                if group.is_empty() {
                    continue;
                }
                text.push_str(&format!("\n## {}\n\n", kind.heading()));
                for c in group {
                    let ins = &c.insight;
                    let change = ins
                        .relative_change()
                        .map(|ch| maybe_perturb(ch, cfg, rng));
                    text.push_str("- ");
                    text.push_str(&insight_sentence(ins));
                    if let Some(ch) = change {
                        text.push_str(&format!(" Relative change: {}.", fmt_num(ch)));
                    }
                    text.push_str(&format!(" (ref: {})\n", c.reference));
                }
            }
            if let Some(tok) = fabricated {
                text.push_str(&format!(
                    "\n## Other observations\n\n- {dim_name} \"{tok}\" also stood out during this period.\n"
                ));
            }
            Ok(text)
        }
    }
}

// -------------------------------------------------------------- handle

#[derive(Debug, Clone)]
pub enum LlmHandle {
    Http(HttpProvider),
    Simulated(SimulatedProvider),
}

impl LlmHandle {
    pub fn simulated(config: SimConfig) -> Self {
        LlmHandle::Simulated(SimulatedProvider::new(config))
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self, LlmHandle::Simulated(_))
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if req.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user text is empty".into()));
        }
        match self {
            LlmHandle::Http(p) => p.complete(req),
            LlmHandle::Simulated(p) => p.complete(req),
        }
    }
}
