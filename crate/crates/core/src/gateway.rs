//! Provider-agnostic access to the proposer, labeler and examiner roles.
//!
//! Every completion goes through a content-addressed cache keyed by
//! `sha256(role, model_id, prompt)`. In replay mode the cache is the only
//! source of responses and a miss is an error, so recorded runs can be
//! repeated offline byte for byte.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::features::{compile_safe_regex, FeatureRule};
use crate::pairing::Lane;
use crate::vectorize::{write_atomic, EmbeddingProvider};
use crate::BinaryVec;

pub const PROPOSE_TEMPLATE: &str = include_str!("../templates/propose-v1.txt");
pub const PROPOSE_TEMPLATE_VERSION: &str = "propose-v1";
pub const LABEL_TEMPLATE: &str = include_str!("../templates/label-v1.txt");
pub const LABEL_TEMPLATE_VERSION: &str = "label-v1";

pub const DEFAULT_CHUNK_SIZE: usize = 10;
pub const DEFAULT_MAX_CANDIDATES: usize = 4;
const BACKOFF_CAP: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Proposer,
    Labeler,
    Examiner,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Proposer => "proposer",
            Role::Labeler => "labeler",
            Role::Examiner => "examiner",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub role: Role,
    pub provider_id: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_retries() -> u32 {
    3
}

impl RoleConfig {
    pub fn new(role: Role, provider_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            role,
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(Error::Config(format!(
                "{} temperature must be 0, got {}",
                self.role, self.temperature
            )));
        }
        if self.provider_id.is_empty() || self.model_id.is_empty() {
            return Err(Error::Config(format!("{} needs a provider and a model", self.role)));
        }
        Ok(())
    }
}

/// Proposer and examiner must come from different vendors.
pub fn check_cross_vendor(proposer: &RoleConfig, examiner: &RoleConfig) -> Result<()> {
    proposer.validate()?;
    examiner.validate()?;
    if proposer.provider_id == examiner.provider_id {
        return Err(Error::Config(format!(
            "examiner provider must differ from proposer provider (both {:?})",
            proposer.provider_id
        )));
    }
    Ok(())
}

/// Environment variable holding a provider's API key.
pub fn api_key_var(provider_id: &str) -> String {
    let id: String = provider_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("LFD_{id}_API_KEY")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: Role,
    pub provider_id: String,
    pub model_id: String,
    pub temperature: f64,
    pub prompt: String,
}

impl ChatRequest {
    pub fn hash(&self) -> String {
        request_hash(self.role, &self.model_id, &self.prompt)
    }
}

pub fn request_hash(role: Role, model_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [role.to_string().as_str(), model_id, prompt] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

/// Wire-level access to providers. Implementations must be thread-safe.
pub trait Transport: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse>;

    fn embed(&self, provider_id: &str, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let _ = (model_id, texts);
        Err(Error::Gateway(format!("provider {provider_id} does not serve embeddings")))
    }
}

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub request_hash: String,
    pub role: Role,
    pub model_id: String,
    pub prompt: String,
    pub response_text: String,
    pub usage: Usage,
    pub timestamp: u64,
}

/// `cache/llm/<request_hash>.json`.
#[derive(Debug, Clone)]
pub struct LlmCache {
    dir: PathBuf,
}

impl LlmCache {
    pub fn new(cache_root: impl Into<PathBuf>) -> Self {
        Self {
            dir: cache_root.into().join("llm"),
        }
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Result<Option<LlmExchange>> {
        let path = self.path_for(hash);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, exchange: &LlmExchange) -> Result<()> {
        write_atomic(
            &self.path_for(&exchange.request_hash),
            &serde_json::to_vec_pretty(exchange)?,
        )
    }

    /// All recorded exchanges, sorted by hash.
    pub fn exchanges(&self) -> Result<Vec<LlmExchange>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push(serde_json::from_slice(&bytes)?);
            }
        }
        out.sort_by(|a: &LlmExchange, b| a.request_hash.cmp(&b.request_hash));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// Cache first, then the network; responses are recorded.
    Live,
    /// Cache only; misses are errors.
    Replay,
}

/// Token bucket, one per provider.
#[derive(Debug)]
struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64, burst: f64) -> Self {
        Self {
            rate,
            burst,
            tokens: burst,
            last: Instant::now(),
        }
    }

    /// Time to wait before a token is available; consumes it.
    fn acquire(&mut self) -> Duration {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.burst);
        self.last = now;
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub requests_per_second: f64,
    pub burst: f64,
}

/// Counters for observed gateway traffic.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub network_calls: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub embed_calls: AtomicUsize,
}

impl GatewayStats {
    pub fn network(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Every request that reached the gateway, cached or not.
    pub fn total(&self) -> usize {
        self.network() + self.hits() + self.embed_calls.load(Ordering::SeqCst)
    }
}

pub struct Gateway {
    transport: Option<Arc<dyn Transport>>,
    cache: LlmCache,
    mode: GatewayMode,
    limits: HashMap<String, Mutex<TokenBucket>>,
    backoff_base: Duration,
    max_in_flight: usize,
    pub stats: GatewayStats,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("cache", &self.cache)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Gateway {
    pub fn live(transport: Arc<dyn Transport>, cache_root: impl Into<PathBuf>) -> Self {
        Self::build(Some(transport), cache_root.into(), GatewayMode::Live)
    }

    pub fn replay(cache_root: impl Into<PathBuf>) -> Self {
        Self::build(None, cache_root.into(), GatewayMode::Replay)
    }

    fn build(transport: Option<Arc<dyn Transport>>, cache_root: PathBuf, mode: GatewayMode) -> Self {
        Self {
            transport,
            cache: LlmCache::new(cache_root),
            mode,
            limits: HashMap::new(),
            backoff_base: Duration::from_secs(1),
            max_in_flight: 4,
            stats: GatewayStats::default(),
        }
    }

    pub fn with_rate_limit(mut self, provider_id: &str, limit: RateLimit) -> Self {
        self.limits.insert(
            provider_id.to_string(),
            Mutex::new(TokenBucket::new(limit.requests_per_second, limit.burst.max(1.0))),
        );
        self
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn cache(&self) -> &LlmCache {
        &self.cache
    }

    fn throttle(&self, provider_id: &str) {
        if let Some(bucket) = self.limits.get(provider_id) {
            let wait = bucket.lock().expect("rate limiter poisoned").acquire();
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
    }

    /// Raw text completion through the cache.
    pub fn call(&self, cfg: &RoleConfig, prompt: &str) -> Result<String> {
        let request = ChatRequest {
            role: cfg.role,
            provider_id: cfg.provider_id.clone(),
            model_id: cfg.model_id.clone(),
            temperature: cfg.temperature,
            prompt: prompt.to_string(),
        };
        let hash = request.hash();
        if let Some(hit) = self.cache.get(&hash)? {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.response_text);
        }
        let transport = match (self.mode, &self.transport) {
            (GatewayMode::Live, Some(t)) => t,
            _ => return Err(Error::ReplayMiss(hash)),
        };
        let mut attempt = 0u32;
        let response = loop {
            self.throttle(&cfg.provider_id);
            self.stats.network_calls.fetch_add(1, Ordering::SeqCst);
            match transport.chat(&request) {
                Ok(r) => break r,
                Err(e @ (Error::Gateway(_) | Error::Io { .. })) if attempt < cfg.max_retries => {
                    let delay = self
                        .backoff_base
                        .saturating_mul(1u32 << attempt.min(16))
                        .min(BACKOFF_CAP);
                    log_retry(&e, delay);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.cache.put(&LlmExchange {
            request_hash: hash,
            role: cfg.role,
            model_id: cfg.model_id.clone(),
            prompt: request.prompt,
            response_text: response.text.clone(),
            usage: response.usage,
            timestamp,
        })?;
        Ok(response.text)
    }

    /// Structured completion: parse the reply as `T`, with one repair
    /// reprompt carrying the parse error.
    pub fn complete<T: DeserializeOwned>(
        &self,
        cfg: &RoleConfig,
        prompt: &str,
        validate: impl Fn(&T) -> std::result::Result<(), String>,
    ) -> Result<T> {
        let first = self.call(cfg, prompt)?;
        let err = match parse_structured::<T>(&first).and_then(|v| validate(&v).map(|_| v)) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        let repair = format!(
            "{prompt}\n\nYour previous reply could not be used: {err}\nReply again with only the JSON object described above."
        );
        let second = self.call(cfg, &repair)?;
        parse_structured::<T>(&second)
            .and_then(|v| validate(&v).map(|_| v))
            .map_err(Error::Unparseable)
    }

    /// Embedding provider bound to one vendor, routed through this gateway's transport.
    pub fn embedder(&self, provider_id: &str) -> Option<GatewayEmbedder<'_>> {
        self.transport.as_ref().map(|t| GatewayEmbedder {
            gateway: self,
            transport: t.clone(),
            provider_id: provider_id.to_string(),
        })
    }
}

fn log_retry(err: &Error, delay: Duration) {
    eprintln!("transport error, retrying in {delay:?}: {err}");
}

pub struct GatewayEmbedder<'a> {
    gateway: &'a Gateway,
    transport: Arc<dyn Transport>,
    provider_id: String,
}

impl EmbeddingProvider for GatewayEmbedder<'_> {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.gateway.mode == GatewayMode::Replay {
            return Err(Error::ReplayMiss(format!("embedding batch for {model_id}")));
        }
        self.gateway.throttle(&self.provider_id);
        self.gateway.stats.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.transport.embed(&self.provider_id, model_id, texts)
    }
}

/// Extract the first JSON object from a reply, tolerating code fences and prose.
pub fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_structured<T: DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    let json = extract_json(text).ok_or_else(|| "no JSON object found in reply".to_string())?;
    serde_json::from_str(json).map_err(|e| format!("reply does not match the schema: {e}"))
}

/// A proposed feature, before screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDefinition {
    pub name: String,
    pub definition: String,
    pub lane: Lane,
    pub rule: FeatureRule,
    #[serde(default)]
    pub positive_example: String,
    #[serde(default)]
    pub negative_example: String,
}

impl CandidateDefinition {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("name is empty".into());
        }
        if self.definition.trim().is_empty() {
            return Err("definition is empty".into());
        }
        match (&self.lane, &self.rule) {
            (Lane::Lexical, FeatureRule::Regex { regex, case_sensitive }) => {
                compile_safe_regex(regex, *case_sensitive)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }
            (Lane::Semantic, FeatureRule::Steps { steps }) => {
                if steps.iter().filter(|s| !s.trim().is_empty()).count() < 2 {
                    Err("semantic procedure needs at least two steps".into())
                } else {
                    Ok(())
                }
            }
            (lane, _) => Err(format!("rule kind does not match the {} lane", lane.as_str())),
        }
    }

    pub fn steps(&self) -> &[String] {
        match &self.rule {
            FeatureRule::Steps { steps } => steps,
            FeatureRule::Regex { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawCandidate {
    name: String,
    definition: String,
    #[serde(default)]
    regex: Option<String>,
    #[serde(default)]
    steps: Option<Vec<String>>,
    #[serde(default)]
    positive_example: String,
    #[serde(default)]
    negative_example: String,
}

#[derive(Debug, Clone, Deserialize)]
struct ProposalReply {
    candidates: Vec<RawCandidate>,
}

/// What the proposer is shown.
#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    /// Bootstrap phase: Group A from the positive class, Group B from the negative.
    Groups {
        group_a: Vec<Document>,
        group_b: Vec<Document>,
    },
    /// Residual phase: (positive, negative) similarity-matched pairs.
    Pairs(Vec<(Document, Document)>),
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        match self {
            Evidence::Groups { group_a, group_b } => group_a.is_empty() || group_b.is_empty(),
            Evidence::Pairs(p) => p.is_empty(),
        }
    }

    fn render(&self) -> String {
        let mut out = String::new();
        match self {
            Evidence::Groups { group_a, group_b } => {
                out.push_str("Find features that distinguish Group A from Group B.\n\nGroup A:\n");
                for (i, d) in group_a.iter().enumerate() {
                    out.push_str(&format!("[A{}] {}\n", i + 1, json_str(&d.text)));
                }
                out.push_str("\nGroup B:\n");
                for (i, d) in group_b.iter().enumerate() {
                    out.push_str(&format!("[B{}] {}\n", i + 1, json_str(&d.text)));
                }
            }
            Evidence::Pairs(pairs) => {
                out.push_str(
                    "Each pair below shows two similar texts with opposite outcomes. \
                     Find the local cue that separates text A from text B.\n",
                );
                for (i, (a, b)) in pairs.iter().enumerate() {
                    out.push_str(&format!(
                        "\nPair {}\n  A: {}\n  B: {}\n",
                        i + 1,
                        json_str(&a.text),
                        json_str(&b.text)
                    ));
                }
            }
        }
        out.trim_end().to_string()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn lane_instructions(lane: Lane) -> &'static str {
    match lane {
        Lane::Lexical => {
            "Lane: lexical. Each feature must be a surface-form rule implemented by a regular \
             expression in the \"regex\" field. Matching is case-insensitive and the dialect has \
             no backreferences and no lookaround."
        }
        Lane::Semantic => {
            "Lane: semantic. Each feature must be a step-wise reading-comprehension procedure in \
             the \"steps\" field (at least two steps) that an annotator can apply mechanically to \
             decide present or absent. Holistic questions such as \"is the text X?\" are not allowed."
        }
    }
}

fn schema_hint(lane: Lane) -> &'static str {
    match lane {
        Lane::Lexical => {
            r#"{"candidates": [{"name": "...", "definition": "...", "regex": "...", "positive_example": "...", "negative_example": "..."}]}"#
        }
        Lane::Semantic => {
            r#"{"candidates": [{"name": "...", "definition": "...", "steps": ["...", "..."], "positive_example": "...", "negative_example": "..."}]}"#
        }
    }
}

pub fn render_proposal_prompt(
    evidence: &Evidence,
    lane: Lane,
    admitted: &[(String, String)],
    uncovered: &[Document],
    max_candidates: usize,
) -> String {
    let admitted_text = if admitted.is_empty() {
        "(none)".to_string()
    } else {
        admitted
            .iter()
            .map(|(name, def)| format!("- {name}: {def}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let uncovered_text = if uncovered.is_empty() {
        String::new()
    } else {
        let mut s = String::from(
            "\nGroup A texts that no admitted feature covers yet (prefer features for these subgroups):\n",
        );
        for d in uncovered {
            s.push_str(&format!("- {}\n", json_str(&d.text)));
        }
        s
    };
    PROPOSE_TEMPLATE
        .replace("{{lane_instructions}}", lane_instructions(lane))
        .replace("{{evidence}}", &evidence.render())
        .replace("{{admitted}}", &admitted_text)
        .replace("{{uncovered}}", &uncovered_text)
        .replace("{{max_candidates}}", &max_candidates.to_string())
        .replace("{{schema}}", schema_hint(lane))
}

/// Ask the proposer for up to `max_candidates` features of one lane.
///
/// Candidates that fail validation (e.g. a regex outside the safe dialect)
/// are dropped individually; an empty result means the lane skips this round.
pub fn propose_features(
    gateway: &Gateway,
    cfg: &RoleConfig,
    evidence: &Evidence,
    lane: Lane,
    admitted: &[(String, String)],
    uncovered: &[Document],
    max_candidates: usize,
) -> Result<Vec<CandidateDefinition>> {
    if evidence.is_empty() {
        return Err(Error::InvalidArgument("proposer evidence is empty".into()));
    }
    let prompt = render_proposal_prompt(evidence, lane, admitted, uncovered, max_candidates);
    let reply: ProposalReply = gateway.complete(cfg, &prompt, |_| Ok(()))?;
    let mut out = Vec::new();
    for raw in reply.candidates {
        let rule = match (lane, raw.regex, raw.steps) {
            (Lane::Lexical, Some(regex), _) => FeatureRule::Regex {
                regex,
                case_sensitive: false,
            },
            (Lane::Semantic, _, Some(steps)) => FeatureRule::Steps { steps },
            _ => continue,
        };
        let candidate = CandidateDefinition {
            name: raw.name.trim().to_string(),
            definition: raw.definition.trim().to_string(),
            lane,
            rule,
            positive_example: raw.positive_example,
            negative_example: raw.negative_example,
        };
        if candidate.validate().is_ok() {
            out.push(candidate);
        }
        if out.len() == max_candidates {
            break;
        }
    }
    Ok(out)
}

pub fn render_label_prompt(feature: &CandidateDefinition, texts: &[&str]) -> String {
    let steps = feature
        .steps()
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n");
    let texts_block = texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}] {}", i + 1, json_str(t)))
        .collect::<Vec<_>>()
        .join("\n");
    LABEL_TEMPLATE
        .replace("{{name}}", &feature.name)
        .replace("{{definition}}", &feature.definition)
        .replace("{{steps}}", &steps)
        .replace("{{texts}}", &texts_block)
        .replace("{{count}}", &texts.len().to_string())
}

/// Recover the texts embedded in a labeling prompt, in order.
pub fn parse_label_prompt_texts(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.find("\nTexts:\n") else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for line in prompt[start + 8..].lines() {
        let Some(rest) = line.strip_prefix('[') else {
            break;
        };
        let Some(close) = rest.find("] ") else {
            break;
        };
        match serde_json::from_str::<String>(&rest[close + 2..]) {
            Ok(text) => out.push(text),
            Err(_) => break,
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct VerdictReply {
    verdicts: Vec<u8>,
}

fn label_chunk(
    gateway: &Gateway,
    cfg: &RoleConfig,
    feature: &CandidateDefinition,
    texts: &[&str],
) -> Result<BinaryVec> {
    let base = render_label_prompt(feature, texts);
    let validate = |r: &VerdictReply| {
        if r.verdicts.len() != texts.len() {
            Err(format!("expected {} verdicts, got {}", texts.len(), r.verdicts.len()))
        } else if r.verdicts.iter().any(|&v| v > 1) {
            Err("verdicts must be 0 or 1".into())
        } else {
            Ok(())
        }
    };
    match gateway.complete::<VerdictReply>(cfg, &base, validate) {
        Ok(r) => Ok(r.verdicts),
        Err(Error::Unparseable(_)) => {
            // distinct request so the retry is not served the cached failure
            let retry = format!("{base}\n(second attempt)");
            gateway
                .complete::<VerdictReply>(cfg, &retry, validate)
                .map(|r| r.verdicts)
        }
        Err(e) => Err(e),
    }
}

/// Apply a semantic feature to documents in fixed-size chunks.
///
/// Chunk prompts contain only the feature text and the chunk's documents.
/// Chunks run concurrently up to the gateway's in-flight bound and are
/// reassembled in input order.
pub fn label_with_definition(
    gateway: &Gateway,
    cfg: &RoleConfig,
    feature: &CandidateDefinition,
    docs: &[&Document],
    chunk_size: usize,
) -> Result<BinaryVec> {
    if feature.lane != Lane::Semantic {
        return Err(Error::InvalidArgument(
            "only semantic features are labeled by an LLM".into(),
        ));
    }
    if docs.is_empty() {
        return Err(Error::InvalidArgument("no documents to label".into()));
    }
    let chunk_size = chunk_size.max(1);
    let chunks: Vec<Vec<&str>> = docs
        .chunks(chunk_size)
        .map(|c| c.iter().map(|d| d.text.as_str()).collect())
        .collect();
    let mut results: Vec<Option<Result<BinaryVec>>> = (0..chunks.len()).map(|_| None).collect();
    for (wave_idx, wave) in chunks.chunks(gateway.max_in_flight).enumerate() {
        let outputs: Vec<Result<BinaryVec>> = if wave.len() == 1 {
            vec![label_chunk(gateway, cfg, feature, &wave[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|texts| s.spawn(move || label_chunk(gateway, cfg, feature, texts)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Gateway("labeling thread panicked".into()))))
                    .collect()
            })
        };
        for (j, out) in outputs.into_iter().enumerate() {
            results[wave_idx * gateway.max_in_flight + j] = Some(out);
        }
    }
    let mut verdicts = Vec::with_capacity(docs.len());
    for (i, r) in results.into_iter().enumerate() {
        match r.expect("every chunk labeled") {
            Ok(v) => verdicts.extend(v),
            Err(Error::Unparseable(msg)) => {
                return Err(Error::Unparseable(format!(
                    "chunk {i} (documents {}..{}) for feature {:?}: {msg}",
                    i * chunk_size,
                    ((i + 1) * chunk_size).min(docs.len()),
                    feature.name
                )))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(verdicts)
}

#[cfg(feature = "http")]
pub use http::HttpTransport;

#[cfg(feature = "http")]
mod http {
    use super::*;
    use serde_json::{json, Value};

    /// JSON-over-HTTP transport for OpenAI-compatible chat and embedding endpoints.
    pub struct HttpTransport {
        agent: ureq::Agent,
        providers: HashMap<String, (String, String)>,
    }

    impl HttpTransport {
        /// `providers` maps provider id to base URL. Keys come from
        /// `LFD_<PROVIDER>_API_KEY`; a missing key is a config error naming the variable.
        pub fn from_env(providers: &HashMap<String, String>) -> Result<Self> {
            let mut resolved = HashMap::new();
            let mut ids: Vec<&String> = providers.keys().collect();
            ids.sort();
            for id in ids {
                let var = api_key_var(id);
                let key = std::env::var(&var)
                    .map_err(|_| Error::Config(format!("missing credentials: set {var}")))?;
                resolved.insert(id.clone(), (providers[id].trim_end_matches('/').to_string(), key));
            }
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(120)))
                .http_status_as_error(false)
                .build()
                .into();
            Ok(Self {
                agent,
                providers: resolved,
            })
        }

        fn post(&self, provider_id: &str, path: &str, body: Value) -> Result<Value> {
            let (base, key) = self
                .providers
                .get(provider_id)
                .ok_or_else(|| Error::Config(format!("unknown provider {provider_id}")))?;
            let mut response = self
                .agent
                .post(&format!("{base}/{path}"))
                .header("Authorization", &format!("Bearer {key}"))
                .send_json(&body)
                .map_err(|e| Error::Gateway(format!("{provider_id}: {e}")))?;
            let status = response.status().as_u16();
            let value: Value = response
                .body_mut()
                .read_json()
                .map_err(|e| Error::Gateway(format!("{provider_id}: unreadable body: {e}")))?;
            if status >= 400 {
                return Err(Error::Gateway(format!("{provider_id}: HTTP {status}: {value}")));
            }
            Ok(value)
        }
    }

    impl Transport for HttpTransport {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
            let body = json!({
                "model": request.model_id,
                "temperature": request.temperature,
                "messages": [{"role": "user", "content": request.prompt}],
            });
            let value = self.post(&request.provider_id, "chat/completions", body)?;
            let text = value["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| Error::Gateway("response has no message content".into()))?
                .to_string();
            let usage = Usage {
                prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            };
            Ok(ChatResponse { text, usage })
        }

        fn embed(&self, provider_id: &str, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            let value = self.post(provider_id, "embeddings", json!({"model": model_id, "input": texts}))?;
            let data = value["data"]
                .as_array()
                .ok_or_else(|| Error::Gateway("embedding response has no data".into()))?;
            data.iter()
                .map(|item| {
                    item["embedding"]
                        .as_array()
                        .ok_or_else(|| Error::Gateway("embedding entry malformed".into()))?
                        .iter()
                        .map(|x| x.as_f64().ok_or_else(|| Error::Gateway("non-numeric embedding".into())))
                        .collect()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        replies: Mutex<Vec<String>>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                seen: Mutex::new(Vec::new()),
            })
        }
    }

    impl Transport for Scripted {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
            self.seen.lock().unwrap().push(request.clone());
            let text = self.replies.lock().unwrap().pop().unwrap_or_default();
            Ok(ChatResponse {
                text,
                usage: Usage::default(),
            })
        }
    }

    fn proposer() -> RoleConfig {
        RoleConfig::new(Role::Proposer, "vendor-a", "model-p")
    }

    #[test]
    fn replay_is_byte_identical_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let t = Scripted::new(&["{\"x\": 1} trailing"]);
        let live = Gateway::live(t.clone(), dir.path());
        let first = live.call(&proposer(), "hello").unwrap();
        let replay = Gateway::replay(dir.path());
        assert_eq!(replay.call(&proposer(), "hello").unwrap(), first);
        assert_eq!(replay.stats.network(), 0);
        assert!(matches!(replay.call(&proposer(), "other"), Err(Error::ReplayMiss(_))));
    }

    #[test]
    fn identical_requests_share_one_entry() {
        let dir = tempfile::tempdir().unwrap();
        let t = Scripted::new(&["a", "b"]);
        let g = Gateway::live(t.clone(), dir.path());
        assert_eq!(g.call(&proposer(), "p").unwrap(), "a");
        assert_eq!(g.call(&proposer(), "p").unwrap(), "a");
        assert_eq!(g.stats.network(), 1);
        assert_eq!(g.cache().exchanges().unwrap().len(), 1);
    }

    #[derive(Debug, Deserialize)]
    struct Answer {
        value: u32,
    }

    #[test]
    fn repair_is_issued_once_then_fails() {
        let dir = tempfile::tempdir().unwrap();
        let t = Scripted::new(&["just prose", "still prose", "{\"value\": 3}"]);
        let g = Gateway::live(t.clone(), dir.path());
        let out = g.complete::<Answer>(&proposer(), "give json", |_| Ok(()));
        assert!(matches!(out, Err(Error::Unparseable(_))));
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].prompt.contains("could not be used"));
    }

    #[test]
    fn repair_can_succeed() {
        let dir = tempfile::tempdir().unwrap();
        let t = Scripted::new(&["nope", "```json\n{\"value\": 7}\n```"]);
        let g = Gateway::live(t, dir.path());
        let a: Answer = g.complete(&proposer(), "q", |_| Ok(())).unwrap();
        assert_eq!(a.value, 7);
    }

    #[test]
    fn cross_vendor_and_temperature_checks() {
        let p = proposer();
        let same = RoleConfig::new(Role::Examiner, "vendor-a", "model-e");
        assert!(check_cross_vendor(&p, &same).is_err());
        let other = RoleConfig::new(Role::Examiner, "vendor-b", "model-e");
        assert!(check_cross_vendor(&p, &other).is_ok());
        let mut hot = other.clone();
        hot.temperature = 0.7;
        assert!(check_cross_vendor(&p, &hot).is_err());
        assert_eq!(api_key_var("open-ai"), "LFD_OPEN_AI_API_KEY");
    }

    fn groups() -> Evidence {
        let d = |t: &str, l: u8| Document {
            id: t.into(),
            text: t.into(),
            label: l,
        };
        Evidence::Groups {
            group_a: vec![d("final score 3-1", 1)],
            group_b: vec![d("weather today", 0)],
        }
    }

    #[test]
    fn proposals_drop_invalid_regexes() {
        let dir = tempfile::tempdir().unwrap();
        let reply = r#"{"candidates": [
            {"name": "score", "definition": "has a game score", "regex": "\\d+-\\d+"},
            {"name": "repeat", "definition": "repeated word", "regex": "(\\w+) \\1"},
            {"name": "steps only", "definition": "x", "steps": ["a", "b"]}
        ]}"#;
        let g = Gateway::live(Scripted::new(&[reply]), dir.path());
        let out = propose_features(&g, &proposer(), &groups(), Lane::Lexical, &[], &[], 4).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].name, "score");
        assert!(propose_features(&g, &proposer(), &Evidence::Pairs(vec![]), Lane::Lexical, &[], &[], 4).is_err());
    }

    #[test]
    fn proposal_prompt_mentions_admitted_and_uncovered() {
        let uncovered = vec![Document {
            id: "u".into(),
            text: "an uncovered positive".into(),
            label: 1,
        }];
        let p = render_proposal_prompt(
            &groups(),
            Lane::Semantic,
            &[("score".into(), "has a game score".into())],
            &uncovered,
            4,
        );
        assert!(p.contains("- score: has a game score"));
        assert!(p.contains("an uncovered positive"));
        assert!(p.contains("\"steps\""));
    }

    fn semantic() -> CandidateDefinition {
        CandidateDefinition {
            name: "mentions weather".into(),
            definition: "The text talks about weather conditions.".into(),
            lane: Lane::Semantic,
            rule: FeatureRule::Steps {
                steps: vec!["Read the text.".into(), "Answer 1 if it mentions weather.".into()],
            },
            positive_example: "rain tomorrow".into(),
            negative_example: "stock prices".into(),
        }
    }

    /// Labels each embedded text 1 iff it contains "rain".
    struct RainLabeler {
        calls: AtomicUsize,
    }

    impl Transport for RainLabeler {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let verdicts: Vec<u8> = parse_label_prompt_texts(&request.prompt)
                .iter()
                .map(|t| t.contains("rain") as u8)
                .collect();
            Ok(ChatResponse {
                text: serde_json::json!({ "verdicts": verdicts }).to_string(),
                usage: Usage::default(),
            })
        }
    }

    #[test]
    fn chunked_labeling_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(RainLabeler {
            calls: AtomicUsize::new(0),
        });
        let g = Gateway::live(t.clone(), dir.path()).with_max_in_flight(2);
        let docs: Vec<Document> = (0..25)
            .map(|i| Document {
                id: format!("d{i}"),
                text: if i % 3 == 0 { format!("rain \"{i}\"\nnext") } else { format!("sun {i}") },
                label: 0,
            })
            .collect();
        let refs: Vec<&Document> = docs.iter().collect();
        let cfg = RoleConfig::new(Role::Labeler, "vendor-c", "model-l");
        let v = label_with_definition(&g, &cfg, &semantic(), &refs, 10).unwrap();
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
        let expected: Vec<u8> = (0..25).map(|i| (i % 3 == 0) as u8).collect();
        assert_eq!(v, expected);
    }

    #[test]
    fn label_prompt_is_isolated() {
        let texts = ["alpha", "beta"];
        let p = render_label_prompt(&semantic(), &texts);
        assert!(!p.to_lowercase().contains("label"));
        assert!(!p.contains("Group A"));
        assert_eq!(parse_label_prompt_texts(&p), vec!["alpha", "beta"]);
    }

    #[test]
    fn lexical_features_are_not_sent_to_labelers() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gateway::replay(dir.path());
        let mut lex = semantic();
        lex.lane = Lane::Lexical;
        lex.rule = FeatureRule::Regex {
            regex: "rain".into(),
            case_sensitive: false,
        };
        let d = Document {
            id: "a".into(),
            text: "rain".into(),
            label: 0,
        };
        let cfg = RoleConfig::new(Role::Labeler, "v", "m");
        assert!(label_with_definition(&g, &cfg, &lex, &[&d], 10).is_err());
        assert_eq!(g.stats.total(), 0);
    }

    #[test]
    fn token_bucket_waits_after_burst() {
        let mut b = TokenBucket::new(10.0, 2.0);
        assert!(b.acquire().is_zero());
        assert!(b.acquire().is_zero());
        assert!(b.acquire() > Duration::ZERO);
    }

    #[test]
    fn json_extraction_handles_braces_in_strings() {
        assert_eq!(extract_json("x {\"a\": \"}\"} y"), Some("{\"a\": \"}\"}"));
        assert_eq!(extract_json("none"), None);
    }
}
