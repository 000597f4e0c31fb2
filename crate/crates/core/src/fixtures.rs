//! Synthetic corpora with planted surface cues and a scripted, offline LLM
//! transport. Test support only: nothing here touches the network.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::corpus::{Document, LabeledDataset};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gateway::{
    parse_label_prompt_texts, ChatRequest, ChatResponse, Gateway, Role, RoleConfig, Transport, Usage,
};
use crate::rng;
use crate::selection::Roles;
use crate::vectorize::{content_hash, TokenizerSpec};

/// A surface cue planted into some documents.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCue {
    pub name: String,
    /// Phrase templates; `{n}` is replaced by a random digit 0-9.
    pub phrases: Vec<String>,
    /// Safe-dialect regex that fires exactly on the planted phrases.
    pub regex: String,
    /// Share of documents carrying the cue.
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CueSampling {
    /// At most one cue per document, with exact per-cue quotas.
    Exclusive,
    /// Each cue fires independently with its rate.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelRule {
    AnyOf(Vec<usize>),
    AllOf(Vec<usize>),
}

impl LabelRule {
    fn apply(&self, fired: &[bool]) -> u8 {
        match self {
            LabelRule::AnyOf(ix) => ix.iter().any(|&i| fired[i]) as u8,
            LabelRule::AllOf(ix) => ix.iter().all(|&i| fired[i]) as u8,
        }
    }

    fn indices(&self) -> &[usize] {
        match self {
            LabelRule::AnyOf(ix) | LabelRule::AllOf(ix) => ix,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpusSpec {
    pub name: String,
    pub label_question: String,
    pub n_docs: usize,
    pub cues: Vec<PlantedCue>,
    pub sampling: CueSampling,
    pub label_rule: LabelRule,
    pub noise_vocabulary: Vec<String>,
    /// Inclusive range of filler words per document.
    pub words_per_doc: (usize, usize),
    pub seed: u64,
}

pub const CUE_A_REGEX: &str = r"final score \d+-\d+";
pub const CUE_B_REGEX: &str = "overtime winner";
/// Fires exactly when the two-cue label does.
pub const PARAPHRASE_REGEX: &str = r"final score \d+-\d+|overtime winner";
/// Same extension as [`PARAPHRASE_REGEX`], different program.
pub const PARAPHRASE_ALT_REGEX: &str = r"overtime winner|final score \d+-\d+";

const NOISE_WORDS: &[&str] = &[
    "the", "match", "crowd", "stadium", "coach", "players", "season", "league", "team", "fans",
    "weather", "tickets", "training", "injury", "midfield", "defense", "pitch", "referee",
    "halftime", "kickoff", "travel", "bus", "city", "morning", "evening", "report", "press",
    "interview", "club", "youth", "academy", "captain", "bench", "tactics", "goalkeeper",
    "supporters", "anthem", "rain", "sunshine", "quiet", "loud", "local", "radio", "television",
];

fn default_noise() -> Vec<String> {
    NOISE_WORDS.iter().map(|w| w.to_string()).collect()
}

/// Two exclusive cues, label = A or B. About 70% of documents are positive,
/// which keeps each single cue's label correlation below 0.6 while the pair
/// together reproduces the label exactly.
pub fn two_cue_spec(n_docs: usize, seed: u64) -> PlantedCorpusSpec {
    PlantedCorpusSpec {
        name: "two-cue".into(),
        label_question: "Does the report announce a decided result?".into(),
        n_docs,
        cues: vec![
            PlantedCue {
                name: "final score".into(),
                phrases: vec!["final score {n}-{n}".into(), "a final score {n}{n}-{n}".into()],
                regex: CUE_A_REGEX.into(),
                rate: 0.35,
            },
            PlantedCue {
                name: "overtime winner".into(),
                phrases: vec!["overtime winner".into(), "an overtime winner late".into()],
                regex: CUE_B_REGEX.into(),
                rate: 0.35,
            },
        ],
        sampling: CueSampling::Exclusive,
        label_rule: LabelRule::AnyOf(vec![0, 1]),
        noise_vocabulary: default_noise(),
        words_per_doc: (8, 14),
        seed,
    }
}

fn fill_phrase(template: &str, rng: &mut impl Rng) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find("{n}") {
        out.push_str(&rest[..pos]);
        out.push(char::from(b'0' + rng.gen_range(0..10u8)));
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    out
}

fn validate_spec(spec: &PlantedCorpusSpec) -> Result<()> {
    if spec.cues.is_empty() {
        return Err(Error::InvalidArgument("planted corpus needs at least one cue".into()));
    }
    if spec.n_docs == 0 {
        return Err(Error::InvalidArgument("planted corpus needs n_docs > 0".into()));
    }
    if spec.label_rule.indices().is_empty() || spec.label_rule.indices().iter().any(|&i| i >= spec.cues.len()) {
        return Err(Error::InvalidArgument("label rule must reference existing cues".into()));
    }
    if spec.noise_vocabulary.is_empty() || spec.words_per_doc.0 > spec.words_per_doc.1 {
        return Err(Error::InvalidArgument("noise vocabulary and word range must be non-empty".into()));
    }
    for cue in &spec.cues {
        if cue.phrases.is_empty() || !(0.0..=1.0).contains(&cue.rate) {
            return Err(Error::InvalidArgument(format!("cue {:?} needs phrases and a rate in [0, 1]", cue.name)));
        }
    }
    if spec.sampling == CueSampling::Exclusive && spec.cues.iter().map(|c| c.rate).sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument("exclusive cue rates sum above 1".into()));
    }
    Ok(())
}

/// Generate documents whose label is a known function of planted cues,
/// together with the ground-truth cue firing matrix (one column per cue).
pub fn generate_planted_corpus(spec: &PlantedCorpusSpec) -> Result<(LabeledDataset, FeatureMatrix)> {
    validate_spec(spec)?;
    let n = spec.n_docs;
    let k = spec.cues.len();
    let mut assign_rng = rng::stream(spec.seed, "planted-cues", 0);
    let fired: Vec<Vec<bool>> = match spec.sampling {
        CueSampling::Exclusive => {
            let mut slots: Vec<Option<usize>> = Vec::with_capacity(n);
            for (i, cue) in spec.cues.iter().enumerate() {
                let quota = (cue.rate * n as f64).round() as usize;
                slots.extend(std::iter::repeat_n(Some(i), quota));
            }
            slots.truncate(n);
            slots.resize(n, None);
            slots.shuffle(&mut assign_rng);
            slots
                .into_iter()
                .map(|s| (0..k).map(|i| s == Some(i)).collect())
                .collect()
        }
        CueSampling::Independent => (0..n)
            .map(|_| spec.cues.iter().map(|c| assign_rng.gen_bool(c.rate)).collect())
            .collect(),
    };

    let mut text_rng = rng::stream(spec.seed, "planted-text", 0);
    let mut documents = Vec::with_capacity(n);
    for (row, cues) in fired.iter().enumerate() {
        let len = text_rng.gen_range(spec.words_per_doc.0..=spec.words_per_doc.1);
        let mut parts: Vec<String> = (0..len)
            .map(|_| spec.noise_vocabulary.choose(&mut text_rng).expect("non-empty").clone())
            .collect();
        for (i, on) in cues.iter().enumerate() {
            if *on {
                let template = spec.cues[i].phrases.choose(&mut text_rng).expect("non-empty");
                let at = text_rng.gen_range(0..=parts.len());
                parts.insert(at, fill_phrase(template, &mut text_rng));
            }
        }
        documents.push(Document {
            id: format!("{}-{row:05}", spec.name),
            text: parts.join(" "),
            label: spec.label_rule.apply(cues),
        });
    }
    let dataset = LabeledDataset::new(&spec.name, &spec.label_question, documents)?;
    if dataset.class_count(0) == 0 || dataset.class_count(1) == 0 {
        return Err(Error::InvalidArgument(
            "planted corpus spec produces a single class".into(),
        ));
    }
    let mut matrix = FeatureMatrix::empty(dataset.ids());
    for (i, cue) in spec.cues.iter().enumerate() {
        matrix.push_column(cue.name.clone(), fired.iter().map(|f| f[i] as u8).collect())?;
    }
    Ok((dataset, matrix))
}

/// Per-text verdict function used to answer labeling prompts.
pub type VerdictFn = Arc<dyn Fn(&str) -> u8 + Send + Sync>;

#[derive(Clone)]
pub enum ScriptResponse {
    Text(String),
    PerText(VerdictFn),
}

impl fmt::Debug for ScriptResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptResponse::Text(t) => f.debug_tuple("Text").field(t).finish(),
            ScriptResponse::PerText(_) => f.write_str("PerText(..)"),
        }
    }
}

/// Matches a request when the role agrees, every `contains` substring is in
/// the prompt and no `excludes` substring is.
#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub role: Role,
    pub contains: Vec<String>,
    pub excludes: Vec<String>,
    pub response: ScriptResponse,
}

impl ScriptRule {
    fn matches(&self, request: &ChatRequest) -> bool {
        request.role == self.role
            && self.contains.iter().all(|s| request.prompt.contains(s.as_str()))
            && !self.excludes.iter().any(|s| request.prompt.contains(s.as_str()))
    }
}

/// Ordered rules; the first match answers.
#[derive(Debug, Clone, Default)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, role: Role, contains: &[&str], excludes: &[&str], reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            role,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            excludes: excludes.iter().map(|s| s.to_string()).collect(),
            response: ScriptResponse::Text(reply.into()),
        });
        self
    }

    pub fn verdicts(mut self, role: Role, contains: &[&str], f: impl Fn(&str) -> u8 + Send + Sync + 'static) -> Self {
        self.rules.push(ScriptRule {
            role,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            excludes: Vec::new(),
            response: ScriptResponse::PerText(Arc::new(f)),
        });
        self
    }
}

/// Offline transport answering from a [`Script`]. Unmatched requests are
/// reported as replay misses.
#[derive(Debug)]
pub struct ScriptedTransport {
    script: Script,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

pub const FIXTURE_EMBED_DIM: usize = 64;

impl ScriptedTransport {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }
}

/// Hashed bag-of-words vector, L2-normalised.
pub fn hashed_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; FIXTURE_EMBED_DIM];
    for token in TokenizerSpec::default().tokenize(text) {
        let h = content_hash(&token);
        let bucket = usize::from_str_radix(&h[..8], 16).expect("hex digest") % FIXTURE_EMBED_DIM;
        v[bucket] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl Transport for ScriptedTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.matches(request))
            .ok_or_else(|| Error::ReplayMiss(format!("no scripted reply for {} request {}", request.role, request.hash())))?;
        let text = match &rule.response {
            ScriptResponse::Text(t) => t.clone(),
            ScriptResponse::PerText(f) => {
                let verdicts: Vec<u8> = parse_label_prompt_texts(&request.prompt)
                    .iter()
                    .map(|t| f(t))
                    .collect();
                json!({ "verdicts": verdicts }).to_string()
            }
        };
        Ok(ChatResponse {
            text,
            usage: Usage::default(),
        })
    }

    fn embed(&self, _provider_id: &str, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| hashed_embedding(t)).collect())
    }
}

/// Live gateway over a scripted transport. Every exchange lands in the cache
/// under `cache_root`, so a later `Gateway::replay(cache_root)` serves the
/// same run without the script.
pub fn scripted_gateway_fixture(script: Script, cache_root: &Path) -> (Gateway, Arc<ScriptedTransport>) {
    let transport = Arc::new(ScriptedTransport::new(script));
    let gateway = Gateway::live(transport.clone(), cache_root);
    (gateway, transport)
}

/// Three roles on three distinct fixture vendors.
pub fn fixture_roles() -> Roles {
    Roles {
        proposer: RoleConfig::new(Role::Proposer, "vendor-p", "proposer-1"),
        labeler: RoleConfig::new(Role::Labeler, "vendor-l", "labeler-1"),
        examiner: RoleConfig::new(Role::Examiner, "vendor-e", "examiner-1"),
    }
}

/// Deterministic pseudo-random share of texts, by content hash.
pub fn hashed_fraction(text: &str, percent: u32) -> bool {
    let h = content_hash(text);
    u32::from_str_radix(&h[..8], 16).expect("hex digest") % 100 < percent
}

fn lexical_reply(cands: &[(&str, &str, &str)]) -> String {
    let items: Vec<_> = cands
        .iter()
        .map(|(name, definition, regex)| {
            json!({
                "name": name,
                "definition": definition,
                "regex": regex,
                "positive_example": "",
                "negative_example": "",
            })
        })
        .collect();
    json!({ "candidates": items }).to_string()
}

const EMPTY_REPLY: &str = r#"{"candidates": []}"#;
const LEXICAL: &str = "Lane: lexical";
const SEMANTIC: &str = "Lane: semantic";
const BOOTSTRAP: &str = "Group A:\n";
const NO_ADMITTED: &str = "do not repeat or restate them):\n(none)";

fn paraphrase_candidate(regex: &str) -> (&'static str, &'static str, &str) {
    (
        "decided result",
        "The report states a final score or names an overtime winner.",
        regex,
    )
}

fn coaching_verdict(text: &str) -> u8 {
    text.contains("coach") as u8
}

/// Script for the two-cue corpus.
///
/// Round 0 proposes both planted cues (lexical) and a semantic feature on
/// which the examiner disagrees with the labeler on about 40% of texts.
/// Round 1 proposes a regex paraphrasing the label rule. Every later prompt,
/// including all residual-phase prompts, gets an empty proposal.
pub fn two_cue_script() -> Script {
    let cues = lexical_reply(&[
        ("final score", "The text reports a final score written as two numbers joined by a dash.", CUE_A_REGEX),
        ("overtime winner", "The text mentions an overtime winner.", CUE_B_REGEX),
    ]);
    let semantic = json!({"candidates": [{
        "name": "coaching focus",
        "definition": "The text discusses the coaching staff.",
        "steps": ["Find any mention of a coach.", "Answer 1 if the coach is discussed, otherwise 0."],
        "positive_example": "the coach spoke",
        "negative_example": "the crowd sang",
    }]})
    .to_string();
    Script::new()
        .text(Role::Proposer, &[LEXICAL, BOOTSTRAP, NO_ADMITTED], &[], cues)
        .text(Role::Proposer, &[LEXICAL, BOOTSTRAP], &[], lexical_reply(&[paraphrase_candidate(PARAPHRASE_REGEX)]))
        .text(Role::Proposer, &[SEMANTIC, BOOTSTRAP, NO_ADMITTED], &[], semantic)
        .text(Role::Proposer, &[], &[], EMPTY_REPLY)
        .verdicts(Role::Labeler, &[], coaching_verdict)
        .verdicts(Role::Examiner, &[], |t| coaching_verdict(t) ^ hashed_fraction(t, 40) as u8)
}

/// Script that offers a label paraphrase first and a second, differently
/// written paraphrase in every later bootstrap round.
pub fn paraphrase_first_script() -> Script {
    Script::new()
        .text(
            Role::Proposer,
            &[LEXICAL, BOOTSTRAP, NO_ADMITTED],
            &[],
            lexical_reply(&[paraphrase_candidate(PARAPHRASE_REGEX)]),
        )
        .text(
            Role::Proposer,
            &[LEXICAL, BOOTSTRAP],
            &[],
            lexical_reply(&[("result announced", "The report announces how the game was decided.", PARAPHRASE_ALT_REGEX)]),
        )
        .text(Role::Proposer, &[], &[], EMPTY_REPLY)
}
