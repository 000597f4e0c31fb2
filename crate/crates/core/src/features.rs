//! Executable named features and the labeled feature matrix.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::{is_nfc, UnicodeNormalization};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::gateway::{label_with_definition, CandidateDefinition, Gateway, RoleConfig};
use crate::pairing::Lane;
use crate::vectorize::content_hash;
use crate::BinaryVec;

/// Compiled program size cap for lexical rules.
const REGEX_SIZE_LIMIT: usize = 1 << 20;

/// Executable part of a feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureRule {
    Regex {
        regex: String,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        case_sensitive: bool,
    },
    Steps {
        steps: Vec<String>,
    },
}

/// Name the first construct outside the linear-time dialect, if any.
fn forbidden_construct(pattern: &str) -> Option<&'static str> {
    let chars: Vec<char> = pattern.chars().collect();
    let mut i = 0;
    let mut in_class = false;
    while i < chars.len() {
        match chars[i] {
            '\\' => {
                match chars.get(i + 1) {
                    Some('1'..='9') if !in_class => return Some("backreference"),
                    Some('k') if matches!(chars.get(i + 2), Some('<' | '{' | '\'')) => {
                        return Some("named backreference")
                    }
                    Some('g') if !in_class => return Some("backreference"),
                    _ => {}
                }
                i += 2;
                continue;
            }
            '[' if !in_class => in_class = true,
            ']' if in_class => in_class = false,
            '(' if !in_class && chars.get(i + 1) == Some(&'?') => {
                match (chars.get(i + 2), chars.get(i + 3)) {
                    (Some('='), _) => return Some("lookahead"),
                    (Some('!'), _) => return Some("negative lookahead"),
                    (Some('<'), Some('=')) => return Some("lookbehind"),
                    (Some('<'), Some('!')) => return Some("negative lookbehind"),
                    (Some('>'), _) => return Some("atomic group"),
                    _ => {}
                }
            }
            '+' | '*' | '?' | '}' if !in_class && chars.get(i + 1) == Some(&'+') => {
                return Some("possessive quantifier")
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Compile a rule in the linear-time dialect: no backreferences, no
/// lookaround, bounded program size. Case-insensitive unless asked otherwise.
///
/// Matching runs on finite automata, so nested quantifiers such as `(a+)+b`
/// are accepted and still match in linear time.
pub fn compile_safe_regex(pattern: &str, case_sensitive: bool) -> Result<Regex> {
    if pattern.is_empty() {
        return Err(Error::RegexSyntax("pattern is empty".into()));
    }
    if let Some(construct) = forbidden_construct(pattern) {
        return Err(Error::DialectViolation(construct.into()));
    }
    let normalized: String = pattern.nfc().collect();
    RegexBuilder::new(&normalized)
        .case_insensitive(!case_sensitive)
        .unicode(true)
        .size_limit(REGEX_SIZE_LIMIT)
        .dfa_size_limit(REGEX_SIZE_LIMIT)
        .build()
        .map_err(|e| match e {
            regex::Error::CompiledTooBig(_) => Error::DialectViolation("repetition too large".into()),
            other => Error::RegexSyntax(other.to_string()),
        })
}

/// Firing of a compiled rule on one text. A rule that can match the empty
/// string fires on every text.
pub fn fires(regex: &Regex, text: &str) -> bool {
    if is_nfc(text) {
        regex.is_match(text)
    } else {
        regex.is_match(&text.nfc().collect::<String>())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub round: usize,
    pub phase: String,
    pub template_version: String,
}

/// Kappa recorded at admission: exact for lexical rules, measured otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdmittedKappa {
    Measured(f64),
    Marked(ExactMark),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExactMark {
    Exact,
}

impl AdmittedKappa {
    pub const EXACT: AdmittedKappa = AdmittedKappa::Marked(ExactMark::Exact);

    pub fn value(&self) -> f64 {
        match self {
            AdmittedKappa::Measured(k) => *k,
            AdmittedKappa::Marked(_) => 1.0,
        }
    }
}

/// One codebook entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFeature {
    pub id: String,
    pub name: String,
    pub lane: Lane,
    pub definition: String,
    pub rule: FeatureRule,
    #[serde(default)]
    pub positive_example: String,
    #[serde(default)]
    pub negative_example: String,
    pub provenance: Provenance,
    pub admitted_kappa: AdmittedKappa,
    #[serde(default)]
    pub rho_to_label: Option<f64>,
}

impl NamedFeature {
    pub fn from_candidate(
        id: impl Into<String>,
        candidate: &CandidateDefinition,
        provenance: Provenance,
        admitted_kappa: AdmittedKappa,
        rho_to_label: Option<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            name: candidate.name.clone(),
            lane: candidate.lane,
            definition: candidate.definition.clone(),
            rule: candidate.rule.clone(),
            positive_example: candidate.positive_example.clone(),
            negative_example: candidate.negative_example.clone(),
            provenance,
            admitted_kappa,
            rho_to_label,
        }
    }

    pub fn as_candidate(&self) -> CandidateDefinition {
        CandidateDefinition {
            name: self.name.clone(),
            definition: self.definition.clone(),
            lane: self.lane,
            rule: self.rule.clone(),
            positive_example: self.positive_example.clone(),
            negative_example: self.negative_example.clone(),
        }
    }

    /// Hash of everything a rater sees; edits invalidate cached labels.
    pub fn content_hash(&self) -> String {
        candidate_hash(&self.as_candidate())
    }

    pub fn compile(&self) -> Result<Regex> {
        match &self.rule {
            FeatureRule::Regex {
                regex,
                case_sensitive,
            } if self.lane == Lane::Lexical => compile_safe_regex(regex, *case_sensitive),
            _ => Err(Error::InvalidArgument(format!(
                "feature {} is not a lexical rule",
                self.id
            ))),
        }
    }
}

pub fn candidate_hash(c: &CandidateDefinition) -> String {
    let bytes = serde_json::to_vec(c).expect("candidate serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Apply a lexical rule to documents.
pub fn apply_lexical(feature: &NamedFeature, docs: &[Document]) -> Result<BinaryVec> {
    let regex = feature.compile()?;
    Ok(docs.iter().map(|d| fires(&regex, &d.text) as u8).collect())
}

pub fn apply_candidate_lexical(candidate: &CandidateDefinition, docs: &[&Document]) -> Result<BinaryVec> {
    match (&candidate.lane, &candidate.rule) {
        (Lane::Lexical, FeatureRule::Regex { regex, case_sensitive }) => {
            let re = compile_safe_regex(regex, *case_sensitive)?;
            Ok(docs.iter().map(|d| fires(&re, &d.text) as u8).collect())
        }
        _ => Err(Error::InvalidArgument(format!(
            "candidate {:?} is not a lexical rule",
            candidate.name
        ))),
    }
}

/// Per-document verdict cache keyed by (feature content, document content,
/// role, model).
#[derive(Debug, Default)]
pub struct SemanticLabelCache {
    entries: Mutex<HashMap<String, u8>>,
}

impl SemanticLabelCache {
    fn key(feature_hash: &str, doc: &Document, cfg: &RoleConfig) -> String {
        format!(
            "{feature_hash}:{}:{}:{}",
            content_hash(&doc.text),
            cfg.role,
            cfg.model_id
        )
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("label cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Label documents with a semantic feature through one role, serving repeats
/// from the per-document cache and sending only misses to the gateway.
pub fn label_semantic(
    gateway: &Gateway,
    cache: &SemanticLabelCache,
    candidate: &CandidateDefinition,
    docs: &[&Document],
    cfg: &RoleConfig,
    chunk_size: usize,
) -> Result<BinaryVec> {
    if candidate.lane != Lane::Semantic {
        return Err(Error::InvalidArgument(format!(
            "feature {:?} is not semantic",
            candidate.name
        )));
    }
    let feature_hash = candidate_hash(candidate);
    let keys: Vec<String> = docs
        .iter()
        .map(|d| SemanticLabelCache::key(&feature_hash, d, cfg))
        .collect();
    let mut out: Vec<Option<u8>> = {
        let entries = cache.entries.lock().expect("label cache poisoned");
        keys.iter().map(|k| entries.get(k).copied()).collect()
    };
    let mut seen = HashSet::new();
    let missing: Vec<usize> = (0..docs.len())
        .filter(|&i| out[i].is_none() && seen.insert(keys[i].as_str()))
        .collect();
    if !missing.is_empty() {
        let batch: Vec<&Document> = missing.iter().map(|&i| docs[i]).collect();
        let verdicts = label_with_definition(gateway, cfg, candidate, &batch, chunk_size)?;
        let mut entries = cache.entries.lock().expect("label cache poisoned");
        for (&i, v) in missing.iter().zip(verdicts) {
            entries.insert(keys[i].clone(), v);
        }
        for (slot, key) in out.iter_mut().zip(&keys) {
            if slot.is_none() {
                *slot = entries.get(key).copied();
            }
        }
    }
    Ok(out.into_iter().map(|v| v.expect("labeled")).collect())
}

/// N x K binary matrix with row and column identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    /// Column-major: `columns[k][i]` is feature k on row i.
    pub columns: Vec<BinaryVec>,
}

impl FeatureMatrix {
    pub fn empty(row_ids: Vec<String>) -> Self {
        Self {
            row_ids,
            column_ids: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_ids.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.columns[col][row]
    }

    pub fn column(&self, id: &str) -> Option<&BinaryVec> {
        self.column_ids
            .iter()
            .position(|c| c == id)
            .map(|k| &self.columns[k])
    }

    pub fn push_column(&mut self, id: impl Into<String>, column: BinaryVec) -> Result<()> {
        let id = id.into();
        if column.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                expected: self.n_rows(),
                actual: column.len(),
            });
        }
        if self.column_ids.contains(&id) {
            return Err(Error::InvalidArgument(format!("duplicate feature id {id}")));
        }
        if column.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("column {id} is not binary")));
        }
        self.column_ids.push(id);
        self.columns.push(column);
        Ok(())
    }

    pub fn with_column(&self, id: impl Into<String>, column: BinaryVec) -> Result<Self> {
        let mut next = self.clone();
        next.push_column(id, column)?;
        Ok(next)
    }

    pub fn without_column(&self, index: usize) -> Self {
        let mut next = self.clone();
        next.column_ids.remove(index);
        next.columns.remove(index);
        next
    }

    /// Row-major view, one `Vec<u8>` per document.
    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n_rows())
            .map(|i| self.columns.iter().map(|c| c[i]).collect())
            .collect()
    }

    /// Reorder rows to follow `order` (indices into current rows).
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        Self {
            row_ids: order.iter().map(|&i| self.row_ids[i].clone()).collect(),
            column_ids: self.column_ids.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| order.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    /// CSV with header `doc_id,<feature ids...>` and 0/1 cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("doc_id");
        for id in &self.column_ids {
            out.push(',');
            out.push_str(&csv_field(id));
        }
        out.push('\n');
        for (i, row_id) in self.row_ids.iter().enumerate() {
            out.push_str(&csv_field(row_id));
            for c in &self.columns {
                out.push(',');
                out.push(if c[i] == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("matrix header: {e}")))?
            .clone();
        if headers.get(0) != Some("doc_id") {
            return Err(Error::Data("matrix header must start with doc_id".into()));
        }
        let mut matrix = FeatureMatrix::empty(Vec::new());
        let column_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut columns: Vec<BinaryVec> = vec![Vec::new(); column_ids.len()];
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::MalformedRecord {
                row,
                message: e.to_string(),
            })?;
            matrix.row_ids.push(record.get(0).unwrap_or_default().to_string());
            for (k, col) in columns.iter_mut().enumerate() {
                match record.get(k + 1) {
                    Some("0") => col.push(0),
                    Some("1") => col.push(1),
                    other => {
                        return Err(Error::MalformedRecord {
                            row,
                            message: format!("cell {other:?} is not binary"),
                        })
                    }
                }
            }
        }
        for (id, col) in column_ids.into_iter().zip(columns) {
            matrix.push_column(id, col)?;
        }
        Ok(matrix)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Assemble a matrix in the given feature order.
pub fn assemble_matrix(
    features: &[NamedFeature],
    columns: Vec<BinaryVec>,
    row_ids: Vec<String>,
) -> Result<FeatureMatrix> {
    if features.len() != columns.len() {
        return Err(Error::LengthMismatch {
            expected: features.len(),
            actual: columns.len(),
        });
    }
    let mut matrix = FeatureMatrix::empty(row_ids);
    for (f, c) in features.iter().zip(columns) {
        matrix.push_column(f.id.clone(), c)?;
    }
    Ok(matrix)
}

/// Validate a codebook: unique ids, executable rules, and (when given) the
/// kappa floor for semantic entries.
pub fn validate_codebook(features: &[NamedFeature], kappa_star: Option<f64>) -> Result<()> {
    let mut ids = HashSet::new();
    for (i, f) in features.iter().enumerate() {
        let field_err = |field: &str, msg: String| {
            Error::Data(format!("codebook entry {i} ({}): field `{field}`: {msg}", f.id))
        };
        if !ids.insert(f.id.as_str()) {
            return Err(field_err("id", "duplicate".into()));
        }
        f.as_candidate()
            .validate()
            .map_err(|m| field_err("rule", m))?;
        match (f.lane, f.admitted_kappa) {
            (Lane::Semantic, AdmittedKappa::Measured(k)) => {
                if let Some(floor) = kappa_star {
                    if k < floor {
                        return Err(field_err(
                            "admitted_kappa",
                            format!("{k} is below the threshold {floor}"),
                        ));
                    }
                }
            }
            (Lane::Semantic, AdmittedKappa::Marked(_)) => {
                return Err(field_err(
                    "admitted_kappa",
                    "semantic features need a measured kappa".into(),
                ))
            }
            (Lane::Lexical, _) => {}
        }
    }
    Ok(())
}

pub fn parse_codebook(json: &str, kappa_star: Option<f64>) -> Result<Vec<NamedFeature>> {
    let features: Vec<NamedFeature> =
        serde_json::from_str(json).map_err(|e| Error::Data(format!("codebook schema: {e}")))?;
    validate_codebook(&features, kappa_star)?;
    Ok(features)
}

pub fn load_codebook(path: &Path, kappa_star: Option<f64>) -> Result<Vec<NamedFeature>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_codebook(&text, kappa_star)
}

pub fn codebook_json(features: &[NamedFeature]) -> String {
    let mut s = serde_json::to_string_pretty(features).expect("codebook serializes");
    s.push('\n');
    s
}
