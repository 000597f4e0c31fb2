//! Labeled text datasets: loading, balanced subsampling and stratified splits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub label_question: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: serde_json::Value,
}

/// NFC-normalize and drop trailing line terminators. No other mutation.
pub fn normalize_text(text: &str) -> String {
    let trimmed = text.trim_end_matches(['\n', '\r']);
    trimmed.nfc().collect()
}

fn parse_label(row: usize, value: &serde_json::Value) -> Result<u8> {
    let parsed = match value {
        serde_json::Value::Number(n) => n.as_u64(),
        serde_json::Value::String(s) => s.trim().parse::<u64>().ok(),
        serde_json::Value::Bool(b) => Some(*b as u64),
        _ => None,
    };
    match parsed {
        Some(0) => Ok(0),
        Some(1) => Ok(1),
        _ => Err(Error::MalformedRecord {
            row,
            message: format!("label must be 0 or 1, got {value}"),
        }),
    }
}

impl LabeledDataset {
    /// Build a dataset, enforcing id uniqueness, non-empty text and binary labels.
    pub fn new(
        name: impl Into<String>,
        label_question: impl Into<String>,
        documents: Vec<Document>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for (row, doc) in documents.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    row,
                    message: "text is empty".into(),
                });
            }
            if doc.label > 1 {
                return Err(Error::MalformedRecord {
                    row,
                    message: format!("label must be 0 or 1, got {}", doc.label),
                });
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            label_question: label_question.into(),
            documents,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    pub fn class_count(&self, label: u8) -> usize {
        self.documents.iter().filter(|d| d.label == label).count()
    }

    /// Both classes must be populated for discovery.
    pub fn require_both_classes(&self) -> Result<()> {
        for label in [0u8, 1] {
            if self.class_count(label) == 0 {
                return Err(Error::InsufficientClass {
                    label,
                    needed: 1,
                    available: 0,
                });
            }
        }
        Ok(())
    }

    /// Documents whose id is in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> LabeledDataset {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        LabeledDataset {
            name: self.name.clone(),
            label_question: self.label_question.clone(),
            documents: self
                .documents
                .iter()
                .filter(|d| wanted.contains(d.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Serialize as jsonl (`{"id","text","label"}` per line).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        for doc in &self.documents {
            let line = serde_json::to_string(doc)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Load a dataset from jsonl or csv. Missing ids become `<name>-<row>`.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledDataset> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw = match format {
        DatasetFormat::Jsonl => read_jsonl(BufReader::new(file), path)?,
        DatasetFormat::Csv => read_csv(file)?,
    };
    let width = raw.len().to_string().len().max(5);
    let mut documents = Vec::with_capacity(raw.len());
    for (row, rec) in raw.into_iter().enumerate() {
        let label = parse_label(row, &rec.label)?;
        let id = match rec.id {
            Some(id) if !id.is_empty() => id,
            _ => format!("{name}-{row:0width$}"),
        };
        documents.push(Document {
            id,
            text: normalize_text(&rec.text),
            label,
        });
    }
    LabeledDataset::new(name, String::new(), documents)
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = out.len();
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            row,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_csv(file: File) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("csv header: {e}")))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (text_col, label_col) = match (column("text"), column("label")) {
        (Some(t), Some(l)) => (t, l),
        _ => return Err(Error::Data("csv header must contain text and label".into())),
    };
    let id_col = column("id");
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedRecord {
            row,
            message: e.to_string(),
        })?;
        let get = |col: usize| {
            record.get(col).ok_or_else(|| Error::MalformedRecord {
                row,
                message: format!("missing column {col}"),
            })
        };
        out.push(RawRecord {
            id: id_col.and_then(|c| record.get(c)).map(str::to_string),
            text: get(text_col)?.to_string(),
            label: serde_json::Value::String(get(label_col)?.to_string()),
        });
    }
    Ok(out)
}

/// Seeded balanced subsample with exactly `n / 2` documents per class.
///
/// Selected documents keep their original relative order.
pub fn balance_subsample(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "balanced subsample size must be even and positive, got {n}"
        )));
    }
    let half = n / 2;
    let mut keep = vec![false; ds.len()];
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.documents[i].label == label)
            .collect();
        if idx.len() < half {
            return Err(Error::InsufficientClass {
                label,
                needed: half,
                available: idx.len(),
            });
        }
        let mut rng = rng::stream(seed, "balance", label as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..half] {
            keep[i] = true;
        }
    }
    Ok(LabeledDataset {
        name: ds.name.clone(),
        label_question: ds.label_question.clone(),
        documents: ds
            .documents
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(d, _)| d.clone())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// Train/validation/test id lists, each in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl SplitAssignment {
    pub fn ids(&self, part: Partition) -> &[String] {
        match part {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn dataset(&self, ds: &LabeledDataset, part: Partition) -> LabeledDataset {
        ds.subset(self.ids(part))
    }

    /// Discovery needs both classes in train and validation.
    pub fn require_discovery_ready(&self, ds: &LabeledDataset) -> Result<()> {
        for part in [Partition::Train, Partition::Validation] {
            let sub = self.dataset(ds, part);
            sub.require_both_classes().map_err(|_| {
                Error::Data(format!(
                    "{part:?} partition must contain both classes ({} documents)",
                    sub.len()
                ))
            })?;
        }
        Ok(())
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Largest-remainder apportionment of `n` items by `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Seeded, label-stratified three-way split.
pub fn make_splits(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let mut part_of = vec![Partition::Train; ds.len()];
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.documents[i].label == label)
            .collect();
        let mut rng = rng::stream(seed, "splits", label as u64);
        idx.shuffle(&mut rng);
        let [n_tr, n_va, _] = apportion(idx.len(), &fractions);
        for (pos, &i) in idx.iter().enumerate() {
            part_of[i] = if pos < n_tr {
                Partition::Train
            } else if pos < n_tr + n_va {
                Partition::Validation
            } else {
                Partition::Test
            };
        }
    }
    let mut split = SplitAssignment {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        fractions,
    };
    for (doc, part) in ds.documents.iter().zip(part_of) {
        match part {
            Partition::Train => split.train.push(doc.id.clone()),
            Partition::Validation => split.validation.push(doc.id.clone()),
            Partition::Test => split.test.push(doc.id.clone()),
        }
    }
    Ok(split)
}
