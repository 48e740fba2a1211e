//! Document corpora: JSONL ingestion, validation, statistics and splits.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```json
//! {"id": "d1", "language": "en", "label": "contract", "paragraphs": ["...", "..."]}
//! {"id": "d2", "language": "fr", "html": "<p>...</p><li>...</li>"}
//! ```
//!
//! `label` is optional (unlabeled documents at inference time), and exactly
//! one of `paragraphs` or `html` must be present.

mod html;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::stats::Quartiles;

pub use html::{decode_entities, extract_paragraphs};

/// Language recorded when a record carries none.
pub const UNDETERMINED_LANGUAGE: &str = "und";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub paragraphs: Vec<String>,
}

impl Document {
    /// Character count `n_c`: sum of paragraph lengths in unicode scalars.
    pub fn char_count(&self) -> usize {
        self.paragraphs.iter().map(|p| p.chars().count()).sum()
    }

    /// Paragraph count `n_p`.
    pub fn paragraph_count(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("documents always serialize")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid split ratios {0:?}: each must lie in (0, 1) and they must sum to 1")]
    InvalidSplit((f64, f64, f64)),
}

/// One parsed JSONL line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    /// 1-based line number in the source file.
    pub line: usize,
    pub value: Value,
}

/// A line that could not be parsed as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Result of reading a JSONL file: malformed lines do not abort the rest.
#[derive(Debug, Default, Clone)]
pub struct JsonlBatch {
    pub records: Vec<RawRecord>,
    pub errors: Vec<LineError>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<JsonlBatch, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    read_jsonl(BufReader::new(file)).map_err(io_err)
}

pub fn read_jsonl(reader: impl BufRead) -> io::Result<JsonlBatch> {
    let mut batch = JsonlBatch::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(value) => batch.records.push(RawRecord {
                line: idx + 1,
                value,
            }),
            Err(e) => batch.errors.push(LineError {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}

/// Writes documents as JSONL, one per line.
pub fn write_jsonl(path: impl AsRef<Path>, docs: &[Document]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
    for doc in docs {
        writeln!(out, "{}", doc.to_json_line()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// The first rule a record violates.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationFailure {
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing id")]
    MissingId,
    #[error("field `{field}` must be {expected}")]
    InvalidField {
        field: &'static str,
        expected: &'static str,
    },
    #[error("both paragraphs and html present")]
    ConflictingContent,
    #[error("missing paragraphs or html")]
    MissingContent,
    #[error("empty paragraphs")]
    EmptyParagraphs,
    #[error("duplicate id {0}")]
    DuplicateId(String),
}

/// Checks one record against the document schema.
///
/// Whitespace-only paragraphs are dropped; a record left with no paragraphs
/// fails with [`ValidationFailure::EmptyParagraphs`].
pub fn validate_document(record: &Value) -> Result<Document, ValidationFailure> {
    let obj = record.as_object().ok_or(ValidationFailure::NotAnObject)?;

    let id = match obj.get("id") {
        None | Some(Value::Null) => return Err(ValidationFailure::MissingId),
        Some(Value::String(s)) if s.trim().is_empty() => return Err(ValidationFailure::MissingId),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(ValidationFailure::InvalidField {
                field: "id",
                expected: "a string",
            })
        }
    };
    let language = match obj.get("language") {
        None | Some(Value::Null) => UNDETERMINED_LANGUAGE.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(ValidationFailure::InvalidField {
                field: "language",
                expected: "a string",
            })
        }
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(ValidationFailure::InvalidField {
                field: "label",
                expected: "a string",
            })
        }
    };

    let raw_paragraphs = match (obj.get("paragraphs"), obj.get("html")) {
        (Some(_), Some(_)) => return Err(ValidationFailure::ConflictingContent),
        (None, None) => return Err(ValidationFailure::MissingContent),
        (Some(Value::Array(items)), None) => items
            .iter()
            .map(|v| {
                v.as_str().map(str::to_owned).ok_or(ValidationFailure::InvalidField {
                    field: "paragraphs",
                    expected: "an array of strings",
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        (Some(_), None) => {
            return Err(ValidationFailure::InvalidField {
                field: "paragraphs",
                expected: "an array of strings",
            })
        }
        (None, Some(Value::String(markup))) => extract_paragraphs(markup),
        (None, Some(_)) => {
            return Err(ValidationFailure::InvalidField {
                field: "html",
                expected: "a string",
            })
        }
    };

    let paragraphs: Vec<String> = raw_paragraphs
        .into_iter()
        .filter(|p| !p.trim().is_empty())
        .collect();
    if paragraphs.is_empty() {
        return Err(ValidationFailure::EmptyParagraphs);
    }
    Ok(Document {
        id,
        language,
        label,
        paragraphs,
    })
}

/// Validation outcome for a whole file.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    /// `(line, reason)` for every rejected line.
    pub rejected: Vec<(usize, String)>,
}

/// Loads and validates a JSONL corpus, enforcing id uniqueness.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus, CorpusError> {
    let batch = load_jsonl(path)?;
    let mut out = LoadedCorpus::default();
    out.rejected
        .extend(batch.errors.into_iter().map(|e| (e.line, format!("malformed json: {}", e.message))));
    let mut seen = HashSet::new();
    for record in batch.records {
        match validate_document(&record.value) {
            Ok(doc) if !seen.insert(doc.id.clone()) => {
                out.rejected
                    .push((record.line, ValidationFailure::DuplicateId(doc.id).to_string()));
            }
            Ok(doc) => out.documents.push(doc),
            Err(e) => out.rejected.push((record.line, e.to_string())),
        }
    }
    out.rejected.sort_by_key(|(line, _)| *line);
    Ok(out)
}

/// Class name used for documents without a label.
pub const UNLABELED: &str = "(unlabeled)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub docs: usize,
    /// Quartiles of `n_c`, in characters.
    pub chars: Quartiles,
    /// Quartiles of `n_p`.
    pub paragraphs: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub classes: Vec<ClassStats>,
    pub total: ClassStats,
}

fn class_stats(class: String, docs: &[&Document]) -> ClassStats {
    let chars: Vec<f64> = docs.iter().map(|d| d.char_count() as f64).collect();
    let paragraphs: Vec<f64> = docs.iter().map(|d| d.paragraph_count() as f64).collect();
    ClassStats {
        class,
        docs: docs.len(),
        chars: Quartiles::of(&chars),
        paragraphs: Quartiles::of(&paragraphs),
    }
}

/// Per-class and overall quartiles of character and paragraph counts.
///
/// Returns `None` for an empty corpus.
pub fn corpus_stats(corpus: &[Document]) -> Option<CorpusStats> {
    if corpus.is_empty() {
        return None;
    }
    let mut by_class: BTreeMap<&str, Vec<&Document>> = BTreeMap::new();
    for doc in corpus {
        by_class
            .entry(doc.label.as_deref().unwrap_or(UNLABELED))
            .or_default()
            .push(doc);
    }
    let classes = by_class
        .into_iter()
        .map(|(class, docs)| class_stats(class.to_string(), &docs))
        .collect();
    let all: Vec<&Document> = corpus.iter().collect();
    Some(CorpusStats {
        classes,
        total: class_stats("Total".to_string(), &all),
    })
}

impl CorpusStats {
    /// Aligned text table: class, document count, `n_c` quartiles in
    /// thousands of characters and `n_p` quartiles.
    pub fn render_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.class.chars().count())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} {:>7} | {:^26} | {:^23}",
            "Class", "Docs.", "Characters [k] n_c", "Paragraphs n_p"
        );
        let _ = writeln!(
            out,
            "{:<width$} {:>7} | {:>8} {:>8} {:>8} | {:>7} {:>7} {:>7}",
            "", "", "Q1", "Q2", "Q3", "Q1", "Q2", "Q3"
        );
        let rule = "-".repeat(width + 63);
        let _ = writeln!(out, "{rule}");
        let row = |out: &mut String, s: &ClassStats| {
            let _ = writeln!(
                out,
                "{:<width$} {:>7} | {:>8.1} {:>8.1} {:>8.1} | {:>7.0} {:>7.0} {:>7.0}",
                s.class,
                s.docs,
                s.chars.q1 / 1000.0,
                s.chars.q2 / 1000.0,
                s.chars.q3 / 1000.0,
                s.paragraphs.q1,
                s.paragraphs.q2,
                s.paragraphs.q3
            );
        };
        for class in &self.classes {
            row(&mut out, class);
        }
        let _ = writeln!(out, "{rule}");
        row(&mut out, &self.total);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats always serialize")
    }
}

/// Train/dev/test ratios and shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    train: f64,
    dev: f64,
    test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self, CorpusError> {
        let in_range = |r: f64| r > 0.0 && r < 1.0;
        if !(in_range(train) && in_range(dev) && in_range(test))
            || (train + dev + test - 1.0).abs() > 1e-9
        {
            return Err(CorpusError::InvalidSplit((train, dev, test)));
        }
        Ok(Self {
            train,
            dev,
            test,
            seed,
        })
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train, self.dev, self.test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1, 12).expect("default ratios are valid")
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// Classes with fewer documents than this are pooled and shuffled together.
const MIN_STRATUM: usize = 3;

/// Deterministic stratified split.
///
/// Overall dev and test sizes are `floor(ratio * N)` and train takes the
/// remainder. Those totals are apportioned over strata (one per class with at
/// least three documents, plus one pooled stratum for the rest) by largest
/// remainder, so per-class proportions follow the ratios as closely as the
/// totals allow.
pub fn split_corpus(corpus: &[Document], spec: &SplitSpec) -> CorpusSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, doc) in corpus.iter().enumerate() {
        by_class
            .entry(doc.label.as_deref().unwrap_or(UNLABELED))
            .or_default()
            .push(i);
    }
    let mut strata: Vec<Vec<usize>> = Vec::new();
    let mut pooled = Vec::new();
    for (_, members) in by_class {
        if members.len() >= MIN_STRATUM {
            strata.push(members);
        } else {
            pooled.extend(members);
        }
    }
    if !pooled.is_empty() {
        pooled.sort_unstable();
        strata.push(pooled);
    }
    for stratum in &mut strata {
        stratum.shuffle(&mut rng);
    }

    let n = corpus.len();
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let dev_quota = apportion((spec.dev * n as f64).floor() as usize, spec.dev, &sizes, &vec![0; sizes.len()]);
    let test_quota = apportion((spec.test * n as f64).floor() as usize, spec.test, &sizes, &dev_quota);

    let mut split = CorpusSplit::default();
    for ((stratum, &n_dev), &n_test) in strata.iter().zip(&dev_quota).zip(&test_quota) {
        for (pos, &idx) in stratum.iter().enumerate() {
            let doc = corpus[idx].clone();
            if pos < n_dev {
                split.dev.push(doc);
            } else if pos < n_dev + n_test {
                split.test.push(doc);
            } else {
                split.train.push(doc);
            }
        }
    }
    split
}

/// Largest-remainder apportionment of `total` over strata of `sizes`,
/// never exceeding the capacity left after `taken`.
fn apportion(total: usize, ratio: f64, sizes: &[usize], taken: &[usize]) -> Vec<usize> {
    let ideal: Vec<f64> = sizes.iter().map(|&s| ratio * s as f64).collect();
    let mut quota: Vec<usize> = ideal
        .iter()
        .zip(sizes.iter().zip(taken))
        .map(|(&x, (&s, &t))| (x.floor() as usize).min(s - t))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(quota.iter().sum());
    // Round-robin in remainder order until the total is met or capacity runs out.
    while missing > 0 {
        let mut progressed = false;
        for &i in &order {
            if missing == 0 {
                break;
            }
            if quota[i] + taken[i] < sizes[i] {
                quota[i] += 1;
                missing -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}
