//! Line-delimited JSON datasets of (id, code, docstring) records:
//! loading with validation, deterministic splitting, and writing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::metrics::tokenize_text;
use crate::seed::{derive_seed, rng};
use crate::srcmodel::{parse_function, ParseError};

/// Tolerance on the sum of split ratios.
pub const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_language() -> String {
    "python".to_string()
}

/// One code/summary pair. Fields other than the four known ones are kept
/// in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: String,
    pub code: String,
    pub docstring: String,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CorpusExample {
    pub fn new(id: impl Into<String>, code: impl Into<String>, docstring: impl Into<String>) -> Self {
        CorpusExample {
            id: id.into(),
            code: code.into(),
            docstring: docstring.into(),
            language: default_language(),
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<CorpusExample>,
    pub split_tag: Option<SplitTag>,
}

impl Dataset {
    pub fn new(examples: Vec<CorpusExample>) -> Self {
        Dataset { examples, split_tag: None }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Checks every example invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for (i, ex) in self.examples.iter().enumerate() {
            let line = i + 1;
            check_example(ex, line)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId { line, id: ex.id.clone() });
            }
            let (model, _) = parse_function(&ex.code).map_err(|error| CorpusError::Parse { line, error })?;
            if model.docstring().is_some() {
                return Err(CorpusError::DocstringLeak { line, id: ex.id.clone() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` is empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: code does not parse: {error}")]
    Parse { line: usize, error: ParseError },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: code of `{id}` still contains a docstring")]
    DocstringLeak { line: usize, id: String },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

impl CorpusError {
    /// Short reason label used in load reports.
    pub fn kind(&self) -> &'static str {
        match self {
            CorpusError::Io { .. } => "io",
            CorpusError::Json { .. } => "json",
            CorpusError::MissingField { .. } => "missing-field",
            CorpusError::EmptyField { .. } => "empty-field",
            CorpusError::Parse { .. } => "parse",
            CorpusError::DuplicateId { .. } => "duplicate-id",
            CorpusError::DocstringLeak { .. } => "docstring-leak",
            CorpusError::BadRatios(_) => "bad-ratios",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Drop invalid records instead of failing.
    pub lenient: bool,
    /// Drop records whose code has more text tokens than this.
    pub max_code_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    /// Dropped record counts keyed by reason.
    pub dropped: BTreeMap<String, usize>,
    /// (line, message) for every dropped record.
    pub dropped_lines: Vec<(usize, String)>,
    /// Records whose code carried a docstring that was stripped.
    pub stripped_docstrings: usize,
    /// Records skipped by the length filter.
    pub filtered_long: usize,
}

impl LoadReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

/// Strict load: any invalid record fails the whole load.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    load_jsonl_with(path, LoadOptions::default()).map(|(d, _)| d)
}

pub fn load_jsonl_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<(Dataset, LoadReport), CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&text, opts)
}

/// Parses JSONL text; line numbers are 1-based and count blank lines.
pub fn parse_jsonl(text: &str, opts: LoadOptions) -> Result<(Dataset, LoadReport), CorpusError> {
    let mut report = LoadReport::default();
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let outcome = parse_record(raw, line, &mut report).and_then(|ex| {
            if seen.contains(&ex.id) {
                Err(CorpusError::DuplicateId { line, id: ex.id })
            } else {
                Ok(ex)
            }
        });
        match outcome {
            Ok(ex) => {
                if let Some(max) = opts.max_code_tokens {
                    if tokenize_text(&ex.code).len() > max {
                        report.filtered_long += 1;
                        continue;
                    }
                }
                seen.insert(ex.id.clone());
                examples.push(ex);
            }
            Err(e) if opts.lenient => {
                log::warn!("dropping record: {e}");
                *report.dropped.entry(e.kind().to_string()).or_default() += 1;
                report.dropped_lines.push((line, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    report.loaded = examples.len();
    Ok((Dataset::new(examples), report))
}

fn parse_record(raw: &str, line: usize, report: &mut LoadReport) -> Result<CorpusExample, CorpusError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::Json { line, message: e.to_string() })?;
    let Value::Object(obj) = value else {
        return Err(CorpusError::Json { line, message: "record is not an object".into() });
    };
    for field in ["id", "code", "docstring"] {
        if !matches!(obj.get(field), Some(Value::String(_))) {
            return Err(CorpusError::MissingField { line, field });
        }
    }
    if let Some(lang) = obj.get("language") {
        if !lang.is_string() {
            return Err(CorpusError::Json { line, message: "field `language` is not a string".into() });
        }
    }
    let mut ex: CorpusExample =
        serde_json::from_value(Value::Object(obj)).map_err(|e| CorpusError::Json { line, message: e.to_string() })?;
    check_example(&ex, line)?;
    let (model, _) = parse_function(&ex.code).map_err(|error| CorpusError::Parse { line, error })?;
    if let Some(stripped) = model.without_docstring() {
        log::warn!("line {line}: stripping docstring from code of `{}`", ex.id);
        parse_function(&stripped).map_err(|error| CorpusError::Parse { line, error })?;
        ex.code = stripped;
        report.stripped_docstrings += 1;
    }
    Ok(ex)
}

fn check_example(ex: &CorpusExample, line: usize) -> Result<(), CorpusError> {
    if ex.id.is_empty() {
        return Err(CorpusError::EmptyField { line, field: "id" });
    }
    if ex.docstring.trim().is_empty() {
        return Err(CorpusError::EmptyField { line, field: "docstring" });
    }
    Ok(())
}

pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for ex in &dataset.examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(to_jsonl(dataset).as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

/// Split sizes for `n` examples: (train, valid, test), with valid and
/// test floor-allocated and the remainder going to train.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize), CorpusError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) || (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(CorpusError::BadRatios(ratios));
    }
    let floor = |r: f64| ((n as f64) * r + RATIO_TOLERANCE).floor() as usize;
    let valid = floor(ratios[1]).min(n);
    let test = floor(ratios[2]).min(n - valid);
    Ok((n - valid - test, valid, test))
}

/// Deterministic (train, valid, test) partition. Examples keep their
/// original relative order inside each split.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
    let n = dataset.len();
    let (_, n_valid, n_test) = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(seed, "split")));
    let mut tags = vec![SplitTag::Train; n];
    for &i in &order[..n_valid] {
        tags[i] = SplitTag::Valid;
    }
    for &i in &order[n_valid..n_valid + n_test] {
        tags[i] = SplitTag::Test;
    }
    let pick = |tag: SplitTag| Dataset {
        examples: dataset
            .examples
            .iter()
            .zip(&tags)
            .filter(|(_, t)| **t == tag)
            .map(|(e, _)| e.clone())
            .collect(),
        split_tag: Some(tag),
    };
    Ok((pick(SplitTag::Train), pick(SplitTag::Valid), pick(SplitTag::Test)))
}
