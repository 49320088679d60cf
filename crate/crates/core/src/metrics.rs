//! Sentence-level smoothed BLEU-4, cosine similarity over externally
//! supplied embeddings, and the AVG/delta robustness table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("method `{method}` has no cell for level `{level}`")]
    MissingCell { method: String, level: String },
    #[error("baseline method `{0}` not present")]
    UnknownBaseline(String),
    #[error("report needs at least one level")]
    NoLevels,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
}

/// Lowercases, splits on whitespace, and emits every character that is
/// not alphanumeric as a token of its own.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.extend(c.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Smoothed sentence BLEU-4 in [0, 100]. Unigram precision is unsmoothed;
/// higher orders use add-one smoothing. Brevity penalty applies when the
/// candidate is shorter than the reference.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize_text(candidate);
    let refr = tokenize_text(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_precision = 0.0;
    for n in 1..=4 {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refr, n);
        let matched: usize = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
        let total = cand.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_precision += p.ln() / 4.0;
    }
    let log_bp = (1.0 - refr.len() as f64 / cand.len() as f64).min(0.0);
    (100.0 * (log_bp + log_precision).exp()).clamp(0.0, 100.0)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub per_example: Vec<(String, f64)>,
    pub corpus_mean: f64,
}

impl BleuReport {
    /// Scores (id, candidate, reference) triples. An empty input has mean 0.
    pub fn score<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let per_example: Vec<(String, f64)> =
            pairs.into_iter().map(|(id, c, r)| (id.to_string(), bleu4(c, r))).collect();
        let corpus_mean = mean(per_example.iter().map(|(_, s)| *s));
        BleuReport { per_example, corpus_mean }
    }
}

/// One line of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub candidate: Vec<f64>,
    pub reference: Vec<f64>,
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetricsError::Json { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Per-id cosine similarity scaled to [-100, 100], matching the BLEU scale.
pub fn similarity_scores(records: &[EmbeddingRecord]) -> Result<BTreeMap<String, f64>, MetricsError> {
    records
        .iter()
        .map(|r| Ok((r.id.clone(), 100.0 * cosine_similarity(&r.candidate, &r.reference)?)))
        .collect()
}

/// Scores of one method on one level. Similarity is absent when no
/// embeddings were supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub bleu: f64,
    pub similarity: Option<f64>,
}

impl Cell {
    pub fn bleu_only(bleu: f64) -> Self {
        Cell { bleu, similarity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    /// Cells keyed by level name.
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub cells: Vec<Cell>,
    pub avg: Cell,
    /// `avg - baseline avg`; `None` on the baseline row.
    pub delta: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub levels: Vec<String>,
    pub baseline: String,
    pub rows: Vec<ReportRow>,
}

/// Builds the AVG/delta table. Rows keep the input method order.
pub fn robustness_report(
    levels: &[String],
    methods: &[MethodScores],
    baseline: &str,
) -> Result<RobustnessReport, MetricsError> {
    if levels.is_empty() {
        return Err(MetricsError::NoLevels);
    }
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let cells = levels
            .iter()
            .map(|l| {
                m.cells
                    .get(l)
                    .copied()
                    .ok_or_else(|| MetricsError::MissingCell { method: m.method.clone(), level: l.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let similarity = cells.iter().map(|c| c.similarity).collect::<Option<Vec<_>>>().map(mean);
        let avg = Cell { bleu: mean(cells.iter().map(|c| c.bleu)), similarity };
        rows.push(ReportRow { method: m.method.clone(), cells, avg, delta: None });
    }
    let base = rows
        .iter()
        .find(|r| r.method == baseline)
        .map(|r| r.avg)
        .ok_or_else(|| MetricsError::UnknownBaseline(baseline.to_string()))?;
    for row in &mut rows {
        if row.method != baseline {
            row.delta = Some(Cell {
                bleu: row.avg.bleu - base.bleu,
                similarity: row.avg.similarity.zip(base.similarity).map(|(a, b)| a - b),
            });
        }
    }
    Ok(RobustnessReport { levels: levels.to_vec(), baseline: baseline.to_string(), rows })
}

fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Two-decimal display value.
pub fn fmt_score(x: f64) -> String {
    format!("{:.2}", round2(x))
}

/// Signed two-decimal display value, e.g. `+3.31`.
pub fn fmt_delta(x: f64) -> String {
    format!("{:+.2}", round2(x))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_score).unwrap_or_else(|| "-".to_string())
}

impl RobustnessReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// AVG display cell of a method, e.g. `23.50 (+3.31)`.
    pub fn avg_display(&self, method: &str) -> Option<(String, String)> {
        let row = self.row(method)?;
        let with_delta = |v: Option<f64>, d: Option<f64>| match (v, d) {
            (Some(v), Some(d)) => format!("{} ({})", fmt_score(v), fmt_delta(d)),
            (v, _) => fmt_opt(v),
        };
        Some((
            with_delta(Some(row.avg.bleu), row.delta.map(|d| d.bleu)),
            with_delta(row.avg.similarity, row.delta.and_then(|d| d.similarity)),
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header = vec!["Method".to_string()];
        for l in self.levels.iter().chain(std::iter::once(&"AVG".to_string())) {
            header.push(format!("{l} BLEU"));
            header.push(format!("{l} SIM"));
        }
        let mut table = vec![header];
        for row in &self.rows {
            let mut line = vec![row.method.clone()];
            for c in &row.cells {
                line.push(fmt_score(c.bleu));
                line.push(fmt_opt(c.similarity));
            }
            let (b, s) = self.avg_display(&row.method).expect("row exists");
            line.push(b);
            line.push(s);
            table.push(line);
        }
        let widths: Vec<usize> =
            (0..table[0].len()).map(|i| table.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in &table {
            let cols: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
        }
        f.write_str(&out)
    }
}
