//! Three-level readability curricula, aligned batch triples and
//! support/query splits.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, CorpusExample, Dataset, SplitTag};
use crate::obfuscate::{dci, fne, irn, DciPlan, RenameMap};
use crate::seed::{derive_seed, rng};
use crate::srcmodel::parse_function;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumKind {
    /// L2 = FNE, L3 = IRN applied on top of FNE.
    SemanticObfuscation,
    /// L2 = light DCI, L3 = heavy DCI.
    SemanticInterference,
}

impl CurriculumKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurriculumKind::SemanticObfuscation => "semantic-obfuscation",
            CurriculumKind::SemanticInterference => "semantic-interference",
        }
    }
}

impl fmt::Display for CurriculumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CurriculumKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semantic-obfuscation" | "obfuscation" => Ok(CurriculumKind::SemanticObfuscation),
            "semantic-interference" | "interference" => Ok(CurriculumKind::SemanticInterference),
            _ => Err(format!("unknown curriculum kind `{s}`")),
        }
    }
}

/// How one example's L2 or L3 code was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "kebab-case")]
pub enum Transform {
    Fne { from: String, to: String },
    FneIrn { from: String, to: String, renames: RenameMap },
    Dci { plan: DciPlan },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: String,
    /// 2 or 3.
    pub level: u8,
    #[serde(flatten)]
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformFailure {
    pub id: String,
    pub reason: String,
}

impl fmt::Display for TransformFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.id, self.reason)
    }
}

/// Build parameters recorded alongside a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleParams {
    pub kind: CurriculumKind,
    pub light: Option<usize>,
    pub heavy: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumBundle {
    pub params: BundleParams,
    /// L1 (origin), L2, L3.
    pub levels: [Dataset; 3],
    pub provenance: Vec<AuditRecord>,
    /// Examples dropped in lenient mode.
    pub failures: Vec<TransformFailure>,
}

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("{} example(s) failed to transform: {}", .0.len(), summarize(.0))]
    TransformFailed(Vec<TransformFailure>),
    #[error("light level ({light}) must be below heavy level ({heavy})")]
    BadLevels { light: usize, heavy: usize },
    #[error("batch size {0} is odd")]
    OddBatchSize(usize),
    #[error("batch size must be at least 2")]
    BatchTooSmall,
    #[error("batch size {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("levels are misaligned at index {index}")]
    Misaligned { index: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {message}")]
    Audit { path: PathBuf, message: String },
}

fn summarize(failures: &[TransformFailure]) -> String {
    let mut parts: Vec<String> = failures.iter().take(3).map(|f| f.to_string()).collect();
    if failures.len() > 3 {
        parts.push("...".into());
    }
    parts.join("; ")
}

impl CurriculumBundle {
    pub fn kind(&self) -> CurriculumKind {
        self.params.kind
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn origin(&self) -> &Dataset {
        &self.levels[0]
    }

    /// Checks that the three levels carry the same ids and docstrings.
    pub fn check_alignment(&self) -> Result<(), CurriculumError> {
        let [a, b, c] = &self.levels;
        if a.len() != b.len() || a.len() != c.len() {
            return Err(CurriculumError::Misaligned { index: a.len().min(b.len()).min(c.len()) });
        }
        for (index, ((x, y), z)) in a.examples.iter().zip(&b.examples).zip(&c.examples).enumerate() {
            if x.id != y.id || x.id != z.id || x.docstring != y.docstring || x.docstring != z.docstring {
                return Err(CurriculumError::Misaligned { index });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    /// Drop examples whose transform fails instead of failing the build.
    pub lenient: bool,
}

/// Seed for obfuscating a split other than train, so that each split gets
/// its own reproducible stream.
pub fn split_seed(seed: u64, tag: SplitTag) -> u64 {
    if tag == SplitTag::Train {
        seed
    } else {
        derive_seed(seed, tag.as_str())
    }
}

type Built = (String, String, Vec<AuditRecord>);

fn assemble(
    train: &Dataset,
    params: BundleParams,
    opts: BuildOptions,
    f: impl Fn(&CorpusExample) -> Result<Built, String> + Sync + Send,
) -> Result<CurriculumBundle, CurriculumError> {
    let results: Vec<Result<Built, String>> = train.examples.par_iter().map(f).collect();
    let mut levels: [Dataset; 3] = Default::default();
    for l in &mut levels {
        l.split_tag = train.split_tag;
    }
    let mut provenance = Vec::new();
    let mut failures = Vec::new();
    for (ex, r) in train.examples.iter().zip(results) {
        match r {
            Ok((l2, l3, audit)) => {
                levels[0].examples.push(ex.clone());
                levels[1].examples.push(CorpusExample { code: l2, ..ex.clone() });
                levels[2].examples.push(CorpusExample { code: l3, ..ex.clone() });
                provenance.extend(audit);
            }
            Err(reason) => failures.push(TransformFailure { id: ex.id.clone(), reason }),
        }
    }
    if !failures.is_empty() {
        if !opts.lenient {
            return Err(CurriculumError::TransformFailed(failures));
        }
        for f in &failures {
            log::warn!("dropping {f}");
        }
    }
    Ok(CurriculumBundle { params, levels, provenance, failures })
}

/// L2 renames the function, L3 additionally renames every local binding.
pub fn build_semantic_obfuscation(train: &Dataset, opts: BuildOptions) -> Result<CurriculumBundle, CurriculumError> {
    let params = BundleParams { kind: CurriculumKind::SemanticObfuscation, light: None, heavy: None, seed: None };
    assemble(train, params, opts, |ex| {
        let (model, _) = parse_function(&ex.code).map_err(|e| e.to_string())?;
        let l2 = fne(&model).map_err(|e| e.to_string())?;
        let (l3, renames) = irn(&l2, l2.scope()).map_err(|e| e.to_string())?;
        let (from, to) = (model.name().to_string(), l2.name().to_string());
        let audit = vec![
            AuditRecord { id: ex.id.clone(), level: 2, transform: Transform::Fne { from: from.clone(), to: to.clone() } },
            AuditRecord { id: ex.id.clone(), level: 3, transform: Transform::FneIrn { from, to, renames } },
        ];
        Ok((l2.source().to_string(), l3.source().to_string(), audit))
    })
}

/// Per-example injection seed for one level.
pub fn example_seed(seed: u64, id: &str, level: u8) -> u64 {
    derive_seed(derive_seed(seed, id), &format!("L{level}"))
}

/// L2 and L3 inject `light` and `heavy` lines of dead code.
pub fn build_semantic_interference(
    train: &Dataset,
    light: usize,
    heavy: usize,
    seed: u64,
    opts: BuildOptions,
) -> Result<CurriculumBundle, CurriculumError> {
    if light >= heavy {
        return Err(CurriculumError::BadLevels { light, heavy });
    }
    let params = BundleParams {
        kind: CurriculumKind::SemanticInterference,
        light: Some(light),
        heavy: Some(heavy),
        seed: Some(seed),
    };
    assemble(train, params, opts, |ex| {
        let (model, _) = parse_function(&ex.code).map_err(|e| e.to_string())?;
        let (l2, p2) = dci(&model, light, example_seed(seed, &ex.id, 2)).map_err(|e| e.to_string())?;
        let (l3, p3) = dci(&model, heavy, example_seed(seed, &ex.id, 3)).map_err(|e| e.to_string())?;
        let audit = vec![
            AuditRecord { id: ex.id.clone(), level: 2, transform: Transform::Dci { plan: p2 } },
            AuditRecord { id: ex.id.clone(), level: 3, transform: Transform::Dci { plan: p3 } },
        ];
        Ok((l2.source().to_string(), l3.source().to_string(), audit))
    })
}

/// Builds either curriculum with default injection levels (5, 10).
pub fn build(kind: CurriculumKind, train: &Dataset, seed: u64, opts: BuildOptions) -> Result<CurriculumBundle, CurriculumError> {
    match kind {
        CurriculumKind::SemanticObfuscation => build_semantic_obfuscation(train, opts),
        CurriculumKind::SemanticInterference => build_semantic_interference(train, 5, 10, seed, opts),
    }
}

/// Even-size halves of a shuffled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportQuerySplit<T> {
    pub support: Vec<T>,
    pub query: Vec<T>,
}

fn check_even(n: usize) -> Result<(), CurriculumError> {
    if n % 2 == 1 {
        return Err(CurriculumError::OddBatchSize(n));
    }
    Ok(())
}

/// Seeded index order that splits a batch of `n` into support (first
/// half) and query (second half).
pub fn support_query_order(n: usize, seed: u64) -> Result<Vec<usize>, CurriculumError> {
    check_even(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(seed, "support-query")));
    Ok(order)
}

pub fn support_query_split<T: Clone>(batch: &[T], seed: u64) -> Result<SupportQuerySplit<T>, CurriculumError> {
    let order = support_query_order(batch.len(), seed)?;
    let half = batch.len() / 2;
    Ok(SupportQuerySplit {
        support: order[..half].iter().map(|&i| batch[i].clone()).collect(),
        query: order[half..].iter().map(|&i| batch[i].clone()).collect(),
    })
}

/// Aligned batches of the three levels for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriple {
    pub step: usize,
    pub origin: Vec<CorpusExample>,
    pub l2: Vec<CorpusExample>,
    pub l3: Vec<CorpusExample>,
}

impl BatchTriple {
    pub fn levels(&self) -> [&[CorpusExample]; 3] {
        [&self.origin, &self.l2, &self.l3]
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Support/query splits of the three batches using one shared order,
    /// so the halves stay aligned by id.
    pub fn split(&self, seed: u64) -> Result<[SupportQuerySplit<CorpusExample>; 3], CurriculumError> {
        let order = support_query_order(self.len(), seed)?;
        let half = self.len() / 2;
        let cut = |b: &[CorpusExample]| SupportQuerySplit {
            support: order[..half].iter().map(|&i| b[i].clone()).collect(),
            query: order[half..].iter().map(|&i| b[i].clone()).collect(),
        };
        Ok([cut(&self.origin), cut(&self.l2), cut(&self.l3)])
    }
}

/// Index batches for one epoch over `n` aligned examples: one seeded
/// shuffle, cut into full batches; the trailing partial batch is dropped.
pub fn batch_order(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>, CurriculumError> {
    check_even(batch_size)?;
    if batch_size == 0 {
        return Err(CurriculumError::BatchTooSmall);
    }
    if batch_size > n {
        return Err(CurriculumError::BatchTooLarge { batch: batch_size, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(epoch_seed, "batches")));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of batch triples. A single shuffled order drives all three
/// levels, so the batches of a triple carry the same ids.
pub fn batch_triples(bundle: &CurriculumBundle, batch_size: usize, epoch_seed: u64) -> Result<Vec<BatchTriple>, CurriculumError> {
    let batches = batch_order(bundle.len(), batch_size, epoch_seed)?;
    bundle.check_alignment()?;
    let pick = |level: usize, idx: &[usize]| idx.iter().map(|&i| bundle.levels[level].examples[i].clone()).collect();
    Ok(batches
        .iter()
        .enumerate()
        .map(|(step, idx)| BatchTriple { step, origin: pick(0, idx), l2: pick(1, idx), l3: pick(2, idx) })
        .collect())
}

/// `<prefix>.L1.jsonl`, `<prefix>.L2.jsonl`, `<prefix>.L3.jsonl`.
pub fn level_paths(prefix: &Path) -> [PathBuf; 3] {
    [1, 2, 3].map(|k| suffixed(prefix, &format!("L{k}.jsonl")))
}

pub fn audit_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, "audit.jsonl")
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum AuditLine {
    Header { params: BundleParams, failures: Vec<TransformFailure> },
    Transform(AuditRecord),
}

/// Writes the three level files and the audit file. The audit starts
/// with one header line holding the build parameters.
pub fn write_bundle(bundle: &CurriculumBundle, prefix: &Path) -> Result<(), CurriculumError> {
    for (level, path) in bundle.levels.iter().zip(level_paths(prefix)) {
        corpus::write_jsonl(level, path)?;
    }
    let path = audit_path(prefix);
    let io = |e: std::io::Error| CurriculumError::Audit { path: path.clone(), message: e.to_string() };
    let mut w = BufWriter::new(fs::File::create(&path).map_err(io)?);
    let header = AuditLine::Header { params: bundle.params, failures: bundle.failures.clone() };
    let lines = std::iter::once(header).chain(bundle.provenance.iter().cloned().map(AuditLine::Transform));
    for line in lines {
        let text = serde_json::to_string(&line).expect("audit serializes");
        writeln!(w, "{text}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_bundle(prefix: &Path) -> Result<CurriculumBundle, CurriculumError> {
    let [a, b, c] = level_paths(prefix);
    let levels = [corpus::load_jsonl(a)?, corpus::load_jsonl(b)?, corpus::load_jsonl(c)?];
    let path = audit_path(prefix);
    let bad = |message: String| CurriculumError::Audit { path: path.clone(), message };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let mut params = None;
    let mut failures = Vec::new();
    let mut provenance = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))? {
            AuditLine::Header { params: p, failures: f } => {
                params = Some(p);
                failures = f;
            }
            AuditLine::Transform(r) => provenance.push(r),
        }
    }
    let params = params.ok_or_else(|| bad("missing header line".into()))?;
    let bundle = CurriculumBundle { params, levels, provenance, failures };
    bundle.check_alignment()?;
    Ok(bundle)
}
