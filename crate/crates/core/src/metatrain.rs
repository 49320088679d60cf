//! The meta-curriculum training step, the baseline schedules, traces,
//! checkpoints and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusExample, Dataset};
use crate::curriculum::{batch_order, support_query_order, CurriculumBundle, CurriculumError};
use crate::metrics::BleuReport;
use crate::minimodel::{self, greedy_decode, save_checkpoint, Dims, Encoded, ModelError, ParamVector, Vocab, MAX_TARGET};
use crate::seed::{derive_seed, rng, sha256_hex};

pub const LEVEL_NAMES: [&str; 3] = ["L1", "L2", "L3"];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {value} at step {step} ({phase})")]
    NonFiniteLoss { step: usize, phase: String, value: f64 },
    #[error("invalid trainer configuration: {0}")]
    BadConfig(String),
    #[error("levels have different sizes: {0:?}")]
    Misaligned([usize; 3]),
    #[error("no epochs recorded")]
    NoEpochs,
    #[error("epoch {epoch} lacks a validation score for level {level}")]
    MissingValidation { epoch: usize, level: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// No training; the initial parameters are evaluated.
    ZeroShot,
    /// SGD over L1 only.
    FtOrigin,
    /// SGD over the shuffled union of all three levels.
    FtAll,
    /// Epochs split sequentially over L1, L2, L3.
    Cl,
    /// One step on each of L1, L2, L3 per batch, alternating.
    Clawsat,
    /// Meta-curriculum step per batch triple.
    Roft,
}

impl Schedule {
    pub const ALL: [Schedule; 6] =
        [Schedule::ZeroShot, Schedule::FtOrigin, Schedule::FtAll, Schedule::Cl, Schedule::Clawsat, Schedule::Roft];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::ZeroShot => "zero-shot",
            Schedule::FtOrigin => "ft-origin",
            Schedule::FtAll => "ft-all",
            Schedule::Cl => "cl",
            Schedule::Clawsat => "clawsat",
            Schedule::Roft => "roft",
        }
    }

    /// Display label for reports.
    pub fn label(self) -> &'static str {
        match self {
            Schedule::ZeroShot => "Zero-Shot",
            Schedule::FtOrigin => "FT_Origin",
            Schedule::FtAll => "FT_All",
            Schedule::Cl => "CL",
            Schedule::Clawsat => "CLAWSAT-style",
            Schedule::Roft => "RoFT",
        }
    }

    pub fn is_meta(self) -> bool {
        self == Schedule::Roft
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Schedule::ALL
            .into_iter()
            .find(|x| x.as_str() == norm || x.label().to_ascii_lowercase().replace('_', "-") == norm)
            .ok_or_else(|| format!("unknown schedule `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetaOrder {
    #[default]
    FirstOrder,
    /// Differentiates through the inner step with Hessian-vector products.
    Exact,
}

impl std::str::FromStr for MetaOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first-order" => Ok(MetaOrder::FirstOrder),
            "exact" => Ok(MetaOrder::Exact),
            _ => Err(format!("unknown meta order `{s}`")),
        }
    }
}

impl fmt::Display for MetaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaOrder::FirstOrder => "first-order",
            MetaOrder::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Applied on outer (global) updates.
    pub weight_decay: f64,
    /// Also apply weight decay on the inner adaptation step.
    pub inner_weight_decay: bool,
    /// Linear warmup length; `None` uses 0 for the meta schedule and 1000
    /// otherwise.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub meta_order: MetaOrder,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Record a parameter hash in every step record.
    pub trace_param_hashes: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            alpha: 5e-5,
            beta: 5e-5,
            gamma: 5e-5,
            batch_size: 64,
            epochs: 3,
            weight_decay: 0.05,
            inner_weight_decay: false,
            warmup_steps: None,
            seed: 0,
            meta_order: MetaOrder::FirstOrder,
            patience: None,
            trace_param_hashes: false,
        }
    }
}

impl TrainerConfig {
    pub fn warmup_for(&self, schedule: Schedule) -> usize {
        self.warmup_steps.unwrap_or(if schedule.is_meta() { 0 } else { 1000 })
    }

    /// Learning-rate factor at a 0-based optimizer step.
    pub fn warmup_factor(&self, schedule: Schedule, step: usize) -> f64 {
        match self.warmup_for(schedule) {
            0 => 1.0,
            w => ((step + 1) as f64 / w as f64).min(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::BadConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 == 1 {
            return Err(TrainError::BadConfig(format!("batch_size must be even and at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// A differentiable training objective over flat parameters.
pub trait Objective {
    type Batch: ?Sized;

    fn loss_grad(&self, theta: &[f64], batch: &Self::Batch) -> Result<(f64, Vec<f64>), TrainError>;

    /// Hessian-vector product of the batch loss at `theta`.
    fn hvp(&self, theta: &[f64], batch: &Self::Batch, v: &[f64]) -> Result<Vec<f64>, TrainError>;
}

/// The summarizer's batch loss.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective {
    pub dims: Dims,
}

impl ModelObjective {
    fn wrap(&self, theta: &[f64]) -> Result<ParamVector, TrainError> {
        Ok(ParamVector::from_vec(self.dims, theta.to_vec())?)
    }
}

impl Objective for ModelObjective {
    type Batch = [Encoded];

    fn loss_grad(&self, theta: &[f64], batch: &[Encoded]) -> Result<(f64, Vec<f64>), TrainError> {
        let (l, g) = minimodel::loss_and_grad(&self.wrap(theta)?, batch)?;
        Ok((l, g.data))
    }

    fn hvp(&self, theta: &[f64], batch: &[Encoded], v: &[f64]) -> Result<Vec<f64>, TrainError> {
        Ok(minimodel::hvp(&self.wrap(theta)?, batch, v)?.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Batches of one meta step: the origin batch and the support/query
/// halves of the L2 and L3 batches, in that order.
#[derive(Debug)]
pub struct MetaBatch<'a, B: ?Sized> {
    pub origin: &'a B,
    pub support: [&'a B; 2],
    pub query: [&'a B; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepRecord {
    pub origin_loss: f64,
    pub support_loss: [f64; 2],
    pub query_loss: [f64; 2],
    /// Hash of the global parameters after the origin update and again
    /// after the inner loop; equal by construction.
    pub hash_after_origin: String,
    pub hash_after_inner: String,
}

fn hash(theta: &[f64]) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|x| x.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// `theta - lr * (g + wd * theta)`.
pub fn sgd(theta: &[f64], g: &[f64], lr: f64, wd: f64) -> Vec<f64> {
    theta.iter().zip(g).map(|(&t, &g)| t - lr * (g + wd * t)).collect()
}

fn finite(step: usize, phase: &str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { step, phase: phase.to_string(), value })
    }
}

/// One meta-curriculum step:
/// 1. `θ ← θ − α ∇L(θ | origin)`;
/// 2. for L2 then L3, adapt a copy `θˡ ← θ − β ∇L(θ | support)` and take
///    the query gradient at `θˡ` (through the inner step in exact mode);
/// 3. `θ ← θ − γ Σ query gradients`.
///
/// Weight decay applies to steps 1 and 3, and to step 2 only when
/// `inner_weight_decay` is set.
pub fn meta_step<O: Objective>(
    obj: &O,
    theta: &[f64],
    batch: &MetaBatch<'_, O::Batch>,
    rates: Rates,
    cfg: &TrainerConfig,
    step: usize,
) -> Result<(Vec<f64>, MetaStepRecord), TrainError> {
    let wd = cfg.weight_decay;
    let inner_wd = if cfg.inner_weight_decay { wd } else { 0.0 };
    let (l0, g0) = obj.loss_grad(theta, batch.origin)?;
    let origin_loss = finite(step, "L1", l0)?;
    let global = sgd(theta, &g0, rates.alpha, wd);
    let hash_after_origin = hash(&global);

    let mut meta_grad = vec![0.0; global.len()];
    let mut support_loss = [0.0; 2];
    let mut query_loss = [0.0; 2];
    for k in 0..2 {
        let phase = LEVEL_NAMES[k + 1];
        let (ls, gs) = obj.loss_grad(&global, batch.support[k])?;
        support_loss[k] = finite(step, phase, ls)?;
        let local = sgd(&global, &gs, rates.beta, inner_wd);
        let (lq, mut gq) = obj.loss_grad(&local, batch.query[k])?;
        query_loss[k] = finite(step, phase, lq)?;
        if cfg.meta_order == MetaOrder::Exact {
            // d θˡ / d θ = (1 − β·wd_inner) I − β H_support(θ)
            let hv = obj.hvp(&global, batch.support[k], &gq)?;
            for (g, h) in gq.iter_mut().zip(hv) {
                *g = (1.0 - rates.beta * inner_wd) * *g - rates.beta * h;
            }
        }
        for (m, g) in meta_grad.iter_mut().zip(&gq) {
            *m += g;
        }
    }
    let hash_after_inner = hash(&global);
    let out = sgd(&global, &meta_grad, rates.gamma, wd);
    Ok((out, MetaStepRecord { origin_loss, support_loss, query_loss, hash_after_origin, hash_after_inner }))
}

/// Aligned encoded levels of a curriculum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedBundle {
    pub ids: Vec<String>,
    pub levels: [Vec<Encoded>; 3],
}

impl EncodedBundle {
    pub fn new(bundle: &CurriculumBundle, vocab: &Vocab) -> Self {
        let enc = |d: &Dataset| d.examples.iter().map(|e| Encoded::new(vocab, &e.code, &e.docstring)).collect();
        EncodedBundle {
            ids: bundle.levels[0].ids().map(String::from).collect(),
            levels: [enc(&bundle.levels[0]), enc(&bundle.levels[1]), enc(&bundle.levels[2])],
        }
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    fn check_aligned(&self) -> Result<(), TrainError> {
        let sizes = self.levels.each_ref().map(Vec::len);
        if sizes[1] != sizes[0] || sizes[2] != sizes[0] {
            return Err(TrainError::Misaligned(sizes));
        }
        Ok(())
    }
}

/// Vocabulary over the code and docstrings of every level of a
/// training bundle.
pub fn build_vocab(bundle: &CurriculumBundle, min_count: usize, max_size: Option<usize>) -> Vocab {
    let texts = bundle.levels.iter().flat_map(|l| l.examples.iter().flat_map(|e| [e.code.as_str(), e.docstring.as_str()]));
    Vocab::build(texts, min_count, max_size)
}

/// Held-out levels scored by greedy-decode BLEU.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub ids: Vec<String>,
    /// Per level: encoded source and reference docstring.
    pub levels: [Vec<(Vec<u32>, String)>; 3],
}

impl EvalSet {
    pub fn new(bundle: &CurriculumBundle, vocab: &Vocab) -> Self {
        let enc = |d: &Dataset| {
            d.examples.iter().map(|e| (Encoded::new(vocab, &e.code, &e.docstring).source, e.docstring.clone())).collect()
        };
        EvalSet {
            ids: bundle.levels[0].ids().map(String::from).collect(),
            levels: [enc(&bundle.levels[0]), enc(&bundle.levels[1]), enc(&bundle.levels[2])],
        }
    }

    pub fn predict(&self, params: &ParamVector, vocab: &Vocab, level: usize) -> Vec<String> {
        self.levels[level].iter().map(|(src, _)| vocab.decode(&greedy_decode(params, src, MAX_TARGET))).collect()
    }

    pub fn evaluate(&self, params: &ParamVector, vocab: &Vocab) -> [BleuReport; 3] {
        [0, 1, 2].map(|l| {
            let preds = self.predict(params, vocab, l);
            BleuReport::score(
                self.ids.iter().zip(&preds).zip(&self.levels[l]).map(|((id, p), (_, r))| (id.as_str(), p.as_str(), r.as_str())),
            )
        })
    }

    pub fn mean_bleu(&self, params: &ParamVector, vocab: &Vocab) -> [f64; 3] {
        self.evaluate(params, vocab).map(|r| r.corpus_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// `L1`, `L2`, `L3`, `all` or `meta`.
    pub phase: String,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean recorded training loss per level.
    pub train_loss: BTreeMap<String, f64>,
    /// Mean greedy-decode BLEU per level on the validation set.
    pub validation: Option<[f64; 3]>,
    pub checkpoint: Option<String>,
    pub param_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub schedule: Schedule,
    pub config: TrainerConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingTrace {
    /// Writes `trace.jsonl` (one step per line) and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path, e: std::io::Error| TrainError::Io { path: path.to_path_buf(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join("trace.jsonl");
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io(&path, e))?);
        for s in &self.steps {
            writeln!(w, "{}", serde_json::to_string(s).expect("step serializes")).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| io(&path, e))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            schedule: Schedule,
            config: &'a TrainerConfig,
            total_steps: usize,
            epochs: &'a [EpochRecord],
            selected_epoch: Option<usize>,
            stopped_early: bool,
        }
        let summary = Summary {
            schedule: self.schedule,
            config: &self.config,
            total_steps: self.steps.len(),
            epochs: &self.epochs,
            selected_epoch: self.selected_epoch,
            stopped_early: self.stopped_early,
        };
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").map_err(|e| io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub initial: ParamVector,
    /// Parameters after each epoch.
    pub checkpoints: Vec<ParamVector>,
    pub trace: TrainingTrace,
}

impl TrainOutput {
    /// Selected checkpoint, else the last one, else the initial parameters.
    pub fn best(&self) -> &ParamVector {
        match self.trace.selected_epoch {
            Some(e) => &self.checkpoints[e - 1],
            None => self.checkpoints.last().unwrap_or(&self.initial),
        }
    }
}

/// Optional validation and checkpoint output for [`train`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<(&'a EvalSet, &'a Vocab)>,
    pub checkpoint_dir: Option<&'a Path>,
    pub vocab_hash: &'a str,
}

/// Index of the epoch (1-based) with the highest mean validation score
/// over the three levels; ties go to the earliest epoch.
pub fn select_checkpoint(per_epoch: &[[Option<f64>; 3]]) -> Result<usize, TrainError> {
    if per_epoch.is_empty() {
        return Err(TrainError::NoEpochs);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, levels) in per_epoch.iter().enumerate() {
        let mut sum = 0.0;
        for (level, v) in levels.iter().enumerate() {
            sum += v.ok_or(TrainError::MissingValidation { epoch: i + 1, level: level + 1 })?;
        }
        let mean = sum / 3.0;
        if mean > best.1 {
            best = (i + 1, mean);
        }
    }
    Ok(best.0)
}

struct Run<'a> {
    schedule: Schedule,
    cfg: &'a TrainerConfig,
    obj: ModelObjective,
    theta: Vec<f64>,
    step: usize,
    steps: Vec<StepRecord>,
}

impl Run<'_> {
    fn record(&mut self, epoch: usize, phase: &str, losses: BTreeMap<String, f64>, lr: f64) {
        let param_hash = self.cfg.trace_param_hashes.then(|| hash(&self.theta));
        self.steps.push(StepRecord { step: self.step, epoch, phase: phase.to_string(), losses, lr, param_hash });
        self.step += 1;
    }

    fn sgd_step(&mut self, epoch: usize, phase: &str, batch: &[Encoded]) -> Result<(), TrainError> {
        let lr = self.cfg.alpha * self.cfg.warmup_factor(self.schedule, self.step);
        let (l, g) = self.obj.loss_grad(&self.theta, batch)?;
        finite(self.step, phase, l)?;
        self.theta = sgd(&self.theta, &g, lr, self.cfg.weight_decay);
        let key = if phase == "all" { "all" } else { phase };
        self.record(epoch, phase, BTreeMap::from([(key.to_string(), l)]), lr);
        Ok(())
    }
}

fn gather(level: &[Encoded], idx: &[usize]) -> Vec<Encoded> {
    idx.iter().map(|&i| level[i].clone()).collect()
}

/// Runs a schedule for `cfg.epochs` epochs from `init`.
pub fn train(
    schedule: Schedule,
    data: &EncodedBundle,
    init: ParamVector,
    cfg: &TrainerConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if !matches!(schedule, Schedule::ZeroShot | Schedule::FtOrigin) {
        data.check_aligned()?;
    }
    let mut run = Run {
        schedule,
        cfg,
        obj: ModelObjective { dims: init.dims },
        theta: init.data.clone(),
        step: 0,
        steps: Vec::new(),
    };
    let n = data.len();
    let mut checkpoints = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut stopped_early = false;
    let mut best_mean = f64::NEG_INFINITY;
    let mut since_best = 0;
    let n_epochs = if schedule == Schedule::ZeroShot { 0 } else { cfg.epochs };

    for epoch in 1..=n_epochs {
        let first_step = run.steps.len();
        let epoch_seed = derive_seed(cfg.seed, &format!("epoch{epoch}"));
        match schedule {
            Schedule::ZeroShot => {}
            Schedule::FtOrigin => {
                for idx in batch_order(n, cfg.batch_size, epoch_seed)? {
                    run.sgd_step(epoch, "L1", &gather(&data.levels[0], &idx))?;
                }
            }
            Schedule::Cl => {
                let level = ((epoch - 1) * 3 / n_epochs).min(2);
                for idx in batch_order(n, cfg.batch_size, epoch_seed)? {
                    run.sgd_step(epoch, LEVEL_NAMES[level], &gather(&data.levels[level], &idx))?;
                }
            }
            Schedule::Clawsat => {
                for idx in batch_order(n, cfg.batch_size, epoch_seed)? {
                    for level in 0..3 {
                        run.sgd_step(epoch, LEVEL_NAMES[level], &gather(&data.levels[level], &idx))?;
                    }
                }
            }
            Schedule::FtAll => {
                for idx in batch_order(3 * n, cfg.batch_size, epoch_seed)? {
                    let batch: Vec<Encoded> = idx.iter().map(|&i| data.levels[i / n.max(1)][i % n.max(1)].clone()).collect();
                    run.sgd_step(epoch, "all", &batch)?;
                }
            }
            Schedule::Roft => {
                for (k, idx) in batch_order(n, cfg.batch_size, epoch_seed)?.into_iter().enumerate() {
                    let order = support_query_order(idx.len(), derive_seed(epoch_seed, &format!("support-query{k}")))?;
                    let half = idx.len() / 2;
                    let (s_idx, q_idx): (Vec<usize>, Vec<usize>) =
                        (order[..half].iter().map(|&o| idx[o]).collect(), order[half..].iter().map(|&o| idx[o]).collect());
                    let origin = gather(&data.levels[0], &idx);
                    let support = [gather(&data.levels[1], &s_idx), gather(&data.levels[2], &s_idx)];
                    let query = [gather(&data.levels[1], &q_idx), gather(&data.levels[2], &q_idx)];
                    let f = cfg.warmup_factor(schedule, run.step);
                    let rates = Rates { alpha: cfg.alpha * f, beta: cfg.beta * f, gamma: cfg.gamma * f };
                    let mb = MetaBatch {
                        origin: origin.as_slice(),
                        support: [support[0].as_slice(), support[1].as_slice()],
                        query: [query[0].as_slice(), query[1].as_slice()],
                    };
                    let (theta, rec) = meta_step(&run.obj, &run.theta, &mb, rates, cfg, run.step)?;
                    debug_assert_eq!(rec.hash_after_origin, rec.hash_after_inner);
                    run.theta = theta;
                    let losses = BTreeMap::from([
                        ("L1".to_string(), rec.origin_loss),
                        ("L2".to_string(), rec.query_loss[0]),
                        ("L3".to_string(), rec.query_loss[1]),
                    ]);
                    run.record(epoch, "meta", losses, rates.alpha);
                }
            }
        }

        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &run.steps[first_step..] {
            for (k, v) in &s.losses {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let params = ParamVector { dims: init.dims, data: run.theta.clone() };
        let validation = opts.validation.map(|(set, vocab)| set.mean_bleu(&params, vocab));
        let checkpoint = match opts.checkpoint_dir {
            Some(dir) => {
                let name = format!("ckpt_epoch{epoch}.bin");
                save_checkpoint(dir.join(&name), &params, opts.vocab_hash, cfg.seed)?;
                Some(name)
            }
            None => None,
        };
        log::info!("{schedule} epoch {epoch}: {} steps, validation {validation:?}", run.steps.len() - first_step);
        epochs.push(EpochRecord {
            epoch,
            steps: run.steps.len() - first_step,
            train_loss: sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
            validation,
            checkpoint,
            param_hash: params.hash(),
        });
        checkpoints.push(params);

        if let (Some(patience), Some(v)) = (cfg.patience, validation) {
            let mean = v.iter().sum::<f64>() / 3.0;
            if mean > best_mean {
                best_mean = mean;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience && epoch < n_epochs {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let selected_epoch = if opts.validation.is_some() && !epochs.is_empty() {
        let per_epoch: Vec<[Option<f64>; 3]> = epochs.iter().map(|e| e.validation.map_or([None; 3], |v| v.map(Some))).collect();
        Some(select_checkpoint(&per_epoch)?)
    } else {
        None
    };
    let trace = TrainingTrace { schedule, config: cfg.clone(), steps: run.steps, epochs, selected_epoch, stopped_early };
    Ok(TrainOutput { initial: init, checkpoints, trace })
}

const NOUNS: [(&str, &str); 12] = [
    ("users", "user"),
    ("files", "file"),
    ("scores", "score"),
    ("names", "name"),
    ("items", "item"),
    ("prices", "price"),
    ("records", "record"),
    ("tokens", "token"),
    ("paths", "path"),
    ("events", "event"),
    ("lines", "line"),
    ("nodes", "node"),
];

struct Template {
    verb: &'static str,
    body: &'static str,
    doc: &'static str,
}

const TEMPLATES: [Template; 10] = [
    Template { verb: "sum", body: "    total = 0\n    for {x} in {p}:\n        total += {x}\n    return total\n", doc: "return the sum of the {n}" },
    Template { verb: "count", body: "    count = 0\n    for {x} in {p}:\n        if {x}:\n            count += 1\n    return count\n", doc: "count the non-empty {n}" },
    Template { verb: "largest", body: "    return max({p})\n", doc: "return the largest of the {n}" },
    Template { verb: "valid", body: "    return [{x} for {x} in {p} if {x} is not None]\n", doc: "remove missing {n} from the list" },
    Template { verb: "reverse", body: "    return list(reversed({p}))\n", doc: "reverse the order of the {n}" },
    Template { verb: "first", body: "    for {x} in {p}:\n        return {x}\n    return None\n", doc: "return the first of the {n}" },
    Template { verb: "sort", body: "    return sorted({p})\n", doc: "sort the {n} in ascending order" },
    Template { verb: "join", body: "    return ', '.join(str({x}) for {x} in {p})\n", doc: "join the {n} into a string" },
    Template { verb: "size", body: "    return len({p})\n", doc: "return the number of {n}" },
    Template {
        verb: "unique",
        body: "    seen = set()\n    out = []\n    for {x} in {p}:\n        if {x} not in seen:\n            seen.add({x})\n            out.append({x})\n    return out\n",
        doc: "remove duplicate {n}",
    },
];

/// Templated corpus whose docstrings are a deterministic function of the
/// code: the operation fixes the verb phrase, the identifiers fix the
/// noun, and an optional empty-input guard adds a suffix.
pub fn synthetic_corpus(n: usize, seed: u64) -> Dataset {
    let mut r = rng(derive_seed(seed, "synthetic"));
    let examples = (0..n)
        .map(|i| {
            let t = TEMPLATES.choose(&mut r).expect("templates");
            let &(plural, singular) = NOUNS.choose(&mut r).expect("nouns");
            let guard = rand::Rng::random_bool(&mut r, 0.5);
            let fill = |s: &str| s.replace("{p}", plural).replace("{x}", singular).replace("{n}", plural);
            let mut code = format!("def {}_{}({}):\n", t.verb, plural, plural);
            if guard {
                code.push_str(&fill("    if not {p}:\n        return None\n"));
            }
            code.push_str(&fill(t.body));
            let mut doc = fill(t.doc);
            if guard {
                doc.push_str(" or none when empty");
            }
            CorpusExample::new(format!("syn-{i:05}"), code, format!("{doc}."))
        })
        .collect();
    Dataset::new(examples)
}

/// Shuffles the examples of a dataset (used to vary synthetic draws).
pub fn shuffled(dataset: &Dataset, seed: u64) -> Dataset {
    let mut examples = dataset.examples.clone();
    examples.shuffle(&mut rng(derive_seed(seed, "shuffle")));
    Dataset { examples, split_tag: dataset.split_tag }
}
