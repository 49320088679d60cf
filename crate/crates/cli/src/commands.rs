use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use curricode_core::corpus::{self, CorpusExample, Dataset};
use curricode_core::curriculum::{self, BuildOptions, CurriculumBundle};
use curricode_core::llmeval::{self, ChatClient, ClientConfig, StudyOptions};
use curricode_core::metatrain::{build_vocab, train, EncodedBundle, EvalSet, TrainOptions, TrainerConfig};
use curricode_core::metrics::{self, Cell, MethodScores};
use curricode_core::minimodel::{init_params, load_checkpoint, save_checkpoint, Vocab};
use curricode_core::obfuscate::{dci, fne, irn};
use curricode_core::seed::{derive_seed, sha256_hex};
use curricode_core::srcmodel::parse_function;

use crate::{Cli, Command, CurriculumArgs, EvaluateArgs, ObfuscateArgs, ReportArgs, StudyArgs, TrainArgs, TransformKind};

#[derive(Debug, Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunConfig<'a, S: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config_file: Option<&'a Path>,
    inputs: Vec<InputRecord>,
    settings: &'a S,
}

/// Level files plus audit when given a bundle prefix, else the file itself.
fn input_files(path: &Path) -> Vec<PathBuf> {
    if path.is_file() {
        return vec![path.to_path_buf()];
    }
    let prefix = bundle_prefix(path);
    let mut files = curriculum::level_paths(&prefix).to_vec();
    files.push(curriculum::audit_path(&prefix));
    files
}

fn hash_inputs(paths: &[&Path]) -> Result<Vec<InputRecord>> {
    let mut out = Vec::new();
    for p in paths {
        for f in input_files(p) {
            let bytes = fs::read(&f).with_context(|| format!("cannot read {}", f.display()))?;
            out.push(InputRecord { sha256: sha256_hex(&bytes), path: f });
        }
    }
    Ok(out)
}

/// Resolves the output directory and writes `run_config.json` into it
/// before any work starts.
fn prepare_run<S: Serialize>(
    cli: &Cli,
    config_file: Option<&Path>,
    command: &'static str,
    out: Option<&Path>,
    inputs: &[&Path],
    settings: &S,
) -> Result<PathBuf> {
    let cfg = RunConfig {
        tool: "curricode",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cli.seed,
        config_file,
        inputs: hash_inputs(inputs)?,
        settings,
    };
    let text = serde_json::to_string_pretty(&cfg)? + "\n";
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
            cli.runs_dir.join(format!("{stamp}-{command}-{}", &sha256_hex(text.as_bytes())[..8]))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("run_config.json"), text)?;
    log::info!("writing outputs to {}", dir.display());
    Ok(dir)
}

/// A bundle directory holds `bundle.L{1,2,3}.jsonl` and `bundle.audit.jsonl`;
/// any other path is taken as a prefix.
pub fn bundle_prefix(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("bundle")
    } else {
        path.to_path_buf()
    }
}

fn load_bundle(path: &Path) -> Result<CurriculumBundle> {
    curriculum::load_bundle(&bundle_prefix(path)).with_context(|| format!("cannot load bundle {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn dispatch(cli: &Cli, config_file: Option<&Path>) -> Result<()> {
    match &cli.command {
        Command::Obfuscate(a) => obfuscate(cli, config_file, a),
        Command::Curriculum(a) => build_curriculum(cli, config_file, a),
        Command::Train(a) => run_train(cli, config_file, a),
        Command::Evaluate(a) => evaluate(cli, config_file, a),
        Command::Study(a) => study(cli, config_file, a),
        Command::Report(a) => report(cli, config_file, a),
    }
}

fn obfuscate(cli: &Cli, config_file: Option<&Path>, a: &ObfuscateArgs) -> Result<()> {
    let dir = prepare_run(cli, config_file, "obfuscate", a.out.as_deref(), &[&a.input], a)?;
    let data = corpus::load_jsonl(&a.input)?;
    let mut out = Vec::with_capacity(data.len());
    let mut failures = 0;
    for ex in &data.examples {
        let result = parse_function(&ex.code).map_err(|e| e.to_string()).and_then(|(model, scope)| {
            let err = |e: curricode_core::obfuscate::ObfuscateError| e.to_string();
            match a.transform {
                TransformKind::Fne => fne(&model).map_err(err),
                TransformKind::Irn => irn(&model, &scope).map(|(m, _)| m).map_err(err),
                TransformKind::FneIrn => {
                    let named = fne(&model).map_err(err)?;
                    irn(&named, named.scope()).map(|(m, _)| m).map_err(err)
                }
                TransformKind::Dci => dci(&model, a.lines, derive_seed(cli.seed, &ex.id)).map(|(m, _)| m).map_err(err),
            }
        });
        match result {
            Ok(m) => out.push(CorpusExample { code: m.source().to_string(), ..ex.clone() }),
            Err(reason) if a.lenient => {
                log::warn!("dropping {}: {reason}", ex.id);
                failures += 1;
            }
            Err(reason) => bail!("{}: {reason}", ex.id),
        }
    }
    let path = dir.join("obfuscated.jsonl");
    corpus::write_jsonl(&Dataset { examples: out, ..data }, &path)?;
    println!("wrote {} ({failures} dropped)", path.display());
    Ok(())
}

fn build_curriculum(cli: &Cli, config_file: Option<&Path>, a: &CurriculumArgs) -> Result<()> {
    let dir = prepare_run(cli, config_file, "curriculum", a.out.as_deref(), &[&a.input], a)?;
    let data = corpus::load_jsonl(&a.input)?;
    let opts = BuildOptions { lenient: a.lenient };
    let bundle = match a.kind {
        curriculum::CurriculumKind::SemanticObfuscation => curriculum::build_semantic_obfuscation(&data, opts)?,
        curriculum::CurriculumKind::SemanticInterference => {
            curriculum::build_semantic_interference(&data, a.light, a.heavy, cli.seed, opts)?
        }
    };
    curriculum::write_bundle(&bundle, &dir.join("bundle"))?;
    println!("wrote {} examples per level to {}", bundle.len(), dir.display());
    Ok(())
}

fn run_train(cli: &Cli, config_file: Option<&Path>, a: &TrainArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.bundle];
    if let Some(v) = &a.valid_bundle {
        inputs.push(v);
    }
    let dir = prepare_run(cli, config_file, "train", a.out.as_deref(), &inputs, a)?;
    let bundle = load_bundle(&a.bundle)?;
    let vocab = build_vocab(&bundle, a.min_count, a.max_vocab);
    let vocab_hash = vocab.hash();
    write_json(&dir.join("vocab.json"), &vocab)?;
    let data = EncodedBundle::new(&bundle, &vocab);
    let valid = a.valid_bundle.as_deref().map(load_bundle).transpose()?.map(|b| EvalSet::new(&b, &vocab));
    let cfg = TrainerConfig {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        batch_size: a.batch_size,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        inner_weight_decay: a.inner_weight_decay,
        warmup_steps: a.warmup_steps,
        seed: cli.seed,
        meta_order: a.meta_order,
        patience: a.patience,
        trace_param_hashes: a.trace_param_hashes,
    };
    let init = init_params(vocab.len(), a.dim, a.hidden, cli.seed);
    let opts = TrainOptions { validation: valid.as_ref().map(|v| (v, &vocab)), checkpoint_dir: Some(&dir), vocab_hash: &vocab_hash };
    let out = train(a.schedule, &data, init, &cfg, opts)?;
    out.trace.write(&dir)?;
    save_checkpoint(dir.join("model.bin"), out.best(), &vocab_hash, cli.seed)?;
    println!(
        "{}: {} steps over {} epochs; model written to {}",
        a.schedule.label(),
        out.trace.steps.len(),
        out.trace.epochs.len(),
        dir.join("model.bin").display()
    );
    Ok(())
}

/// One method's scores, as written by `evaluate` and read by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: String,
    pub levels: Vec<String>,
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    prediction: &'a str,
    reference: &'a str,
    bleu: f64,
}

fn schedule_label(model_dir: &Path) -> Option<String> {
    let text = fs::read_to_string(model_dir.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let s: curricode_core::metatrain::Schedule = v.get("schedule")?.as_str()?.parse().ok()?;
    Some(s.label().to_string())
}

fn evaluate(cli: &Cli, config_file: Option<&Path>, a: &EvaluateArgs) -> Result<()> {
    let model_files: Vec<PathBuf> = a.model.iter().flat_map(|m| [m.join("model.bin"), m.join("vocab.json")]).collect();
    let hashed: Vec<&Path> = [&a.bundle, &a.predictions, &a.references, &a.embeddings]
        .into_iter()
        .flatten()
        .chain(&model_files)
        .map(|p| p.as_path())
        .collect();
    let evaluation = match (&a.model, &a.predictions) {
        (Some(model_dir), _) => {
            let bundle_path = a.bundle.as_deref().context("--model requires --bundle")?;
            let dir = prepare_run(cli, config_file, "evaluate", a.out.as_deref(), &hashed, a)?;
            let vocab: Vocab = serde_json::from_str(&fs::read_to_string(model_dir.join("vocab.json"))?)?;
            let (header, params) = load_checkpoint(model_dir.join("model.bin"))?;
            ensure!(header.vocab_hash == vocab.hash(), "model.bin was trained with a different vocabulary");
            let bundle = load_bundle(bundle_path)?;
            let names = llmeval::level_names(bundle.kind());
            let set = EvalSet::new(&bundle, &vocab);
            let mut cells = BTreeMap::new();
            for (level, name) in names.iter().enumerate() {
                let preds = set.predict(&params, &vocab, level);
                let rows: Vec<PredictionRow> = set
                    .ids
                    .iter()
                    .zip(&preds)
                    .zip(&set.levels[level])
                    .map(|((id, p), (_, r))| PredictionRow { id, prediction: p, reference: r, bleu: metrics::bleu4(p, r) })
                    .collect();
                let mean = rows.iter().map(|r| r.bleu).sum::<f64>() / rows.len().max(1) as f64;
                write_jsonl(&dir.join(format!("predictions.{name}.jsonl")), &rows)?;
                cells.insert(name.to_string(), Cell::bleu_only(mean));
            }
            let method = a.method.clone().or_else(|| schedule_label(model_dir)).unwrap_or_else(|| "model".into());
            let ev = Evaluation { method, levels: names.iter().map(|s| s.to_string()).collect(), cells };
            write_json(&dir.join("evaluation.json"), &ev)?;
            ev
        }
        (None, Some(pred_path)) => {
            let ref_path = a.references.as_deref().context("--predictions requires --references")?;
            let dir = prepare_run(cli, config_file, "evaluate", a.out.as_deref(), &hashed, a)?;
            let preds = read_field_map(pred_path, &["prediction", "candidate"])?;
            let refs = read_field_map(ref_path, &["docstring", "reference"])?;
            let mut rows = Vec::new();
            for (id, r) in &refs {
                let p = preds.get(id).with_context(|| format!("no prediction for `{id}`"))?;
                rows.push(PredictionRow { id, prediction: p, reference: r, bleu: metrics::bleu4(p, r) });
            }
            let bleu = rows.iter().map(|r| r.bleu).sum::<f64>() / rows.len().max(1) as f64;
            let similarity = match &a.embeddings {
                Some(p) => {
                    let sims = metrics::similarity_scores(&metrics::load_embeddings(p)?)?;
                    Some(sims.values().sum::<f64>() / sims.len().max(1) as f64)
                }
                None => None,
            };
            write_jsonl(&dir.join(format!("predictions.{}.jsonl", a.level)), &rows)?;
            let ev = Evaluation {
                method: a.method.clone().unwrap_or_else(|| "predictions".into()),
                levels: vec![a.level.clone()],
                cells: BTreeMap::from([(a.level.clone(), Cell { bleu, similarity })]),
            };
            write_json(&dir.join("evaluation.json"), &ev)?;
            ev
        }
        (None, None) => bail!("evaluate needs either --model with --bundle, or --predictions with --references"),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&evaluation)?);
    } else {
        for l in &evaluation.levels {
            let c = evaluation.cells[l];
            println!("{} {l}: BLEU {}", evaluation.method, metrics::fmt_score(c.bleu));
        }
    }
    Ok(())
}

/// id -> first present field among `fields`, from a JSONL file.
fn read_field_map(path: &Path, fields: &[&str]) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let id = v.get("id").and_then(|x| x.as_str()).with_context(|| format!("{}:{}: missing id", path.display(), i + 1))?;
        let value = fields
            .iter()
            .find_map(|f| v.get(*f).and_then(|x| x.as_str()))
            .with_context(|| format!("{}:{}: missing {}", path.display(), i + 1, fields.join(" or ")))?;
        out.insert(id.to_string(), value.to_string());
    }
    Ok(out)
}

fn study(cli: &Cli, config_file: Option<&Path>, a: &StudyArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.bundle];
    if let Some(f) = &a.fewshot_file {
        inputs.push(f);
    }
    let dir = prepare_run(cli, config_file, "study", a.out.as_deref(), &inputs, a)?;
    let bundle = load_bundle(&a.bundle)?;
    let fewshots = match &a.fewshot_file {
        Some(path) => {
            let mut data = corpus::load_jsonl(path)?;
            if a.fewshot_shuffle {
                data = curricode_core::metatrain::shuffled(&data, derive_seed(cli.seed, "fewshots"));
            }
            llmeval::first_fewshots(&data, a.fewshots)
        }
        None => Vec::new(),
    };
    let mut cfg = ClientConfig::new(a.endpoint.clone(), a.model_name.clone());
    cfg.api_key = a.api_key.clone();
    cfg.cache_dir = a.cache_dir.clone();
    let client = ChatClient::new(cfg)?;
    let limit = a.limit.min(bundle.len());
    if limit < a.limit {
        log::warn!("limit {} exceeds bundle size; using {limit}", a.limit);
    }
    let opts = StudyOptions { limit, fewshots, concurrency: a.concurrency };
    let out = llmeval::run_study(&bundle, &a.protocols, &client, &opts)?;
    llmeval::write_records(&out.records, &dir.join("records.jsonl"))?;
    write_json(&dir.join("report.json"), &out.report)?;
    fs::write(dir.join("report.txt"), out.report.to_string())?;
    log::info!("{} network calls", client.network_calls());
    if a.json {
        println!("{}", out.report.to_json());
    } else {
        print!("{}", out.report);
    }
    Ok(())
}

fn report(cli: &Cli, config_file: Option<&Path>, a: &ReportArgs) -> Result<()> {
    let files: Vec<PathBuf> =
        a.evals.iter().map(|p| if p.is_dir() { p.join("evaluation.json") } else { p.clone() }).collect();
    let refs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
    let dir = prepare_run(cli, config_file, "report", a.out.as_deref(), &refs, a)?;
    let mut evals = Vec::new();
    for f in &files {
        let ev: Evaluation = serde_json::from_str(&fs::read_to_string(f).with_context(|| format!("cannot read {}", f.display()))?)
            .with_context(|| format!("invalid evaluation {}", f.display()))?;
        evals.push(ev);
    }
    let levels = evals.first().map(|e| e.levels.clone()).unwrap_or_default();
    let methods: Vec<MethodScores> = evals.iter().map(|e| MethodScores { method: e.method.clone(), cells: e.cells.clone() }).collect();
    let baseline = a.baseline.clone().or_else(|| evals.first().map(|e| e.method.clone())).unwrap_or_default();
    let table = metrics::robustness_report(&levels, &methods, &baseline)?;
    write_json(&dir.join("report.json"), &table)?;
    fs::write(dir.join("report.txt"), table.to_string())?;
    if a.json {
        println!("{}", table.to_json());
    } else {
        print!("{table}");
    }
    Ok(())
}
