//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::Deserialize;
use serde_json::Value;

pub fn data_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub code: String,
    pub docstring: String,
}

pub fn stdlib_corpus() -> Vec<CorpusRecord> {
    read_jsonl(&data_path("stdlib_corpus.jsonl"))
}

#[derive(Debug, Clone, Deserialize)]
pub struct MicroCase {
    pub id: String,
    pub code: String,
    pub docstring: String,
    pub inputs: Vec<String>,
}

pub fn microsuite() -> Vec<MicroCase> {
    let text = std::fs::read_to_string(data_path("microsuite.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// One golden occurrence: byte offset, text, role, group.
#[derive(Debug, Clone, Deserialize)]
pub struct GoldenOcc(pub usize, pub String, pub String, pub Option<usize>);

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenScope {
    pub id: String,
    pub occurrences: Vec<GoldenOcc>,
}

pub fn golden_scopes(file: &str) -> HashMap<String, GoldenScope> {
    read_jsonl::<GoldenScope>(&data_path(&format!("golden/{file}")))
        .into_iter()
        .map(|g| (g.id.clone(), g))
        .collect()
}

pub fn python_available() -> bool {
    Command::new("python3").arg("--version").output().map(|o| o.status.success()).unwrap_or(false)
}

/// Run the execution-equivalence harness. `cases` holds
/// `(id, inputs, [(variant name, code)])` with an `original` variant.
/// Returns id -> variant -> mismatch detail (None when equal).
pub fn run_exec_harness(
    cases: &[(String, Vec<String>, Vec<(String, String)>)],
) -> HashMap<String, HashMap<String, Option<String>>> {
    let payload: Vec<Value> = cases
        .iter()
        .map(|(id, inputs, variants)| {
            let vmap: serde_json::Map<String, Value> =
                variants.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            serde_json::json!({"id": id, "inputs": inputs, "variants": vmap})
        })
        .collect();
    let mut child = Command::new("python3")
        .arg(data_path("tools/exec_harness.py"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .expect("python3 runs");
    child.stdin.take().unwrap().write_all(serde_json::to_string(&payload).unwrap().as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "harness failed");
    serde_json::from_slice(&out.stdout).unwrap()
}

pub fn golden_prompt(name: &str) -> String {
    std::fs::read_to_string(data_path(&format!("golden/prompts/{name}.txt"))).unwrap()
}

pub fn golden_fewshots() -> Vec<(String, String)> {
    let text = std::fs::read_to_string(data_path("golden/prompts/fewshots.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Prompt rendering against the golden transcripts; returns mismatching protocols.
pub fn prompt_mismatches() -> Vec<String> {
    use curricode_core::llmeval::{render_prompt, transcript, Protocol};
    let shots = golden_fewshots();
    [
        (Protocol::ZeroShot, "zero_shot"),
        (Protocol::FewShot, "few_shot"),
        (Protocol::ChainOfThought, "chain_of_thought"),
        (Protocol::Critique, "critique"),
    ]
    .into_iter()
    .filter(|(p, file)| transcript(&render_prompt(*p, "def f(): pass", &shots).unwrap()) != golden_prompt(file))
    .map(|(p, _)| p.to_string())
    .collect()
}

/// Echo oracle: the true docstring for code seen at the origin level, a
/// constant otherwise.
pub fn echo_oracle_study(n: usize) -> (curricode_core::RobustnessReport, usize) {
    use curricode_core::corpus::{CorpusExample, Dataset};
    use curricode_core::curriculum::{build_semantic_obfuscation, BuildOptions};
    use curricode_core::llmeval::{fenced_code, run_study, ChatClient, ClientConfig, Protocol, StubReply, StubServer, StudyOptions};
    let data = Dataset::new(
        stdlib_corpus().into_iter().take(n).map(|r| CorpusExample::new(r.id, r.code, r.docstring)).collect(),
    );
    let bundle = build_semantic_obfuscation(&data, BuildOptions::default()).unwrap();
    let truth: HashMap<String, String> = bundle
        .origin()
        .examples
        .iter()
        .map(|e| (e.code.trim_end().to_string(), e.docstring.clone()))
        .collect();
    let server = StubServer::start(move |req, _| {
        let doc = fenced_code(&req.messages).and_then(|c| truth.get(c)).cloned();
        StubReply::Content(format!("\"\"\"{}\"\"\"", doc.unwrap_or_else(|| "Does something.".to_string())))
    })
    .unwrap();
    let mut cfg = ClientConfig::new(server.url(), "stub");
    cfg.backoff = std::time::Duration::from_millis(1);
    let client = ChatClient::new(cfg).unwrap();
    let opts = StudyOptions { limit: n, ..StudyOptions::default() };
    let out = run_study(&bundle, &[Protocol::ZeroShot], &client, &opts).unwrap();
    (out.report, server.hits())
}

/// Check that `after` has the binding structure of `before` with names
/// substituted per `map`, and that free-variable sets are equal.
pub fn alpha_equivalent(before: &curricode_core::ScopeTable, after: &curricode_core::ScopeTable, map: &curricode_core::RenameMap) -> Result<(), String> {
    if before.occurrences.len() != after.occurrences.len() {
        return Err(format!("{} vs {} occurrences", before.occurrences.len(), after.occurrences.len()));
    }
    let mut fwd: HashMap<usize, usize> = HashMap::new();
    let mut back: HashMap<usize, usize> = HashMap::new();
    for (a, b) in before.occurrences.iter().zip(&after.occurrences) {
        if a.role != b.role {
            return Err(format!("role of {:?} changed {} -> {}", a.text, a.role, b.role));
        }
        let expected = a.group.and_then(|g| map.replacement_for(g)).unwrap_or(&a.text);
        if b.text != expected {
            return Err(format!("{:?} became {:?}, expected {expected:?}", a.text, b.text));
        }
        match (a.group, b.group) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
                    return Err(format!("partition differs at {:?}", a.text));
                }
            }
            _ => return Err(format!("group presence differs at {:?}", a.text)),
        }
    }
    if before.free_names() != after.free_names() {
        return Err(format!("free names {:?} vs {:?}", before.free_names(), after.free_names()));
    }
    Ok(())
}
