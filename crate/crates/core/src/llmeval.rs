//! Prompt protocols for LLM summarization, a cached chat-completions
//! client, docstring extraction and the robustness study harness.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{CurriculumBundle, CurriculumKind};
use crate::metrics::{bleu4, Cell, MethodScores, RobustnessReport};
use crate::seed::sha256_hex;

pub const ENV_ENDPOINT: &str = "CURRICODE_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "CURRICODE_LLM_API_KEY";
pub const ENV_CACHE_DIR: &str = "CURRICODE_LLM_CACHE";

/// Sampling temperature used for every request.
pub const TEMPERATURE: f64 = 0.0;
pub const DEFAULT_FEWSHOTS: usize = 3;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt slot `{0}` has no value")]
    MissingSlot(String),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("endpoint rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("limit {limit} exceeds dataset size {size}")]
    BadLimit { limit: usize, size: usize },
    #[error("{failed} of {total} study requests failed; first: {first}")]
    Study { failed: usize, total: usize, first: Box<LlmError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    ZeroShot,
    FewShot,
    ChainOfThought,
    Critique,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::ZeroShot, Protocol::FewShot, Protocol::ChainOfThought, Protocol::Critique];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero-shot",
            Protocol::FewShot => "few-shot",
            Protocol::ChainOfThought => "chain-of-thought",
            Protocol::Critique => "critique",
        }
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate::for_protocol(self)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" => Ok(Protocol::ZeroShot),
            "few-shot" => Ok(Protocol::FewShot),
            "chain-of-thought" | "cot" => Ok(Protocol::ChainOfThought),
            "critique" => Ok(Protocol::Critique),
            _ => Err(format!("unknown protocol `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One template turn. Assistant turns are placeholders filled by the
/// model's reply during a conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub protocol: Protocol,
    pub turns: Vec<Turn>,
    /// Block repeated once per few-shot pair and spliced into `{examples}`.
    pub exemplar: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message { role, content: content.into() }
    }
}

/// Placeholder text of an unanswered assistant turn.
pub const RESPONSE_SLOT: &str = "{response}";

const SYSTEM: &str =
    "You are a programming assistant skilled at understanding code and generating concise documentation.";

const INSTRUCTION: &str = "Please generate a one-line docstring for the following code that briefly describes its functionality. Only return the docstring without any additional text.
Please generate the text in the following format, with triple quotes surrounding the content:
\"\"\"Generated docstring.\"\"\"
Code:
```python
{code}
```";

const FEWSHOT_USER: &str = "Please refer to the following examples.
{examples}
Please generate a one-line docstring for the following code that briefly describes its functionality. Only return the docstring without any additional text.
Please generate the text in the following format, with triple quotes surrounding the content:
\"\"\"Generated docstring.\"\"\"
Code:
```python
{code}
```";

const FEWSHOT_EXAMPLE: &str = "Example:
Code:
```python
{fewshot_code}
```
Docstring:
\"\"\"{fewshot_docstring}\"\"\"
";

const COT_QUESTIONS: &str = "Code:
```python
{code}
```

Question:
1. What is the name of the function?
2. What are the input parameters that are being accepted by the function?
3. What is the expected output or return value of the function?
4. Are there any special requirements or constraints for using the function?
5. Does the function have any additional dependencies or external requirements?
Please answer the above questions.";

const COT_INTEGRATE: &str = "Let's integrate the above information. Please generate a one-line docstring for the following code that briefly describes its functionality. Only return the docstring without any additional text.
Please generate the text in the following format, with triple quotes surrounding the content:
\"\"\"Generated docstring.\"\"\"
Code:
```python
{code}
```";

const CRITIQUE_REVIEW: &str = "Review your previous answer and find problems with your answer.";
const CRITIQUE_IMPROVE: &str = "Based on the problems you found, improve your answer.";

const fn turn(role: Role, text: &'static str) -> Turn {
    Turn { role, text }
}

impl PromptTemplate {
    pub fn for_protocol(protocol: Protocol) -> Self {
        use Role::*;
        let reply = turn(Assistant, RESPONSE_SLOT);
        let (turns, exemplar) = match protocol {
            Protocol::ZeroShot => (vec![turn(System, SYSTEM), turn(User, INSTRUCTION), reply], None),
            Protocol::FewShot => (vec![turn(System, SYSTEM), turn(User, FEWSHOT_USER), reply], Some(FEWSHOT_EXAMPLE)),
            Protocol::ChainOfThought => (
                vec![turn(User, COT_QUESTIONS), reply.clone(), turn(System, SYSTEM), turn(User, COT_INTEGRATE), reply],
                None,
            ),
            Protocol::Critique => (
                vec![
                    turn(System, SYSTEM),
                    turn(User, INSTRUCTION),
                    reply.clone(),
                    turn(User, CRITIQUE_REVIEW),
                    reply.clone(),
                    turn(User, CRITIQUE_IMPROVE),
                    reply,
                ],
                None,
            ),
        };
        PromptTemplate { protocol, turns, exemplar }
    }

    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::User).count()
    }
}

/// Replaces `{name}` slots in one pass, so slot-like text inside the
/// substituted values is left alone.
fn fill(template: &str, slots: &[(&str, &str)]) -> Result<String, LlmError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let close = tail.find('}');
        let name = close.map(|c| &tail[1..c]).filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_lowercase() || b == b'_'));
        match name {
            Some(name) => {
                let value = slots.iter().find(|(k, _)| *k == name).map(|(_, v)| *v);
                out.push_str(value.ok_or_else(|| LlmError::MissingSlot(name.to_string()))?);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Code as spliced into a fenced block: trailing newlines are dropped so
/// the closing fence sits on its own line.
fn fenced(code: &str) -> &str {
    code.trim_end_matches(['\n', '\r'])
}

/// Instantiates every turn of a protocol. Assistant turns keep the
/// `{response}` placeholder.
pub fn render_prompt(protocol: Protocol, code: &str, fewshots: &[(String, String)]) -> Result<Vec<Message>, LlmError> {
    let template = protocol.template();
    let examples = match template.exemplar {
        Some(block) => {
            if fewshots.is_empty() {
                return Err(LlmError::MissingSlot("fewshot_code".to_string()));
            }
            let blocks = fewshots
                .iter()
                .map(|(c, d)| fill(block, &[("fewshot_code", fenced(c)), ("fewshot_docstring", d.trim())]))
                .collect::<Result<Vec<_>, _>>()?;
            Some(blocks.join("\n"))
        }
        None => None,
    };
    let mut slots = vec![("code", fenced(code))];
    if let Some(e) = &examples {
        slots.push(("examples", e.as_str()));
    }
    template
        .turns
        .iter()
        .map(|t| match t.role {
            Role::Assistant => Ok(Message::new(Role::Assistant, RESPONSE_SLOT)),
            role => Ok(Message::new(role, fill(t.text, &slots)?)),
        })
        .collect()
}

/// Plain-text transcript of a message list, one block per message.
pub fn transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&format!("[{}]\n{}\n\n", m.role.as_str(), m.content));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub summary: String,
    pub unfenced: bool,
}

/// First triple-quoted span, trimmed; otherwise the whole reply, flagged.
pub fn extract_docstring(response: &str) -> Result<Extracted, LlmError> {
    let fenced = response.find("\"\"\"").and_then(|a| {
        let body = &response[a + 3..];
        body.find("\"\"\"").map(|b| body[..b].trim().to_string())
    });
    let (summary, unfenced) = match fenced {
        Some(s) => (s, false),
        None => (response.trim().to_string(), true),
    };
    if summary.is_empty() {
        return Err(LlmError::EmptyResponse);
    }
    Ok(Extracted { summary, unfenced })
}

#[derive(Debug, Clone, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

/// Content hash of a request.
pub fn cache_key(model: &str, messages: &[Message]) -> String {
    let req = ChatRequest { model, messages, temperature: TEMPERATURE };
    sha256_hex(serde_json::to_string(&req).expect("request serializes").as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model: String,
    messages: Vec<Message>,
    temperature: f64,
    response: String,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub cache_dir: Option<PathBuf>,
    pub max_attempts: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ClientConfig {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            cache_dir: None,
            max_attempts: MAX_ATTEMPTS,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    /// Endpoint, key and cache directory from the environment.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| LlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let mut cfg = ClientConfig::new(endpoint, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        cfg.cache_dir = std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from);
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub content: String,
    /// HTTP attempts made; zero on a cache hit.
    pub attempts: u32,
    pub cached: bool,
}

pub struct ChatClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
    network_calls: AtomicUsize,
    cache_lock: Mutex<()>,
}

fn is_loopback(url: &str) -> bool {
    let host = url.split("://").nth(1).unwrap_or(url);
    ["127.0.0.1", "localhost", "[::1]"].iter().any(|h| host.starts_with(h))
}

enum Attempt {
    Done(String),
    Retry(LlmError),
}

impl ChatClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, LlmError> {
        if cfg.max_attempts == 0 {
            return Err(LlmError::Config("max_attempts must be at least 1".into()));
        }
        let mut builder = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(cfg.timeout));
        if is_loopback(&cfg.endpoint) {
            builder = builder.proxy(None);
        }
        Ok(ChatClient { agent: builder.build().into(), cfg, network_calls: AtomicUsize::new(0), cache_lock: Mutex::new(()) })
    }

    pub fn model(&self) -> &str {
        &self.cfg.model
    }

    /// HTTP attempts made by this client so far.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cfg.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn cache_get(&self, key: &str) -> Result<Option<String>, LlmError> {
        let Some(path) = self.cache_path(key) else { return Ok(None) };
        match fs::read_to_string(&path) {
            Ok(text) => {
                let entry: CacheEntry = serde_json::from_str(&text)
                    .map_err(|e| LlmError::Config(format!("corrupt cache entry {}: {e}", path.display())))?;
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores a response unless one is already present; returns the stored one.
    fn cache_put(&self, key: &str, messages: &[Message], response: String) -> Result<String, LlmError> {
        let Some(path) = self.cache_path(key) else { return Ok(response) };
        let _guard = self.cache_lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = self.cache_get(key)? {
            return Ok(existing);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let entry = CacheEntry {
            key: key.to_string(),
            model: self.cfg.model.clone(),
            messages: messages.to_vec(),
            temperature: TEMPERATURE,
            response,
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&entry).expect("entry serializes"))?;
        fs::rename(&tmp, &path)?;
        Ok(entry.response)
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Attempt, LlmError> {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/chat/completions", self.cfg.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(serde_json::to_vec(body).expect("body serializes")) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(LlmError::Transport { attempts: 0, message: e.to_string() })),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(LlmError::Transport { attempts: 0, message: e.to_string() })),
        };
        match status {
            200..=299 => parse_content(&text).map(Attempt::Done),
            401 | 403 => Err(LlmError::Auth(status)),
            429 => Ok(Attempt::Retry(LlmError::RateLimited { attempts: 0 })),
            _ => Err(LlmError::Http { status, body: text }),
        }
    }

    /// One chat completion; served from the cache when possible.
    pub fn chat(&self, messages: &[Message]) -> Result<ChatResponse, LlmError> {
        let key = cache_key(&self.cfg.model, messages);
        if let Some(content) = self.cache_get(&key)? {
            return Ok(ChatResponse { content, attempts: 0, cached: true });
        }
        let body = serde_json::json!({ "model": self.cfg.model, "messages": messages, "temperature": TEMPERATURE });
        let mut delay = self.cfg.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body)? {
                Attempt::Done(content) => {
                    let content = self.cache_put(&key, messages, content)?;
                    return Ok(ChatResponse { content, attempts, cached: false });
                }
                Attempt::Retry(err) if attempts >= self.cfg.max_attempts => {
                    return Err(match err {
                        LlmError::Transport { message, .. } => LlmError::Transport { attempts, message },
                        _ => LlmError::RateLimited { attempts },
                    });
                }
                Attempt::Retry(err) => {
                    log::warn!("attempt {attempts} failed ({err}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}

fn parse_content(text: &str) -> Result<String, LlmError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(format!("invalid JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Runs a rendered protocol, feeding each reply into the history.
/// Returns the full conversation and the final reply.
pub fn converse(client: &ChatClient, rendered: &[Message]) -> Result<(Vec<Message>, String), LlmError> {
    let mut history = Vec::with_capacity(rendered.len());
    let mut last = None;
    for m in rendered {
        if m.role == Role::Assistant {
            let reply = client.chat(&history)?.content;
            history.push(Message::new(Role::Assistant, reply.clone()));
            last = Some(reply);
        } else {
            history.push(m.clone());
        }
    }
    let last = last.ok_or_else(|| LlmError::Config("protocol has no assistant turn".into()))?;
    Ok((history, last))
}

/// Display names of a bundle's levels, origin first.
pub fn level_names(kind: CurriculumKind) -> [&'static str; 3] {
    match kind {
        CurriculumKind::SemanticObfuscation => ["origin", "fne", "irn"],
        CurriculumKind::SemanticInterference => ["origin", "dci-light", "dci-heavy"],
    }
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    /// Examples per level, taken from the front.
    pub limit: usize,
    /// Few-shot exemplars as (code, docstring) pairs.
    pub fewshots: Vec<(String, String)>,
    pub concurrency: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions { limit: 0, fewshots: Vec::new(), concurrency: DEFAULT_CONCURRENCY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    pub level: String,
    pub protocol: Protocol,
    pub response: String,
    pub summary: String,
    pub unfenced: bool,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub report: RobustnessReport,
    pub records: Vec<StudyRecord>,
}

/// First `k` examples of a dataset as few-shot exemplars.
pub fn first_fewshots(dataset: &crate::corpus::Dataset, k: usize) -> Vec<(String, String)> {
    dataset.examples.iter().take(k).map(|e| (e.code.clone(), e.docstring.clone())).collect()
}

/// Generates, extracts and scores every (level, example, protocol)
/// triple, with at most `opts.concurrency` conversations in flight.
/// Rows follow protocol order; the first protocol is the delta baseline.
pub fn run_study(
    bundle: &CurriculumBundle,
    protocols: &[Protocol],
    client: &ChatClient,
    opts: &StudyOptions,
) -> Result<StudyOutput, LlmError> {
    let names = level_names(bundle.kind());
    let levels: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let mut protocols = protocols.to_vec();
    protocols.sort();
    protocols.dedup();
    let baseline = protocols.first().map(|p| p.as_str().to_string()).unwrap_or_default();
    if opts.limit > bundle.len() {
        return Err(LlmError::BadLimit { limit: opts.limit, size: bundle.len() });
    }
    if opts.limit == 0 || protocols.is_empty() {
        return Ok(StudyOutput { report: RobustnessReport { levels, baseline, rows: Vec::new() }, records: Vec::new() });
    }
    if opts.concurrency == 0 {
        return Err(LlmError::Config("concurrency must be at least 1".into()));
    }
    let mut jobs = Vec::new();
    for &p in &protocols {
        for level in 0..3 {
            for k in 0..opts.limit {
                jobs.push((p, level, k));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency)
        .build()
        .map_err(|e| LlmError::Config(e.to_string()))?;
    let results: Vec<Result<StudyRecord, LlmError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, level, k)| {
                let ex = &bundle.levels[level].examples[k];
                let rendered = render_prompt(p, &ex.code, &opts.fewshots)?;
                let (_, reply) = converse(client, &rendered)?;
                let extracted = extract_docstring(&reply)?;
                Ok(StudyRecord {
                    id: ex.id.clone(),
                    level: names[level].to_string(),
                    protocol: p,
                    bleu: bleu4(&extracted.summary, &ex.docstring),
                    response: reply,
                    summary: extracted.summary,
                    unfenced: extracted.unfenced,
                })
            })
            .collect()
    });
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        let failed = errors.len();
        return Err(LlmError::Study { failed, total, first: Box::new(errors.swap_remove(0)) });
    }
    let methods = protocols
        .iter()
        .map(|&p| {
            let mut cells = BTreeMap::new();
            for name in names {
                let scores: Vec<f64> =
                    records.iter().filter(|r| r.protocol == p && r.level == name).map(|r| r.bleu).collect();
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                cells.insert(name.to_string(), Cell::bleu_only(mean));
            }
            MethodScores { method: p.as_str().to_string(), cells }
        })
        .collect::<Vec<_>>();
    let report = crate::metrics::robustness_report(&levels, &methods, &baseline)
        .map_err(|e| LlmError::Config(e.to_string()))?;
    Ok(StudyOutput { report, records })
}

/// Reply produced by a [`StubServer`] handler.
#[derive(Debug, Clone)]
pub enum StubReply {
    /// 200 with the given assistant content.
    Content(String),
    /// Arbitrary status and raw body.
    Raw(u16, String),
}

/// Request as seen by a stub handler.
#[derive(Debug, Clone, Deserialize)]
pub struct StubRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

type Handler = dyn Fn(&StubRequest, usize) -> StubReply + Send + Sync;

/// Loopback chat-completions server with deterministic canned replies.
/// The handler also receives the 0-based request count.
pub struct StubServer {
    addr: std::net::SocketAddr,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest, usize) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let (h, s) = (hits.clone(), stop.clone());
        let thread = thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (handler, hits) = (handler.clone(), h.clone());
                thread::spawn(move || {
                    if let Err(e) = serve(stream, &*handler, &hits) {
                        log::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(StubServer { addr, hits, stop, thread: Some(thread) })
    }

    /// Base URL to use as the client endpoint.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let mut length = 0;
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    let n = hits.fetch_add(1, Ordering::SeqCst);
    let (status, payload) = match serde_json::from_slice::<StubRequest>(&body) {
        Ok(req) => match handler(&req, n) {
            StubReply::Content(c) => (
                200,
                serde_json::json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": c } }] })
                    .to_string(),
            ),
            StubReply::Raw(status, body) => (status, body),
        },
        Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
    };
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        _ => "Status",
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

/// Code inside the last fenced block of the last user message.
pub fn fenced_code(messages: &[Message]) -> Option<&str> {
    let user = messages.iter().rev().find(|m| m.role == Role::User)?;
    let start = user.content.rfind("```python\n")? + "```python\n".len();
    let len = user.content[start..].find("\n```")?;
    Some(&user.content[start..start + len])
}

/// Serializes study records as JSONL.
pub fn write_records(records: &[StudyRecord], path: &Path) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let out = fill("a {code} b", &[("code", "{code} {x}")]).unwrap();
        assert_eq!(out, "a {code} {x} b");
        assert!(matches!(fill("{nope}", &[]), Err(LlmError::MissingSlot(s)) if s == "nope"));
        assert_eq!(fill("d = {}", &[]).unwrap(), "d = {}");
    }

    #[test]
    fn cache_key_depends_on_content() {
        let a = [Message::new(Role::User, "x")];
        let b = [Message::new(Role::User, "y")];
        assert_eq!(cache_key("m", &a), cache_key("m", &a));
        assert_ne!(cache_key("m", &a), cache_key("m", &b));
        assert_ne!(cache_key("m", &a), cache_key("n", &a));
    }
}
