//! Prompt rendering, docstring extraction, the chat client's retry and
//! cache contracts, and the study harness against a loopback stub.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use curricode_core::corpus::{CorpusExample, Dataset};
use curricode_core::curriculum::{build_semantic_obfuscation, BuildOptions};
use curricode_core::llmeval::{
    converse, extract_docstring, render_prompt, run_study, ChatClient, ClientConfig, LlmError, Message, Protocol,
    Role, StubReply, StubServer, StudyOptions, RESPONSE_SLOT,
};
use proptest::prelude::*;

use common::{echo_oracle_study, golden_fewshots, prompt_mismatches, stdlib_corpus};

fn client(server: &StubServer, cache: Option<&std::path::Path>) -> ChatClient {
    let mut cfg = ClientConfig::new(server.url(), "stub-model");
    cfg.backoff = Duration::from_millis(1);
    cfg.cache_dir = cache.map(|p| p.to_path_buf());
    ChatClient::new(cfg).unwrap()
}

fn ok_server() -> StubServer {
    StubServer::start(|_, n| StubReply::Content(format!("\"\"\"Reply {n}.\"\"\""))).unwrap()
}

#[test]
fn rendered_prompts_match_golden_transcripts() {
    assert_eq!(prompt_mismatches(), Vec::<String>::new());
}

#[test]
fn fewshot_without_examples_is_missing_slot() {
    assert!(matches!(render_prompt(Protocol::FewShot, "def f(): pass", &[]), Err(LlmError::MissingSlot(_))));
}

#[test]
fn critique_has_three_user_turns() {
    let msgs = render_prompt(Protocol::Critique, "def f(): pass", &[]).unwrap();
    let users: Vec<_> = msgs.iter().filter(|m| m.role == Role::User).collect();
    assert_eq!(users.len(), 3);
    assert!(users[1].content.starts_with("Review your previous answer and find problems"));
    assert_eq!(msgs.iter().filter(|m| m.content == RESPONSE_SLOT).count(), 3);
}

#[test]
fn code_with_slot_text_is_spliced_verbatim() {
    let code = "def f(d):\n    return '{code}' + str({})\n";
    let msgs = render_prompt(Protocol::ZeroShot, code, &[]).unwrap();
    assert!(msgs[1].content.contains("```python\ndef f(d):\n    return '{code}' + str({})\n```"));
}

#[test]
fn extraction_rules() {
    let e = extract_docstring("\"\"\"Creates a shared variable.\"\"\"").unwrap();
    assert_eq!((e.summary.as_str(), e.unfenced), ("Creates a shared variable.", false));
    let e = extract_docstring("Sure, here it is:\n\"\"\" Adds two. \"\"\"\nand \"\"\"other\"\"\"").unwrap();
    assert_eq!((e.summary.as_str(), e.unfenced), ("Adds two.", false));
    let e = extract_docstring("  Adds a filter.\n").unwrap();
    assert_eq!((e.summary.as_str(), e.unfenced), ("Adds a filter.", true));
    assert!(matches!(extract_docstring("   "), Err(LlmError::EmptyResponse)));
    assert!(matches!(extract_docstring("\"\"\"  \"\"\""), Err(LlmError::EmptyResponse)));
}

#[test]
fn retry_after_429_records_two_attempts() {
    let server = StubServer::start(|_, n| {
        if n == 0 {
            StubReply::Raw(429, "{}".into())
        } else {
            StubReply::Content("\"\"\"Done.\"\"\"".into())
        }
    })
    .unwrap();
    let c = client(&server, None);
    let r = c.chat(&[Message::new(Role::User, "hi")]).unwrap();
    assert_eq!((r.content.as_str(), r.attempts, r.cached), ("\"\"\"Done.\"\"\"", 2, false));
    assert_eq!(server.hits(), 2);
}

#[test]
fn persistent_429_gives_rate_limited_after_five() {
    let server = StubServer::start(|_, _| StubReply::Raw(429, "{}".into())).unwrap();
    let err = client(&server, None).chat(&[Message::new(Role::User, "hi")]).unwrap_err();
    assert!(matches!(err, LlmError::RateLimited { attempts: 5 }), "{err}");
    assert_eq!(server.hits(), 5);
}

#[test]
fn error_statuses_map_to_typed_errors() {
    let server = StubServer::start(|_, _| StubReply::Raw(401, "{}".into())).unwrap();
    assert!(matches!(client(&server, None).chat(&[]), Err(LlmError::Auth(401))));
    assert_eq!(server.hits(), 1);
    let server = StubServer::start(|_, _| StubReply::Raw(200, r#"{"choices":[{"message":{}}]}"#.into())).unwrap();
    assert!(matches!(client(&server, None).chat(&[]), Err(LlmError::MalformedResponse(_))));
    let server = StubServer::start(|_, _| StubReply::Raw(200, "not json".into())).unwrap();
    assert!(matches!(client(&server, None).chat(&[]), Err(LlmError::MalformedResponse(_))));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let url = {
        let s = ok_server();
        s.url()
    };
    let mut cfg = ClientConfig::new(url, "m");
    cfg.backoff = Duration::from_millis(1);
    cfg.max_attempts = 2;
    let err = ChatClient::new(cfg).unwrap().chat(&[]).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 2, .. }), "{err}");
}

#[test]
fn bearer_token_and_wire_fields_are_sent() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let s2 = seen.clone();
    let server = StubServer::start(move |req, _| {
        s2.lock().unwrap().push((req.model.clone(), req.temperature, req.messages.len()));
        StubReply::Content("x".into())
    })
    .unwrap();
    let mut cfg = ClientConfig::new(server.url(), "m1");
    cfg.api_key = Some("secret".into());
    ChatClient::new(cfg).unwrap().chat(&[Message::new(Role::User, "a")]).unwrap();
    assert_eq!(*seen.lock().unwrap(), vec![("m1".to_string(), 0.0, 1)]);
}

#[test]
fn cache_hits_make_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let server = ok_server();
    let msgs = [Message::new(Role::User, "hello")];
    let a = client(&server, Some(dir.path())).chat(&msgs).unwrap();
    let fresh = client(&server, Some(dir.path()));
    let b = fresh.chat(&msgs).unwrap();
    assert_eq!(a.content, b.content);
    assert!(b.cached && b.attempts == 0);
    assert_eq!((server.hits(), fresh.network_calls()), (1, 0));
}

#[test]
fn multi_turn_threads_prior_replies() {
    let lens = Arc::new(AtomicUsize::new(0));
    let l2 = lens.clone();
    let server = StubServer::start(move |req, n| {
        if n == 2 {
            let prior: Vec<_> = req.messages.iter().filter(|m| m.role == Role::Assistant).map(|m| m.content.clone()).collect();
            assert_eq!(prior, vec!["r0".to_string(), "r1".to_string()]);
        }
        l2.store(req.messages.len(), Ordering::SeqCst);
        StubReply::Content(format!("r{n}"))
    })
    .unwrap();
    let c = client(&server, None);
    let rendered = render_prompt(Protocol::Critique, "def f(): pass", &[]).unwrap();
    let (history, last) = converse(&c, &rendered).unwrap();
    assert_eq!(last, "r2");
    assert_eq!(history.len(), 7);
    assert_eq!(lens.load(Ordering::SeqCst), 6);
    assert!(history.iter().all(|m| m.content != RESPONSE_SLOT));
}

fn small_bundle(n: usize) -> curricode_core::CurriculumBundle {
    let data = Dataset::new(
        stdlib_corpus().into_iter().take(n).map(|r| CorpusExample::new(r.id, r.code, r.docstring)).collect(),
    );
    build_semantic_obfuscation(&data, BuildOptions::default()).unwrap()
}

#[test]
fn zero_limit_is_empty_without_calls() {
    let server = ok_server();
    let out = run_study(&small_bundle(4), &Protocol::ALL, &client(&server, None), &StudyOptions::default()).unwrap();
    assert!(out.report.rows.is_empty() && out.records.is_empty());
    assert_eq!(out.report.levels, vec!["origin", "fne", "irn"]);
    assert_eq!(server.hits(), 0);
}

#[test]
fn warm_cache_rerun_is_identical_without_calls() {
    let dir = tempfile::tempdir().unwrap();
    let server = StubServer::start(|req, _| StubReply::Content(format!("\"\"\"{} messages\"\"\"", req.messages.len()))).unwrap();
    let bundle = small_bundle(5);
    let opts = StudyOptions { limit: 5, fewshots: golden_fewshots(), ..StudyOptions::default() };
    let first = run_study(&bundle, &Protocol::ALL, &client(&server, Some(dir.path())), &opts).unwrap();
    let hits = server.hits();
    assert!(hits > 0);
    let warm = client(&server, Some(dir.path()));
    let second = run_study(&bundle, &Protocol::ALL, &warm, &opts).unwrap();
    assert_eq!(first, second);
    assert_eq!((server.hits(), warm.network_calls()), (hits, 0));
    let methods: Vec<_> = second.report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, vec!["zero-shot", "few-shot", "chain-of-thought", "critique"]);
}

#[test]
fn limit_above_size_is_rejected() {
    let server = ok_server();
    let opts = StudyOptions { limit: 9, ..StudyOptions::default() };
    assert!(matches!(
        run_study(&small_bundle(3), &[Protocol::ZeroShot], &client(&server, None), &opts),
        Err(LlmError::BadLimit { limit: 9, size: 3 })
    ));
}

#[test]
fn in_flight_requests_are_bounded() {
    let current = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (c2, p2) = (current.clone(), peak.clone());
    let server = StubServer::start(move |_, _| {
        let now = c2.fetch_add(1, Ordering::SeqCst) + 1;
        p2.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(20));
        c2.fetch_sub(1, Ordering::SeqCst);
        StubReply::Content("\"\"\"x\"\"\"".into())
    })
    .unwrap();
    let opts = StudyOptions { limit: 8, ..StudyOptions::default() };
    run_study(&small_bundle(8), &[Protocol::ZeroShot], &client(&server, None), &opts).unwrap();
    let peak = peak.load(Ordering::SeqCst);
    assert!((1..=4).contains(&peak), "peak {peak}");
}

#[test]
fn echo_oracle_scores_origin_perfectly() {
    let (report, hits) = echo_oracle_study(20);
    let row = report.row("zero-shot").unwrap();
    assert_eq!(hits, 60);
    assert_eq!(row.cells[0].bleu, 100.0);
    assert!(row.cells[2].bleu < row.cells[0].bleu);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fenced_span_is_recovered(doc in "[A-Za-z][A-Za-z ,.]{0,40}", pre in "[a-z :\n]{0,20}", post in "[a-z \n]{0,20}") {
        let e = extract_docstring(&format!("{pre}\"\"\"{doc}\"\"\"{post}")).unwrap();
        prop_assert_eq!(e.summary, doc.trim());
        prop_assert!(!e.unfenced);
    }

    #[test]
    fn code_is_spliced_exactly_once(code in "[a-z(){}:=+ \n]{1,60}") {
        for p in [Protocol::ZeroShot, Protocol::Critique, Protocol::ChainOfThought] {
            let msgs = render_prompt(p, &code, &[]).unwrap();
            let fenced = format!("```python\n{}\n```", code.trim_end_matches('\n'));
            prop_assert!(msgs.iter().filter(|m| m.role == Role::User).any(|m| m.content.contains(&fenced)));
        }
    }
}
