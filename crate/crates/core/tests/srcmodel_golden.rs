//! Scope classification and round-trip checks against golden files produced
//! offline by a resolver built on the reference interpreter's own symbol
//! tables (see tests/data/tools/scope_oracle.py).

mod common;

use std::collections::HashMap;

use curricode_core::srcmodel::{is_keyword, parse_function, render, Role, ScopeTable, TokenKind};

use common::{golden_scopes, microsuite, stdlib_corpus, GoldenScope};

/// Offsets of keyword tokens nested inside f-string fields; the golden
/// tokenizer sees f-strings as single tokens and leaves these unclassified.
fn fstring_keyword_offsets(model: &curricode_core::FunctionModel) -> Vec<usize> {
    let mut out = Vec::new();
    fn walk(src: &str, toks: &[curricode_core::srcmodel::Token], nested: bool, out: &mut Vec<usize>) {
        for t in toks {
            if nested && t.kind == TokenKind::Name && is_keyword(t.text(src)) {
                out.push(t.span.start);
            }
            for f in &t.fields {
                walk(src, &f.tokens, true, out);
            }
        }
    }
    walk(model.source(), model.tokens(), false, &mut out);
    out
}

fn compare(id: &str, code: &str, golden: &GoldenScope) -> Result<(), String> {
    let (model, table): (_, ScopeTable) = parse_function(code).map_err(|e| format!("{id}: {e}"))?;
    let skip = fstring_keyword_offsets(&model);
    let ours: HashMap<usize, _> = table
        .occurrences
        .iter()
        .filter(|o| o.role != Role::StringContent && !skip.contains(&o.span.start))
        .map(|o| (o.span.start, o))
        .collect();
    if ours.len() != golden.occurrences.len() {
        let theirs: Vec<usize> = golden.occurrences.iter().map(|g| g.0).collect();
        let extra: Vec<_> = ours.values().filter(|o| !theirs.contains(&o.span.start)).map(|o| (&o.text, o.span.start)).collect();
        return Err(format!("{id}: {} occurrences vs golden {}; extra {extra:?}", ours.len(), golden.occurrences.len()));
    }
    let mut g2o: HashMap<usize, usize> = HashMap::new();
    let mut o2g: HashMap<usize, usize> = HashMap::new();
    for g in &golden.occurrences {
        let o = ours.get(&g.0).ok_or_else(|| format!("{id}: golden {:?} at {} missing", g.1, g.0))?;
        if o.text != g.1 || o.role.as_str() != g.2 {
            return Err(format!("{id}: at {} {:?} golden role {} ours {}", g.0, g.1, g.2, o.role));
        }
        match (g.3, o.group) {
            (None, None) => {}
            (Some(gg), Some(og)) => {
                if *g2o.entry(gg).or_insert(og) != og || *o2g.entry(og).or_insert(gg) != gg {
                    return Err(format!("{id}: binding partition differs at {} {:?}", g.0, g.1));
                }
            }
            _ => return Err(format!("{id}: group presence differs at {} {:?}", g.0, g.1)),
        }
    }
    if render(&model).unwrap() != code {
        return Err(format!("{id}: round trip"));
    }
    Ok(())
}

#[test]
fn stdlib_corpus_matches_reference_resolver() {
    let golden = golden_scopes("stdlib_scope.jsonl");
    let corpus = stdlib_corpus();
    assert!(corpus.len() >= 200);
    let failures: Vec<String> = corpus
        .iter()
        .filter_map(|r| compare(&r.id, &r.code, golden.get(&r.id).expect("golden entry")).err())
        .collect();
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn microsuite_matches_reference_resolver() {
    let golden = golden_scopes("microsuite_scope.jsonl");
    let failures: Vec<String> = microsuite()
        .iter()
        .filter_map(|c| compare(&c.id, &c.code, golden.get(&c.id).expect("golden entry")).err())
        .collect();
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn every_corpus_function_round_trips() {
    for r in stdlib_corpus() {
        let (m, _) = parse_function(&r.code).unwrap();
        assert_eq!(render(&m).unwrap(), r.code, "{}", r.id);
    }
}
