//! Curriculum bundles: level contents, alignment, batching and
//! support/query properties.

mod common;

use std::collections::BTreeSet;

use curricode_core::corpus::{CorpusExample, Dataset};
use curricode_core::curriculum::{
    batch_triples, build_semantic_interference, build_semantic_obfuscation, load_bundle, support_query_split,
    write_bundle, BuildOptions, CurriculumBundle, Transform,
};
use curricode_core::srcmodel::{parse_function, Role, TokenKind};
use proptest::prelude::*;

use common::{microsuite, stdlib_corpus};

fn micro_dataset() -> Dataset {
    Dataset::new(microsuite().into_iter().map(|c| CorpusExample::new(c.id, c.code, c.docstring)).collect())
}

fn stdlib_dataset(n: usize) -> Dataset {
    Dataset::new(stdlib_corpus().into_iter().take(n).map(|r| CorpusExample::new(r.id, r.code, r.docstring)).collect())
}

fn nonblank_lines(code: &str) -> usize {
    code.lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn open_many_erosion() {
    let bundle = build_semantic_obfuscation(&micro_dataset(), BuildOptions::default()).unwrap();
    let idx = bundle.origin().ids().position(|id| id == "open_many").unwrap();
    let [l1, l2, l3] = bundle.levels.each_ref().map(|l| l.examples[idx].code.as_str());
    assert_eq!(l1, "def open_many(filenames):\n    files = []\n    for name in filenames:\n        files.append(name.upper())\n    return files\n");
    assert_eq!(l2, "def func_1(filenames):\n    files = []\n    for name in filenames:\n        files.append(name.upper())\n    return files\n");
    assert_eq!(l3, "def func_1(var_1):\n    var_2 = []\n    for var_3 in var_1:\n        var_2.append(var_3.upper())\n    return var_2\n");
}

#[test]
fn fne_level_touches_only_function_name_tokens() {
    let bundle = build_semantic_obfuscation(&micro_dataset(), BuildOptions::default()).unwrap();
    bundle.check_alignment().unwrap();
    for (a, b) in bundle.levels[0].examples.iter().zip(&bundle.levels[1].examples) {
        let (ma, sa) = parse_function(&a.code).unwrap();
        let (mb, _) = parse_function(&b.code).unwrap();
        let name_spans: BTreeSet<(usize, usize)> = sa
            .occurrences
            .iter()
            .filter(|o| o.role == Role::FunctionName)
            .map(|o| (o.span.start, o.span.end))
            .collect();
        let ta: Vec<_> = ma.tokens().iter().filter(|t| !matches!(t.kind, TokenKind::Indent | TokenKind::Dedent)).collect();
        let tb: Vec<_> = mb.tokens().iter().filter(|t| !matches!(t.kind, TokenKind::Indent | TokenKind::Dedent)).collect();
        assert_eq!(ta.len(), tb.len(), "{}", a.id);
        for (x, y) in ta.iter().zip(&tb) {
            let (tx, ty) = (&a.code[x.span.start..x.span.end], &b.code[y.span.start..y.span.end]);
            if tx != ty {
                assert!(name_spans.contains(&(x.span.start, x.span.end)), "{}: `{tx}` -> `{ty}`", a.id);
            }
        }
    }
}

#[test]
fn interference_adds_light_and_heavy_lines() {
    let mut data = stdlib_dataset(120);
    data.examples.extend(micro_dataset().examples);
    let bundle = build_semantic_interference(&data, 5, 10, 42, BuildOptions::default()).unwrap();
    bundle.check_alignment().unwrap();
    assert_eq!(bundle.len(), data.len());
    for k in 0..bundle.len() {
        let [l1, l2, l3] = bundle.levels.each_ref().map(|l| l.examples[k].code.as_str());
        let extra = |code: &str| nonblank_lines(code) as isize - nonblank_lines(l1) as isize;
        let inline = parse_function(l1).unwrap().0.body().first().is_some_and(|s| !l1[..s.span.start].contains('\n'));
        let conv = isize::from(inline);
        assert_eq!(extra(l2), 5 + conv, "{}", bundle.origin().examples[k].id);
        assert_eq!(extra(l3), 10 + conv, "{}", bundle.origin().examples[k].id);
    }
    for r in &bundle.provenance {
        let Transform::Dci { plan } = &r.transform else { panic!("unexpected transform") };
        assert_eq!(plan.n_lines, if r.level == 2 { 5 } else { 10 });
    }
    let again = build_semantic_interference(&data, 5, 10, 42, BuildOptions::default()).unwrap();
    assert_eq!(again, bundle);
    let other = build_semantic_interference(&data, 5, 10, 43, BuildOptions::default()).unwrap();
    assert_ne!(other.levels[2], bundle.levels[2]);
}

#[test]
fn identical_seeds_give_byte_identical_files() {
    let data = stdlib_dataset(40);
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a"), dir.path().join("b"));
    write_bundle(&build_semantic_interference(&data, 5, 10, 7, BuildOptions::default()).unwrap(), &p).unwrap();
    write_bundle(&build_semantic_interference(&data, 5, 10, 7, BuildOptions::default()).unwrap(), &q).unwrap();
    for suffix in ["L1.jsonl", "L2.jsonl", "L3.jsonl", "audit.jsonl"] {
        let read = |prefix: &std::path::Path| std::fs::read(format!("{}.{suffix}", prefix.display())).unwrap();
        assert_eq!(read(&p), read(&q), "{suffix}");
    }
    assert_eq!(load_bundle(&p).unwrap().len(), 40);
}

fn obfuscation_bundle(n: usize) -> CurriculumBundle {
    let base = stdlib_dataset(n.min(320));
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut ex = base.examples[i % base.len()].clone();
        ex.id = format!("{}#{i}", ex.id);
        examples.push(ex);
    }
    build_semantic_obfuscation(&Dataset::new(examples), BuildOptions::default()).unwrap()
}

#[test]
fn batch_of_64_over_128() {
    let bundle = obfuscation_bundle(128);
    let triples = batch_triples(&bundle, 64, 3).unwrap();
    assert_eq!(triples.len(), 2);
    for t in &triples {
        let ids: Vec<_> = t.origin.iter().map(|e| &e.id).collect();
        assert!(t.l2.iter().map(|e| &e.id).eq(ids.iter().copied()));
        assert!(t.l3.iter().map(|e| &e.id).eq(ids.iter().copied()));
        let [o, a, b] = t.split(11).unwrap();
        assert_eq!((o.support.len(), o.query.len()), (32, 32));
        assert!(a.support.iter().zip(&o.support).all(|(x, y)| x.id == y.id));
        assert!(b.query.iter().zip(&o.query).all(|(x, y)| x.id == y.id));
    }
    let seen: BTreeSet<_> = triples.iter().flat_map(|t| t.origin.iter().map(|e| e.id.clone())).collect();
    assert_eq!(seen.len(), 128);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn support_query_partition(n in 0usize..40, seed in any::<u64>()) {
        let batch: Vec<usize> = (0..2 * n).collect();
        let s = support_query_split(&batch, seed).unwrap();
        prop_assert_eq!(s.support.len(), s.query.len());
        let sup: BTreeSet<_> = s.support.iter().copied().collect();
        let qry: BTreeSet<_> = s.query.iter().copied().collect();
        prop_assert!(sup.is_disjoint(&qry));
        let all: Vec<usize> = sup.union(&qry).copied().collect();
        prop_assert_eq!(all, batch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn triples_are_aligned_and_reproducible(n in 2usize..40, half in 1usize..10, seed in any::<u64>()) {
        let bundle = obfuscation_bundle(n);
        let batch = 2 * half;
        prop_assume!(batch <= n);
        let triples = batch_triples(&bundle, batch, seed).unwrap();
        prop_assert_eq!(triples.len(), n / batch);
        for (step, t) in triples.iter().enumerate() {
            prop_assert_eq!(t.step, step);
            prop_assert_eq!((t.origin.len(), t.l2.len(), t.l3.len()), (batch, batch, batch));
            for ((a, b), c) in t.origin.iter().zip(&t.l2).zip(&t.l3) {
                prop_assert!(a.id == b.id && a.id == c.id && a.docstring == c.docstring);
            }
        }
        prop_assert_eq!(batch_triples(&bundle, batch, seed).unwrap(), triples);
    }
}
