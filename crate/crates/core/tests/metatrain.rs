//! Meta step against an exact rational oracle, reduction identities,
//! schedule semantics, traces and determinism.

mod common;

use curricode_core::corpus::split;
use curricode_core::curriculum::{build_semantic_obfuscation, support_query_order, BuildOptions, CurriculumBundle};
use curricode_core::metatrain::{
    build_vocab, meta_step, sgd, synthetic_corpus, train, EncodedBundle, EvalSet, MetaBatch, MetaOrder, ModelObjective,
    Objective, Rates, Schedule, TrainError, TrainOptions, TrainerConfig,
};
use curricode_core::minimodel::{grad, init_params, load_checkpoint, Encoded, ParamVector, Vocab};
use serde::Deserialize;

use common::data_path;

/// `1/|B| Σ ½ (a θ0 + b θ1 − c)²`.
struct Quadratic;

type Rows = Vec<[f64; 3]>;

impl Objective for Quadratic {
    type Batch = Rows;

    fn loss_grad(&self, t: &[f64], rows: &Rows) -> Result<(f64, Vec<f64>), TrainError> {
        let n = rows.len() as f64;
        let (mut l, mut g) = (0.0, vec![0.0, 0.0]);
        for [a, b, c] in rows {
            let r = a * t[0] + b * t[1] - c;
            l += 0.5 * r * r / n;
            g[0] += r * a / n;
            g[1] += r * b / n;
        }
        Ok((l, g))
    }

    fn hvp(&self, _: &[f64], rows: &Rows, v: &[f64]) -> Result<Vec<f64>, TrainError> {
        let n = rows.len() as f64;
        let mut out = vec![0.0, 0.0];
        for [a, b, _] in rows {
            let dot = a * v[0] + b * v[1];
            out[0] += a * dot / n;
            out[1] += b * dot / n;
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct ToyCase {
    theta: Vec<f64>,
    origin: Rows,
    support: [Rows; 2],
    query: [Rows; 2],
    alpha: f64,
    beta: f64,
    gamma: f64,
    weight_decay: f64,
    first_order: Vec<f64>,
    exact: Vec<f64>,
}

#[test]
fn quadratic_meta_step_matches_rational_oracle() {
    let case: ToyCase = serde_json::from_str(&std::fs::read_to_string(data_path("golden/meta_step_toy.json")).unwrap()).unwrap();
    let batch = MetaBatch { origin: &case.origin, support: [&case.support[0], &case.support[1]], query: [&case.query[0], &case.query[1]] };
    let rates = Rates { alpha: case.alpha, beta: case.beta, gamma: case.gamma };
    for (order, expected) in [(MetaOrder::FirstOrder, &case.first_order), (MetaOrder::Exact, &case.exact)] {
        let cfg = TrainerConfig { weight_decay: case.weight_decay, meta_order: order, ..Default::default() };
        let (theta, rec) = meta_step(&Quadratic, &case.theta, &batch, rates, &cfg, 0).unwrap();
        for (a, b) in theta.iter().zip(expected) {
            assert!((a - b).abs() < 5e-13, "{order:?}: {a} vs {b}");
        }
        assert_eq!(rec.hash_after_origin, rec.hash_after_inner);
    }
}

fn desk_bundle(n: usize, seed: u64) -> (CurriculumBundle, Vocab, EncodedBundle) {
    let bundle = build_semantic_obfuscation(&synthetic_corpus(n, seed), BuildOptions::default()).unwrap();
    let vocab = build_vocab(&bundle, 1, None);
    let enc = EncodedBundle::new(&bundle, &vocab);
    (bundle, vocab, enc)
}

fn desk_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        alpha: 0.5,
        beta: 0.5,
        gamma: 0.5,
        batch_size: 16,
        epochs: 3,
        weight_decay: 0.01,
        warmup_steps: Some(5),
        seed,
        trace_param_hashes: true,
        ..Default::default()
    }
}

#[test]
fn zero_gamma_reduces_to_origin_fine_tuning() {
    let (_, vocab, enc) = desk_bundle(128, 1);
    let init = init_params(vocab.len(), 8, 16, 1);
    let cfg = TrainerConfig { gamma: 0.0, ..desk_config(1) };
    let a = train(Schedule::Roft, &enc, init.clone(), &cfg, TrainOptions::default()).unwrap();
    let b = train(Schedule::FtOrigin, &enc, init, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(a.trace.steps.len(), b.trace.steps.len());
    for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
        assert_eq!(x.param_hash, y.param_hash, "step {}", x.step);
    }
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn zero_beta_meta_phase_is_pooled_query_sgd() {
    let (_, vocab, enc) = desk_bundle(32, 2);
    let p = init_params(vocab.len(), 8, 16, 2);
    let obj = ModelObjective { dims: p.dims };
    let idx: Vec<usize> = (0..16).collect();
    let order = support_query_order(16, 9).unwrap();
    let pick = |level: usize, ids: &[usize]| -> Vec<Encoded> { ids.iter().map(|&i| enc.levels[level][idx[i]].clone()).collect() };
    let origin = pick(0, &idx);
    let (s, q) = (&order[..8], &order[8..]);
    let support = [pick(1, s), pick(2, s)];
    let query = [pick(1, q), pick(2, q)];
    let batch = MetaBatch { origin: &origin[..], support: [&support[0][..], &support[1][..]], query: [&query[0][..], &query[1][..]] };
    let rates = Rates { alpha: 0.3, beta: 0.0, gamma: 0.7 };
    let cfg = TrainerConfig { weight_decay: 0.0, ..Default::default() };
    let (theta, _) = meta_step(&obj, &p.data, &batch, rates, &cfg, 0).unwrap();

    let after_alpha = sgd(&p.data, &grad(&p, &origin).unwrap().data, 0.3, 0.0);
    let at = ParamVector { dims: p.dims, data: after_alpha.clone() };
    let g2 = grad(&at, &query[0]).unwrap();
    let g3 = grad(&at, &query[1]).unwrap();
    let expected: Vec<f64> = after_alpha.iter().zip(g2.data.iter().zip(&g3.data)).map(|(t, (a, b))| t - 0.7 * (a + b)).collect();
    let worst = theta.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn exact_mode_differs_from_first_order() {
    let (_, vocab, enc) = desk_bundle(32, 4);
    let init = init_params(vocab.len(), 8, 16, 4);
    let base = TrainerConfig { epochs: 1, ..desk_config(4) };
    let fo = train(Schedule::Roft, &enc, init.clone(), &base, TrainOptions::default()).unwrap();
    let ex = train(Schedule::Roft, &enc, init, &TrainerConfig { meta_order: MetaOrder::Exact, ..base }, TrainOptions::default()).unwrap();
    assert_ne!(fo.checkpoints[0], ex.checkpoints[0]);
    assert!(ex.checkpoints[0].is_finite());
}

#[test]
fn schedule_step_counts_and_phases() {
    let (_, vocab, enc) = desk_bundle(70, 3);
    let init = init_params(vocab.len(), 8, 16, 3);
    let cfg = desk_config(3);
    let per_epoch = 70 / 16;
    let run = |s| train(s, &enc, init.clone(), &cfg, TrainOptions::default()).unwrap();

    let roft = run(Schedule::Roft);
    assert_eq!(roft.trace.steps.len(), per_epoch * 3);
    assert!(roft.trace.steps.iter().all(|s| s.phase == "meta" && s.losses.len() == 3));
    assert!(roft.trace.steps.iter().enumerate().all(|(i, s)| s.step == i));

    let cl = run(Schedule::Cl);
    for (epoch, level) in [(1, "L1"), (2, "L2"), (3, "L3")] {
        assert!(cl.trace.steps.iter().filter(|s| s.epoch == epoch).all(|s| s.phase == level));
    }
    let claw = run(Schedule::Clawsat);
    let phases: Vec<&str> = claw.trace.steps.iter().take(6).map(|s| s.phase.as_str()).collect();
    assert_eq!(phases, ["L1", "L2", "L3", "L1", "L2", "L3"]);
    assert_eq!(run(Schedule::FtAll).trace.steps.len(), (3 * 70 / 16) * 3);
    assert_eq!(run(Schedule::FtOrigin).trace.steps.len(), per_epoch * 3);
    let zero = run(Schedule::ZeroShot);
    assert!(zero.trace.steps.is_empty() && zero.checkpoints.is_empty());
    assert_eq!(zero.best(), &init);
}

#[test]
fn origin_fine_tuning_ignores_empty_levels() {
    let (_, vocab, enc) = desk_bundle(40, 5);
    let init = init_params(vocab.len(), 8, 16, 5);
    let cfg = desk_config(5);
    let only_l1 = EncodedBundle { ids: enc.ids.clone(), levels: [enc.levels[0].clone(), vec![], vec![]] };
    let a = train(Schedule::FtOrigin, &enc, init.clone(), &cfg, TrainOptions::default()).unwrap();
    let b = train(Schedule::FtOrigin, &only_l1, init.clone(), &cfg, TrainOptions::default()).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert!(matches!(train(Schedule::Roft, &only_l1, init, &cfg, TrainOptions::default()), Err(TrainError::Misaligned(_))));
}

#[test]
fn origin_loss_falls_on_overfit_corpus() {
    let (_, vocab, enc) = desk_bundle(64, 6);
    let init = init_params(vocab.len(), 16, 32, 6);
    let cfg = TrainerConfig { alpha: 1.0, beta: 1.0, gamma: 1.0, batch_size: 8, epochs: 4, warmup_steps: Some(0), weight_decay: 0.0, seed: 6, ..Default::default() };
    let out = train(Schedule::Roft, &enc, init, &cfg, TrainOptions::default()).unwrap();
    let means: Vec<f64> = out.trace.epochs.iter().map(|e| e.train_loss["L1"]).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    let first: Vec<f64> = out.trace.steps.iter().filter(|s| s.epoch == 1).map(|s| s.losses["L1"]).collect();
    let half = first.len() / 2;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&first[half..]) < mean(&first[..half]));
}

#[test]
fn validation_checkpoints_and_trace_files() {
    let data = synthetic_corpus(120, 8);
    let (tr, va, _) = split(&data, [0.8, 0.1, 0.1], 8).unwrap();
    let trb = build_semantic_obfuscation(&tr, BuildOptions::default()).unwrap();
    let vab = build_semantic_obfuscation(&va, BuildOptions::default()).unwrap();
    let vocab = build_vocab(&trb, 1, None);
    let enc = EncodedBundle::new(&trb, &vocab);
    let val = EvalSet::new(&vab, &vocab);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { validation: Some((&val, &vocab)), checkpoint_dir: Some(dir.path()), vocab_hash: &vocab.hash() };
    let out = train(Schedule::Roft, &enc, init_params(vocab.len(), 8, 16, 8), &desk_config(8), opts).unwrap();
    let sel = out.trace.selected_epoch.unwrap();
    assert!((1..=3).contains(&sel));
    assert!(out.trace.epochs.iter().all(|e| e.validation.is_some()));
    let (header, params) = load_checkpoint(dir.path().join(format!("ckpt_epoch{sel}.bin"))).unwrap();
    assert_eq!(&params, out.best());
    assert_eq!(header.vocab_hash, vocab.hash());
    out.trace.write(dir.path()).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count();
    assert_eq!(lines, out.trace.steps.len());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["selected_epoch"], sel);
}

#[test]
fn identical_configs_give_identical_traces() {
    let (_, vocab, enc) = desk_bundle(48, 9);
    let init = init_params(vocab.len(), 8, 16, 9);
    let cfg = desk_config(9);
    let a = train(Schedule::Roft, &enc, init.clone(), &cfg, TrainOptions::default()).unwrap();
    let b = train(Schedule::Roft, &enc, init, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_configs_are_rejected() {
    let (_, vocab, enc) = desk_bundle(8, 1);
    let init = init_params(vocab.len(), 4, 4, 1);
    for cfg in [
        TrainerConfig { batch_size: 3, ..Default::default() },
        TrainerConfig { alpha: -1.0, batch_size: 4, ..Default::default() },
        TrainerConfig { gamma: f64::NAN, batch_size: 4, ..Default::default() },
    ] {
        assert!(matches!(train(Schedule::Roft, &enc, init.clone(), &cfg, TrainOptions::default()), Err(TrainError::BadConfig(_))));
    }
    let big = TrainerConfig { batch_size: 16, ..Default::default() };
    assert!(matches!(train(Schedule::FtOrigin, &enc, init, &big, TrainOptions::default()), Err(TrainError::Curriculum(_))));
}
