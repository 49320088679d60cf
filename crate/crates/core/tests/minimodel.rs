//! Model oracles: finite-difference gradients, an independent forward
//! recomputation of the loss, and softmax/loss properties.

use curricode_core::minimodel::{
    greedy_decode, grad, init_params, loss, next_token_probs, Dims, Encoded, ParamVector, EOS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(r: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<Encoded> {
    (0..n)
        .map(|_| {
            let sl = r.random_range(0..8);
            let tl = r.random_range(0..5);
            let mut target: Vec<u32> = (0..tl).map(|_| r.random_range(4..vocab as u32)).collect();
            target.push(EOS);
            Encoded { source: (0..sl).map(|_| r.random_range(0..vocab as u32)).collect(), target }
        })
        .collect()
}

fn perturbed(p: &ParamVector, r: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    let mut q = p.clone();
    for x in &mut q.data {
        *x += r.random_range(-scale..scale);
    }
    q
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for draw in 0..5 {
        let p = perturbed(&init_params(30, 6, 8, draw), &mut r, 0.5);
        let b = random_batch(&mut r, 30, 4);
        let g = grad(&p, &b).unwrap();
        for _ in 0..200 {
            let i = r.random_range(0..p.len());
            let mut hi = p.clone();
            hi.data[i] += eps;
            let mut lo = p.clone();
            lo.data[i] -= eps;
            let fd = (loss(&hi, &b).unwrap() - loss(&lo, &b).unwrap()) / (2.0 * eps);
            let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

/// Independent forward pass written directly from the model definition.
fn reference_loss(p: &ParamVector, batch: &[Encoded]) -> f64 {
    let Dims { vocab, d, d_out } = p.dims;
    let e = |tok: u32, k: usize| p.data[tok as usize * d + k];
    let w0 = vocab * d;
    let b0 = w0 + d_out * 2 * d;
    let u0 = b0 + d_out;
    let mut sum = 0.0;
    for ex in batch {
        let ctx: Vec<f64> = (0..d)
            .map(|k| if ex.source.is_empty() { 0.0 } else { ex.source.iter().map(|&t| e(t, k)).sum::<f64>() / ex.source.len() as f64 })
            .collect();
        let mut nll = 0.0;
        for (t, &y) in ex.target.iter().enumerate() {
            let prev = if t == 0 { 0 } else { ex.target[t - 1] };
            let z: Vec<f64> = ctx.iter().copied().chain((0..d).map(|k| e(prev, k))).collect();
            let h: Vec<f64> = (0..d_out)
                .map(|j| (p.data[b0 + j] + (0..2 * d).map(|k| p.data[w0 + j * 2 * d + k] * z[k]).sum::<f64>()).tanh())
                .collect();
            let scores: Vec<f64> = (0..vocab).map(|i| (0..d_out).map(|j| p.data[u0 + i * d_out + j] * h[j]).sum()).collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            nll -= (scores[y as usize].exp() / denom).ln();
        }
        sum += nll / ex.target.len() as f64;
    }
    sum / batch.len() as f64
}

#[test]
fn loss_matches_direct_recomputation() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let p = perturbed(&init_params(25, 5, 7, seed), &mut r, 0.3);
        let b = random_batch(&mut r, 25, 3);
        let (a, o) = (loss(&p, &b).unwrap(), reference_loss(&p, &b));
        assert!((a - o).abs() < 1e-12, "{a} vs {o}");
    }
}

#[test]
fn decoding_is_deterministic() {
    let p = init_params(40, 8, 8, 3);
    let src = [5, 9, 12, 30];
    assert_eq!(greedy_decode(&p, &src, 128), greedy_decode(&p, &src, 128));
    assert!(greedy_decode(&p, &src, 128).len() <= 128);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_normalized_and_loss_nonnegative(seed in any::<u64>(), scale in 0.0..3.0f64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = perturbed(&init_params(20, 4, 6, seed), &mut r, scale.max(1e-9));
        let b = random_batch(&mut r, 20, 3);
        prop_assert!(loss(&p, &b).unwrap() >= 0.0);
        for ex in &b {
            let s: f64 = next_token_probs(&p, &ex.source, ex.target[0]).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_loss_is_log_vocab(vocab in 5usize..60, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = ParamVector::zeros(Dims { vocab, d: 3, d_out: 4 });
        let b = random_batch(&mut r, vocab, 4);
        prop_assert!((loss(&p, &b).unwrap() - (vocab as f64).ln()).abs() < 1e-12);
    }
}
