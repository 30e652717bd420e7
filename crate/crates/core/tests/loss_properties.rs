mod common;

use common::{rel_diff, rng, unit_rows};
use proptest::prelude::*;
use vprior_core::losses::{
    info_nce_loss, margin_info_nce_loss, margin_info_nce_loss_with_grad, ContrastiveBatch, ContrastiveLossConfig,
};
use vprior_core::Matrix;

fn batch(b: usize, n: usize, d: usize, seed: u64) -> ContrastiveBatch {
    let mut r = rng(seed);
    let q = unit_rows(b, d, &mut r);
    let kp = unit_rows(b, d, &mut r);
    let kn = unit_rows(n, d, &mut r);
    ContrastiveBatch::new(q, kp, kn).unwrap()
}

/// Unstabilized (N+1)-way softmax cross-entropy, written independently of the library.
fn softmax_oracle(batch: &ContrastiveBatch, tau: f64, margin: f64) -> f64 {
    let q = batch.queries();
    let mut total = 0.0;
    for i in 0..q.rows() {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pos = ((dot(q.row(i), batch.positives().row(i)) - margin) / tau).exp();
        let neg: f64 = batch
            .negatives()
            .iter_rows()
            .map(|k| (dot(q.row(i), k) / tau).exp())
            .sum();
        total += -(pos / (pos + neg)).ln();
    }
    total / q.rows() as f64
}

/// Loss as an explicit function of the query entries, with logits `q·k / τ`
/// that stay valid off the unit sphere.
fn loss_at(q: &Matrix, batch: &ContrastiveBatch, tau: f64, margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut logits = vec![(dot(q.row(i), batch.positives().row(i)) - margin) / tau];
        logits.extend(batch.negatives().iter_rows().map(|k| dot(q.row(i), k) / tau));
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    total / q.rows() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn zero_margin_equals_plain(b in 1usize..6, n in 1usize..24, d in 2usize..10, seed in any::<u64>()) {
        let bt = batch(b, n, d, seed);
        let plain = info_nce_loss(&bt, &ContrastiveLossConfig { temperature: 0.2, margin: 0.6 }).unwrap();
        let m0 = margin_info_nce_loss(&bt, &ContrastiveLossConfig { temperature: 0.2, margin: 0.0 }).unwrap();
        prop_assert!(rel_diff(plain, m0) <= 1e-12);
    }

    #[test]
    fn losses_match_softmax_oracle(
        b in 1usize..6, n in 1usize..24, d in 2usize..10, seed in any::<u64>(),
        tau in 0.1f64..1.0, margin in 0.0f64..0.99,
    ) {
        let bt = batch(b, n, d, seed);
        let cfg = ContrastiveLossConfig { temperature: tau, margin };
        prop_assert!(rel_diff(info_nce_loss(&bt, &cfg).unwrap(), softmax_oracle(&bt, tau, 0.0)) <= 1e-9);
        prop_assert!(rel_diff(margin_info_nce_loss(&bt, &cfg).unwrap(), softmax_oracle(&bt, tau, margin)) <= 1e-9);
    }

    #[test]
    fn negative_order_is_irrelevant(b in 1usize..5, n in 2usize..20, d in 2usize..8, seed in any::<u64>(), shift in 1usize..19) {
        let bt = batch(b, n, d, seed);
        let rows: Vec<Vec<f64>> = bt.negatives().iter_rows().map(<[f64]>::to_vec).collect();
        let mut rotated = rows.clone();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        let permuted = ContrastiveBatch::new(bt.queries().clone(), bt.positives().clone(), Matrix::from_rows(&rotated).unwrap()).unwrap();
        let cfg = ContrastiveLossConfig::default();
        prop_assert!(rel_diff(info_nce_loss(&bt, &cfg).unwrap(), info_nce_loss(&permuted, &cfg).unwrap()) <= 1e-12);
        prop_assert!(rel_diff(margin_info_nce_loss(&bt, &cfg).unwrap(), margin_info_nce_loss(&permuted, &cfg).unwrap()) <= 1e-12);
    }

    #[test]
    fn monotone_in_similarities(b in 1usize..4, n in 1usize..10, d in 2usize..8, seed in any::<u64>(), delta in 0.01f64..0.5) {
        // Shifting the positive key toward the query raises q·k⁺; shifting a
        // negative toward it raises q·k⁻.
        let bt = batch(b, n, d, seed);
        let cfg = ContrastiveLossConfig::default();
        let base = margin_info_nce_loss(&bt, &cfg).unwrap();
        let toward = |k: &[f64], q: &[f64]| {
            let mut v: Vec<f64> = k.iter().zip(q).map(|(a, b)| a + delta * b).collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nrm);
            v
        };
        let q0 = bt.queries().row(0).to_vec();
        let old_pos = bt.positives().row(0).to_vec();
        let new_pos = toward(&old_pos, &q0);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        if dot(&new_pos, &q0) >= dot(&old_pos, &q0) {
            let mut pos = bt.positives().clone();
            pos.row_mut(0).copy_from_slice(&new_pos);
            let moved = ContrastiveBatch::new(bt.queries().clone(), pos, bt.negatives().clone()).unwrap();
            prop_assert!(margin_info_nce_loss(&moved, &cfg).unwrap() <= base + 1e-12);
        }
        let old_neg = bt.negatives().row(0).to_vec();
        let new_neg = toward(&old_neg, &q0);
        if dot(&new_neg, &q0) >= dot(&old_neg, &q0) {
            let mut neg = bt.negatives().clone();
            neg.row_mut(0).copy_from_slice(&new_neg);
            // Only query 0 is guaranteed to see a larger q·k⁻; use a one-query batch.
            let single = ContrastiveBatch::new(
                Matrix::from_rows(std::slice::from_ref(&q0)).unwrap(),
                Matrix::from_rows(std::slice::from_ref(&old_pos)).unwrap(),
                bt.negatives().clone(),
            ).unwrap();
            let single_moved = ContrastiveBatch::new(
                Matrix::from_rows(std::slice::from_ref(&q0)).unwrap(),
                Matrix::from_rows(std::slice::from_ref(&old_pos)).unwrap(),
                neg,
            ).unwrap();
            prop_assert!(margin_info_nce_loss(&single_moved, &cfg).unwrap() >= margin_info_nce_loss(&single, &cfg).unwrap() - 1e-12);
        }
    }
}

#[test]
fn query_gradient_matches_central_differences() {
    let cfg = ContrastiveLossConfig::default();
    let h = 1e-5;
    for seed in 0..25u64 {
        let bt = batch(1 + (seed as usize % 4), 3 + seed as usize % 9, 4 + seed as usize % 5, seed);
        let (_, grad) = margin_info_nce_loss_with_grad(&bt, &cfg).unwrap();
        let q = bt.queries().clone();
        let mut num = Vec::new();
        for idx in 0..q.as_slice().len() {
            let mut up = q.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = q.clone();
            down.as_mut_slice()[idx] -= h;
            num.push((loss_at(&up, &bt, cfg.temperature, cfg.margin) - loss_at(&down, &bt, cfg.temperature, cfg.margin)) / (2.0 * h));
        }
        let diff: f64 = num.iter().zip(grad.queries.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-4, "seed {seed}: relative error {}", diff / scale);
    }
}

#[test]
fn loss_at_agrees_with_library_on_the_sphere() {
    let bt = batch(3, 7, 5, 11);
    let cfg = ContrastiveLossConfig::default();
    let lib = margin_info_nce_loss(&bt, &cfg).unwrap();
    assert!(rel_diff(lib, loss_at(bt.queries(), &bt, cfg.temperature, cfg.margin)) < 1e-12);
}
