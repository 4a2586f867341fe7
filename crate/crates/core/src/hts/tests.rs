use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::check::{check_gradients, GradCheck};
use crate::numerics::{softmax_last, Tape, Tensor, Var};
use crate::params::ParamStore;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn predictor_store(dim: usize, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    init_predictor(&mut store, 0, dim, &mut rng(seed));
    // widen the weights so the predictor is visibly input-sensitive
    for (_, e) in store.iter_mut() {
        let t = e.tensor.clone();
        e.tensor = t.scale(25.0);
    }
    store
}

#[test]
fn predictor_rows_sum_to_one_and_zeroed_tokens_agree() {
    let store = predictor_store(8, 1);
    let tape = Tape::<f64>::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(randn(&[2, 5, 8], 2));
    let mask = tape.constant(Tensor::from_f64(vec![2, 5], &[1., 0., 1., 0., 1., 0., 1., 1., 1., 0.]).unwrap());
    let pi = predict_keep_probs(&p, 0, x, Some(mask)).unwrap().value();
    for r in pi.rows() {
        assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
    }
    let zero_rows: Vec<&[f64]> = pi.rows().enumerate().filter(|(i, _)| [1, 3, 5, 9].contains(i)).map(|(_, r)| r).collect();
    for r in &zero_rows[1..] {
        assert_eq!(*r, zero_rows[0]);
    }
    let at_zero = predict_keep_probs(&p, 0, tape.constant(Tensor::zeros(vec![1, 1, 8])), None).unwrap().value();
    assert_eq!(at_zero.data(), zero_rows[0]);
}

#[test]
fn predictor_responds_to_token_scale() {
    let store = predictor_store(8, 3);
    let tape = Tape::<f64>::new();
    let p = store.bind(&tape, false);
    let x = randn(&[1, 1, 8], 4);
    let a = predict_keep_probs(&p, 0, tape.constant(x.clone()), None).unwrap().value();
    let b = predict_keep_probs(&p, 0, tape.constant(x.scale(2.0)), None).unwrap().value();
    assert!((a.data()[1] - b.data()[1]).abs() > 1e-6, "{a:?} vs {b:?}");
}

#[test]
fn degenerate_keep_probability_always_keeps() {
    let pi = Tensor::<f64>::from_f64(vec![3, 2], &[0., 1., 0., 1., 1., 0.]).unwrap();
    let mut r = rng(5);
    for _ in 0..1000 {
        let d = gumbel_sample(&pi, 1.0, &mut r).unwrap();
        assert_eq!(d.data(), &[1., 1., 0.]);
    }
}

#[test]
fn gumbel_keep_rate_matches_probability() {
    let pi = Tensor::<f64>::from_f64(vec![1, 2], &[0.3, 0.7]).unwrap();
    let mut r = rng(6);
    let n = 200_000;
    let kept: f64 = (0..n).map(|_| gumbel_sample(&pi, GUMBEL_TAU, &mut r).unwrap().item()).sum();
    assert!((kept / n as f64 - 0.7).abs() <= 0.005, "{}", kept / n as f64);
}

#[test]
fn soft_relaxation_gradient_matches_central_differences() {
    let noise: Tensor<f64> = gumbel_noise(vec![2, 3, 2], &mut rng(7));
    let w = randn(&[2, 3], 8);
    let r = check_gradients(&[randn(&[2, 3, 2], 9)], GradCheck { step: 1e-5, coords: 12, ..Default::default() }, |tape, v| {
        let d = gumbel_keep(v[0].log_softmax_last(), &noise, 1.0, Relaxation::Soft)?;
        Ok(d.mul(tape.constant(w.clone()))?.mean())
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

#[test]
fn straight_through_forward_is_hard_and_backward_is_soft() {
    let noise: Tensor<f64> = gumbel_noise(vec![1, 6, 2], &mut rng(10));
    let logits = randn(&[1, 6, 2], 11);
    let grad_for = |relax| {
        let tape = Tape::<f64>::new();
        let l = tape.param(&logits);
        let d = gumbel_keep(l.log_softmax_last(), &noise, 1.0, relax).unwrap();
        let value = d.value();
        d.sum().backward().unwrap();
        ((*value).clone(), tape.grad(l).unwrap())
    };
    let (hard, g_st) = grad_for(Relaxation::StraightThrough);
    let (soft, g_soft) = grad_for(Relaxation::Soft);
    assert!(hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
    for (h, s) in hard.data().iter().zip(soft.data()) {
        assert_eq!(*h, if *s > 0.5 { 1.0 } else { 0.0 });
    }
    assert_eq!(g_st, g_soft);
}

#[test]
fn mask_update_examples() {
    let tape = Tape::<f64>::new();
    let m = |v: &[f64]| tape.constant(Tensor::from_f64(vec![v.len()], v).unwrap());
    assert_eq!(update_mask(m(&[1., 1., 0.]), m(&[1., 0., 1.])).unwrap().value().data(), &[1., 0., 0.]);
    assert_eq!(update_mask(m(&[1., 1., 1.]), m(&[0., 1., 0.])).unwrap().value().data(), &[0., 1., 0.]);
}

proptest! {
    #[test]
    fn mask_update_never_revives(prev in proptest::collection::vec(0u8..2, 1..32), seed in any::<u64>()) {
        let mut r = rng(seed);
        let cur: Vec<f64> = prev.iter().map(|_| r.gen_range(0..2) as f64).collect();
        let prev: Vec<f64> = prev.into_iter().map(f64::from).collect();
        let tape = Tape::<f64>::new();
        let n = prev.len();
        let out = update_mask(
            tape.constant(Tensor::new(vec![n], prev.clone()).unwrap()),
            tape.constant(Tensor::new(vec![n], cur).unwrap()),
        ).unwrap().value();
        prop_assert!(out.data().iter().zip(&prev).all(|(a, b)| a <= b));
    }

    #[test]
    fn ratio_loss_nonnegative_and_zero_iff_on_target(bits in proptest::collection::vec(0u8..2, 8)) {
        let schedule = SparsifySchedule::new(vec![1], 0.5).unwrap();
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(vec![2, 4], bits.iter().map(|&b| f64::from(b)).collect()).unwrap());
        let loss = ratio_loss(&[m], &schedule).unwrap().item();
        prop_assert!(loss >= 0.0);
        let on_target = bits.chunks(4).all(|r| r.iter().map(|&b| b as usize).sum::<usize>() == 2);
        prop_assert_eq!(loss == 0.0, on_target);
    }
}

fn attention_inputs(b: usize, l: usize, c: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (randn(&[b, l, c], seed), randn(&[b, l, c], seed + 1), randn(&[b, l, c], seed + 2))
}

#[test]
fn all_ones_mask_is_plain_softmax() {
    let (q, k, _) = attention_inputs(1, 5, 4, 20);
    let q = q.reshape(vec![5, 4]).unwrap();
    let k = k.reshape(vec![5, 4]).unwrap();
    let masked = attention_weights(&q, &k, Some(&[1.0; 5])).unwrap();
    let mut logits = crate::numerics::matmul(&q, &Tensor::from_fn(vec![4, 5], |i| k.data()[(i % 5) * 4 + i / 5])).unwrap();
    logits = logits.scale(0.5);
    let plain = softmax_last(&logits);
    for (a, b) in masked.data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn dropped_token_contributes_only_to_itself() {
    let (q, k, _) = attention_inputs(1, 6, 4, 30);
    let q = q.reshape(vec![6, 4]).unwrap();
    let k = k.reshape(vec![6, 4]).unwrap();
    let a = attention_weights(&q, &k, Some(&[1., 1., 0., 1., 0., 1.])).unwrap();
    for i in 0..6 {
        for j in [2, 4] {
            let v = a.data()[i * 6 + j];
            if i == j {
                assert!(v > 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!((a.data()[i * 6..(i + 1) * 6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Dense attention computed over an explicit subsequence, by loops.
fn dense_subset_attention(q: &[f64], k: &[f64], v: &[f64], c: usize, heads: usize, keep: &[usize]) -> Vec<Vec<f64>> {
    let dh = c / heads;
    keep.iter()
        .map(|&i| {
            let mut out = vec![0.0; c];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = keep
                    .iter()
                    .map(|&j| cols.clone().map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(keep) {
                    for t in cols.clone() {
                        out[t] += w / z * v[j * c + t];
                    }
                }
            }
            out
        })
        .collect()
}

#[test]
fn kept_rows_match_dense_attention_on_pruned_sequence() {
    let mut r = rng(40);
    for case in 0..50 {
        let l = r.gen_range(2..=12);
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=8);
        let (q, k, v) = attention_inputs(1, l, c, 1000 + case);
        let mut mask: Vec<f64> = (0..l).map(|_| r.gen_range(0..2) as f64).collect();
        mask[0] = 1.0;
        let tape = Tape::<f64>::new();
        let out = masked_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            Some(tape.constant(Tensor::new(vec![1, l], mask.clone()).unwrap())),
            heads,
        )
        .unwrap()
        .value();
        let keep: Vec<usize> = (0..l).filter(|&j| mask[j] == 1.0).collect();
        let dense = dense_subset_attention(q.data(), k.data(), v.data(), c, heads, &keep);
        for (row, &i) in dense.iter().zip(&keep) {
            for t in 0..c {
                assert!((row[t] - out.data()[i * c + t]).abs() <= 1e-10, "case {case}");
            }
        }
    }
}

#[test]
fn masked_attention_gradients_including_soft_mask() {
    let (q, k, v) = attention_inputs(2, 5, 6, 50);
    let mask = Tensor::from_fn(vec![2, 5], |i| if i % 5 == 0 { 1.0 } else { 0.2 + 0.15 * (i % 5) as f64 });
    let w = randn(&[2, 5, 6], 55);
    let r = check_gradients(&[q, k, v, mask], GradCheck::default(), |tape, x| {
        let out = masked_attention(x[0], x[1], x[2], Some(x[3]), 2)?;
        Ok(out.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

#[test]
fn class_attention_sums_to_one_and_differentiates() {
    let (q, k, _) = attention_inputs(2, 6, 8, 60);
    let mask = Tensor::from_fn(vec![2, 6], |i| if i % 6 == 0 { 1.0 } else { 0.3 + 0.1 * (i % 6) as f64 });
    let tape = Tape::<f64>::new();
    let a = class_attention(tape.constant(q.clone()), tape.constant(k.clone()), None, 2).unwrap().value();
    for r in a.rows() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let w = randn(&[2, 6], 61);
    let r = check_gradients(&[q, k, mask], GradCheck::default(), |tape, x| {
        Ok(class_attention(x[0], x[1], Some(x[2]), 2)?.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

#[test]
fn reweight_with_zero_scale_is_identity() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[2, 4, 3], 70));
    let attn = tape.constant(softmax_last(&randn(&[2, 4], 71)));
    let zero = tape.constant(Tensor::scalar(0.0));
    let y = class_attn_reweight(x, attn, zero).unwrap();
    assert_eq!(*y.value(), *x.value());

    let half = tape.constant(Tensor::scalar(REWEIGHT_INIT));
    let y = class_attn_reweight(x, attn, half).unwrap().value();
    let (xv, av) = (x.value(), attn.value());
    // class token scaled by 1 + λ, image token i by 1 + λ·a_i
    assert!((y.data()[0] - 1.5 * xv.data()[0]).abs() < 1e-15);
    let a1 = av.data()[1];
    assert!((y.data()[3] - (1.0 + 0.5 * a1) * xv.data()[3]).abs() < 1e-15);
    assert!(class_attn_reweight(x, tape.constant(Tensor::ones(vec![2, 3])), half).is_err());
}

#[test]
fn ratio_loss_worked_values() {
    let schedule = SparsifySchedule::new(vec![1], 0.5).unwrap();
    let tape = Tape::<f64>::new();
    let m = |v: &[f64], b: usize| tape.constant(Tensor::from_f64(vec![b, v.len() / b], v).unwrap());
    let exact = ratio_loss(&[m(&[1., 1., 0., 0.], 1)], &schedule).unwrap().item();
    let full = ratio_loss(&[m(&[1., 1., 1., 1.], 1)], &schedule).unwrap().item();
    let averaged = ratio_loss(&[m(&[1., 1., 0., 0., 1., 1., 1., 1.], 2)], &schedule).unwrap().item();
    assert_eq!(exact, 0.0);
    assert!((full - 0.25).abs() <= 1e-12);
    assert!((averaged - 0.125).abs() <= 1e-12);
}

#[test]
fn ratio_loss_sums_over_stages() {
    let schedule = SparsifySchedule::new(vec![1, 2], 0.5).unwrap();
    let tape = Tape::<f64>::new();
    let s1 = tape.constant(Tensor::from_f64(vec![1, 4], &[1., 1., 0., 0.]).unwrap());
    let s2 = tape.constant(Tensor::from_f64(vec![1, 4], &[1., 1., 0., 0.]).unwrap());
    // stage 2 target 0.25, realised 0.5
    assert!((ratio_loss(&[s1, s2], &schedule).unwrap().item() - 0.0625).abs() <= 1e-12);
    assert!(ratio_loss(&[s1], &schedule).is_err());
}

#[test]
fn top_k_breaks_ties_to_lower_index() {
    assert_eq!(top_k_positions(&[0.9, 0.1, 0.9, 0.5], 2), vec![0, 2]);
    assert_eq!(top_k_positions(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
    assert_eq!(top_k_positions(&[0.1, 0.2, 0.3], 3), vec![0, 1, 2]);
}

#[test]
fn pruning_keeps_requested_tokens_in_grid_order() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![1, 5, 2], |i| i as f64));
    let probs = Tensor::from_f64(vec![1, 4], &[0.9, 0.1, 0.9, 0.5]).unwrap();
    let survivors = vec![vec![3, 5, 6, 7]];
    let p = prune_for_inference(x, &probs, &survivors, 2).unwrap();
    assert_eq!(p.survivors, vec![vec![3, 6]]);
    assert_eq!(p.tokens.value().data(), &[0., 1., 2., 3., 6., 7.]);

    let all = prune_for_inference(x, &probs, &survivors, 4).unwrap();
    assert_eq!(*all.tokens.value(), *x.value());
    assert_eq!(all.survivors, survivors);
    let over = prune_for_inference(x, &probs, &survivors, 9).unwrap();
    assert_eq!(over.survivors, survivors);
}

#[test]
fn soft_masks_flow_gradient_through_whole_stage() {
    // predictor -> soft Gumbel -> cumulative mask -> masked attention -> ratio loss
    let schedule = SparsifySchedule::new(vec![0], 0.5).unwrap();
    let noise: Tensor<f64> = gumbel_noise(vec![2, 4, 2], &mut rng(80));
    let store = predictor_store(4, 81);
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, e)| e.tensor.clone()).collect();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let x = randn(&[2, 5, 4], 82);
    let w = randn(&[2, 5, 4], 83);
    let r = check_gradients(&inputs, GradCheck::default(), |tape, vars| {
        let bound_vars: Vec<(String, Var<f64>)> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let get = |n: &str| bound_vars.iter().find(|(k, _)| k == n).map(|(_, v)| *v).unwrap();
        let xv = tape.constant(x.clone());
        let img = xv.narrow(1, 1, 4)?;
        let h = img.linear(get("hts.0.fc1.weight"), Some(get("hts.0.fc1.bias")))?.gelu();
        let lp = h.linear(get("hts.0.fc2.weight"), Some(get("hts.0.fc2.bias")))?.log_softmax_last();
        let d = gumbel_keep(lp, &noise, 1.0, Relaxation::Soft)?;
        let full = Var::concat(&[tape.constant(Tensor::ones(vec![2, 1])), d], 1)?;
        let att = masked_attention(xv, xv, xv, Some(full), 2)?;
        Ok(att.mul(tape.constant(w.clone()))?.sum().add(ratio_loss(&[d], &schedule)?)?)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}
