use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hts::SparsifySchedule;
use crate::numerics::check::{check_gradients, GradCheck};
use crate::numerics::{Real, Tape, Tensor};

fn toy_config(sparsify: Option<SparsifySchedule>) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        depth: 4,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 5,
        sparsify,
        bn_neck: true,
    }
}

fn toy_patch() -> PatchConfig {
    PatchConfig::new(16, 8, 3, 4).unwrap()
}

fn images<T: Real>(b: usize, seed: u64) -> Tensor<T> {
    Tensor::randn(vec![b, 3, 16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random non-degenerate weights: the default init is too close to zero
/// for the comparisons below to be meaningful.
fn scrambled<T: Real>(model: &mut Vit<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, e) in model.params.iter_mut() {
        if e.trainable && !name.ends_with("gain") && !name.contains("lambda") {
            e.tensor = Tensor::randn(e.tensor.shape().to_vec(), 0.3, &mut rng);
        }
    }
}

#[test]
fn token_counts_follow_patch_grid() {
    assert_eq!(PatchConfig::new(256, 128, 3, 16).unwrap().num_patches(), 128);
    assert_eq!(PatchConfig::new(64, 32, 3, 16).unwrap().num_patches(), 8);
    assert_eq!(PatchConfig::new(64, 32, 3, 16).unwrap().grid(), (4, 2));
    assert!(PatchConfig::new(64, 30, 3, 16).is_err());
    assert!(PatchConfig::new(60, 32, 3, 16).is_err());
}

#[test]
fn config_validation() {
    let mut c = toy_config(None);
    c.heads = 3;
    assert!(c.validate().is_err());
    let c = toy_config(Some(SparsifySchedule::new(vec![2, 4], 0.7).unwrap()));
    assert!(c.validate().is_err());
    assert!(toy_config(Some(SparsifySchedule::new(vec![2, 3], 0.7).unwrap())).validate().is_ok());
}

#[test]
fn patchify_layout() {
    let cfg = PatchConfig::new(4, 4, 1, 2).unwrap();
    let img = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| i as f64);
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[1, 4, 4]);
    assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
    assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
    assert_eq!(&p.data()[12..], &[10., 11., 14., 15.]);
    assert!(patchify(&Tensor::<f64>::zeros(vec![1, 1, 4, 2]), &cfg).is_err());
}

#[test]
fn zero_image_and_projection_give_positional_tokens() {
    let mut m = Vit::<f64>::new(toy_patch(), toy_config(None), 1).unwrap();
    scrambled(&mut m, 2);
    *m.params.get_mut("patch.weight").unwrap() = Tensor::zeros(vec![48, 16]);
    *m.params.get_mut("patch.bias").unwrap() = Tensor::zeros(vec![16]);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let x = m.embed(&p, &Tensor::zeros(vec![2, 3, 16, 8])).unwrap().value();
    let pos = m.params.get("pos").unwrap().data().to_vec();
    let cls = m.params.get("cls").unwrap().data().to_vec();
    let l = 9 * 16;
    for b in 0..2 {
        let row = &x.data()[b * l..(b + 1) * l];
        for (i, (&v, &p)) in row.iter().zip(&pos).enumerate() {
            let expect = if i < 16 { p + cls[i] } else { p };
            assert_eq!(v, expect);
        }
    }
}

#[test]
fn all_ones_mask_block_is_bit_identical() {
    let mut m = Vit::<f32>::new(toy_patch(), toy_config(None), 3).unwrap();
    scrambled(&mut m, 4);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let x = m.embed(&p, &images(3, 5)).unwrap();
    let ones = tape.constant(Tensor::ones(vec![3, 9]));
    let (a, _) = m.block(&p, 1, x, None, false).unwrap();
    let (b, _) = m.block(&p, 1, x, Some(ones), false).unwrap();
    assert_eq!(*a.value(), *b.value());
}

#[test]
fn single_token_attention_is_identity_mixing() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = tape.constant(Tensor::randn(vec![2, 1, 4], 1.0, &mut rng));
    let k = tape.constant(Tensor::randn(vec![2, 1, 4], 1.0, &mut rng));
    let v = tape.constant(Tensor::randn(vec![2, 1, 4], 1.0, &mut rng));
    let out = crate::hts::masked_attention(q, k, v, None, 2).unwrap();
    assert_eq!(*out.value(), *v.value());
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 1,
        ..toy_config(None)
    };
    let mut m = Vit::<f64>::new(toy_patch(), cfg, 7).unwrap();
    scrambled(&mut m, 8);
    let names: Vec<String> = m.params.iter().filter(|(n, _)| n.starts_with("blocks.0")).map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    inputs.push(Tensor::randn(vec![2, 5, 8], 1.0, &mut rng));
    inputs.push(Tensor::from_fn(vec![2, 5], |i| if i % 5 == 0 { 1.0 } else { rng.gen_range(0.2..1.0) }));
    let w = Tensor::randn(vec![2, 5, 8], 1.0, &mut rng);
    let r = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let mut p = m.params.bind(tape, false);
        for (n, &var) in names.iter().zip(v) {
            p.set(n.clone(), var);
        }
        let n = names.len();
        let (y, _) = m.block(&p, 0, v[n], Some(v[n + 1]), false)?;
        Ok(y.mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

#[test]
fn without_schedule_train_and_infer_agree() {
    let mut m = Vit::<f64>::new(toy_patch(), toy_config(None), 10).unwrap();
    scrambled(&mut m, 11);
    let x = images(3, 12);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let a = m.forward_features(&p, &x, Mode::dense_train()).unwrap();
    let b = m.forward_features(&p, &x, Mode::Infer(InferKeep::TopK)).unwrap();
    assert_eq!(*a.feature.value(), *b.feature.value());
    assert_eq!(a.feature.shape(), vec![3, 16]);
    assert!(a.decisions.stages.is_empty() && b.decisions.stages.is_empty());
}

#[test]
fn infer_token_counts_follow_schedule() {
    let patch = PatchConfig::new(64, 32, 3, 16).unwrap();
    let cfg = toy_config(Some(SparsifySchedule::new(vec![2, 3], 0.7).unwrap()));
    let mut m = Vit::<f32>::new(patch, cfg, 13).unwrap();
    scrambled(&mut m, 14);
    let x = Tensor::randn(vec![4, 3, 64, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(15));
    let (_, d) = m.infer_features(&x).unwrap();
    assert_eq!(d.kept_counts(0), vec![6; 4]);
    assert_eq!(d.kept_counts(1), vec![4; 4]);
    assert!(d.is_monotone());
}

#[test]
fn full_ratio_keeps_every_token() {
    let cfg = toy_config(Some(SparsifySchedule::new(vec![1, 2], 1.0).unwrap()));
    let mut m = Vit::<f64>::new(toy_patch(), cfg, 16).unwrap();
    scrambled(&mut m, 17);
    let x = images(2, 18);
    let (f, d) = m.infer_features(&x).unwrap();
    assert_eq!(d.kept_counts(1), vec![8, 8]);
    let dense = Vit {
        config: ModelConfig {
            sparsify: None,
            ..m.config.clone()
        },
        ..m.clone()
    };
    assert_eq!(f, dense.infer_features(&x).unwrap().0);
}

/// Random cumulative masks keeping exactly `k_s` tokens per image.
fn random_masks<T: Real>(b: usize, n: usize, keeps: &[usize], rng: &mut impl Rng) -> Vec<Tensor<T>> {
    let mut alive: Vec<Vec<usize>> = vec![(0..n).collect(); b];
    keeps
        .iter()
        .map(|&k| {
            let mut m = Tensor::zeros(vec![b, n]);
            for (bi, a) in alive.iter_mut().enumerate() {
                while a.len() > k {
                    a.remove(rng.gen_range(0..a.len()));
                }
                for &i in a.iter() {
                    m.data_mut()[bi * n + i] = T::one();
                }
            }
            m
        })
        .collect()
}

fn masking_matches_pruning<T: Real>(seed: u64, reweight: bool, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_config(Some(SparsifySchedule::new(vec![1, 3], 0.6).unwrap()));
    let mut m = Vit::<T>::new(toy_patch(), cfg, seed).unwrap();
    scrambled(&mut m, seed + 1);
    let x = images(3, seed + 2);
    let masks = random_masks::<T>(3, 8, &[rng.gen_range(1..=8), rng.gen_range(1..=4)], &mut rng);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let train = m
        .forward_features(
            &p,
            &x,
            Mode::Train {
                control: StageControl::Fixed(&masks),
                reweight,
            },
        )
        .unwrap();
    let infer = m.forward_features(&p, &x, Mode::Infer(InferKeep::Masks(&masks))).unwrap();
    assert_eq!(train.attn_cls.is_some(), reweight);
    let err = train
        .feature
        .value()
        .data()
        .iter()
        .zip(infer.feature.value().data())
        .map(|(a, b)| (*a - *b).abs().as_f64())
        .fold(0.0, f64::max);
    assert!(err <= tol, "seed {seed}: {err}");
    for s in 0..2 {
        assert_eq!(train.decisions.stages[s].mask, infer.decisions.stages[s].mask);
        assert_eq!(train.survivors[s], infer.survivors[s]);
    }
}

#[test]
fn masked_training_forward_equals_pruned_inference() {
    for seed in 0..10 {
        masking_matches_pruning::<f64>(100 + seed, false, 1e-10);
        // the reweight only rescales the class token ahead of the final
        // norm, which is scale invariant up to its epsilon
        masking_matches_pruning::<f64>(300 + seed, true, 1e-6);
        masking_matches_pruning::<f32>(200 + seed, true, 1e-5);
    }
}

#[test]
fn same_seed_same_model_and_outputs() {
    let cfg = toy_config(Some(SparsifySchedule::new(vec![1, 2], 0.7).unwrap()));
    let a = Vit::<f32>::new(toy_patch(), cfg.clone(), 42).unwrap();
    let b = Vit::<f32>::new(toy_patch(), cfg.clone(), 42).unwrap();
    let c = Vit::<f32>::new(toy_patch(), cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let x = images(2, 19);
    assert_eq!(a.infer_features(&x).unwrap().0, b.infer_features(&x).unwrap().0);
    let noise = a.sample_noise(2, &mut ChaCha8Rng::seed_from_u64(1));
    let run = |m: &Vit<f32>| {
        let tape = Tape::new();
        let p = m.params.bind(&tape, false);
        let mode = Mode::Train {
            control: StageControl::Gumbel {
                noise: &noise,
                tau: 1.0,
                relaxation: crate::hts::Relaxation::StraightThrough,
            },
            reweight: true,
        };
        let f = m.forward_features(&p, &x, mode).unwrap();
        let v = (*f.feature.value()).clone();
        v
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn training_masks_are_monotone_and_binary() {
    let cfg = toy_config(Some(SparsifySchedule::new(vec![0, 1, 3], 0.7).unwrap()));
    let mut m = Vit::<f64>::new(toy_patch(), cfg, 20).unwrap();
    scrambled(&mut m, 21);
    let x = images(4, 22);
    let noise = m.sample_noise(4, &mut ChaCha8Rng::seed_from_u64(23));
    let tape = Tape::new();
    let p = m.params.bind(&tape, true);
    let mode = Mode::Train {
        control: StageControl::Gumbel {
            noise: &noise,
            tau: 1.0,
            relaxation: crate::hts::Relaxation::StraightThrough,
        },
        reweight: true,
    };
    let f = m.forward_features(&p, &x, mode).unwrap();
    assert!(f.decisions.is_monotone());
    for st in &f.decisions.stages {
        assert!(st.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for r in st.pi.rows() {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
    }
    // the predictors receive gradient through the straight-through path
    f.feature.sum().add(f.stage_masks[2].sum()).unwrap().backward().unwrap();
    let g = tape.grad(p.get("hts.0.fc2.weight").unwrap()).unwrap();
    assert!(g.max_abs() > 0.0);
}
