//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_reid::eval::Meta;
use sparse_reid::hts::SparsifySchedule;
use sparse_reid::vit::{ModelConfig, PatchConfig, Vit};
use sparse_reid::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Brute-force CMC/mAP: every gallery entry's rank is found by counting
/// the valid entries that beat it, so no sort is involved.
pub struct BruteCmc {
    pub curve: Vec<f64>,
    pub map: f64,
    pub skipped: usize,
}

pub fn brute_cmc_map(dist: &[Vec<f64>], queries: &[Meta], gallery: &[Meta], max_rank: usize) -> BruteCmc {
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (qi, q) in queries.iter().enumerate() {
        let ok: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].identity == q.identity && gallery[g].camera == q.camera))
            .collect();
        let beats = |a: usize, b: usize| dist[qi][a] < dist[qi][b] || (dist[qi][a] == dist[qi][b] && a < b);
        let rank = |g: usize| ok.iter().filter(|&&o| o != g && beats(o, g)).count();
        let positives: Vec<usize> = ok.iter().copied().filter(|&g| gallery[g].identity == q.identity).collect();
        if positives.is_empty() {
            continue;
        }
        valid += 1;
        let ranks: Vec<usize> = positives.iter().map(|&g| rank(g)).collect();
        let first = *ranks.iter().min().unwrap();
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k {
                *h += 1;
            }
        }
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / positives.len() as f64;
        ap_sum += ap;
    }
    let denom = valid.max(1) as f64;
    BruteCmc {
        curve: hits.iter().map(|&h| h as f64 / denom).collect(),
        map: ap_sum / denom,
        skipped: queries.len() - valid,
    }
}

/// Multi-head softmax attention over the subsequence `keep` of one
/// `[L, C]` item, by explicit loops.
pub fn dense_subset_attention(q: &[f64], k: &[f64], v: &[f64], c: usize, heads: usize, keep: &[usize]) -> Vec<Vec<f64>> {
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

pub fn toy_patch() -> PatchConfig {
    PatchConfig::new(16, 8, 3, 4).unwrap()
}

pub fn toy_model<T: Real>(depth: usize, stages: Option<(Vec<usize>, f64)>, seed: u64) -> Vit<T> {
    let config = ModelConfig {
        embed_dim: 8,
        depth,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        sparsify: stages.map(|(l, p)| SparsifySchedule::new(l, p).unwrap()),
        bn_neck: true,
    };
    Vit::new(toy_patch(), config, seed).unwrap()
}

/// Replaces trainable weights with N(0, 0.3²) draws so that comparisons
/// are not dominated by the near-zero default init.
pub fn scramble<T: Real>(model: &mut Vit<T>, seed: u64) {
    let mut r = rng(seed);
    for (name, e) in model.params.iter_mut() {
        if e.trainable && !name.ends_with("gain") && !name.contains("lambda") {
            e.tensor = Tensor::randn(e.tensor.shape().to_vec(), 0.3, &mut r);
        }
    }
}

/// Per-stage cumulative masks `[B, N]` keeping exactly `keeps[s]` random
/// tokens per image.
pub fn nested_masks<T: Real>(b: usize, n: usize, keeps: &[usize], r: &mut impl Rng) -> Vec<Tensor<T>> {
    let mut alive: Vec<Vec<usize>> = vec![(0..n).collect(); b];
    keeps
        .iter()
        .map(|&k| {
            let mut m = Tensor::zeros(vec![b, n]);
            for (bi, a) in alive.iter_mut().enumerate() {
                while a.len() > k {
                    a.remove(r.gen_range(0..a.len()));
                }
                for &i in a.iter() {
                    m.data_mut()[bi * n + i] = T::one();
                }
            }
            m
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
