use log::warn;

use super::schedule::SparsifySchedule;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// Cumulative mask update `D̂ ← D̂ · D`.
pub fn update_mask<'t, T: Real>(mask: Var<'t, T>, decision: Var<'t, T>) -> Result<Var<'t, T>> {
    mask.mul(decision)
}

/// Residual class-attention reweighting of the final tokens:
/// `x + λ · concat(x_cls, a_1·x_1, …, a_N·x_N)` with `a` the class-token
/// attention row. The class token enters the concatenation unscaled.
pub fn class_attn_reweight<'t, T: Real>(x: Var<'t, T>, attn_cls: Var<'t, T>, lambda: Var<'t, T>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let a = attn_cls.shape();
    if xs.len() != 3 || a != [xs[0], xs[1]] {
        return Err(Error::contract(format!(
            "class attention of shape {a:?} does not match tokens {xs:?}"
        )));
    }
    let (b, l) = (xs[0], xs[1]);
    let ones = x.tape().constant(Tensor::ones(vec![b, 1]));
    let weights = if l > 1 {
        Var::concat(&[ones, attn_cls.narrow(1, 1, l - 1)?], 1)?
    } else {
        ones
    };
    x.add(x.scale_rows(weights)?.mul_scalar_var(lambda)?)
}

/// `(1/B) Σ_b Σ_s (p^(s+1) − mean_i D̂_i^{b,s})²` over the per-stage
/// cumulative masks `[B, N]`.
pub fn ratio_loss<'t, T: Real>(stage_masks: &[Var<'t, T>], schedule: &SparsifySchedule) -> Result<Var<'t, T>> {
    if stage_masks.len() != schedule.num_stages() {
        return Err(Error::contract(format!(
            "{} stage masks for a {}-stage schedule",
            stage_masks.len(),
            schedule.num_stages()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (s, m) in stage_masks.iter().enumerate() {
        let target = T::lit(schedule.stage_ratio(s));
        let term = m.mean_last().add_scalar(-target).sqr().mean();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("ratio loss needs at least one stage"))
}

/// Positions of the `k` largest scores, ties to the lower position,
/// returned in ascending position order.
pub fn top_k_positions<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

/// Result of hard inference-time pruning at one stage.
pub struct Pruned<'t, T: Real> {
    /// Class token followed by the kept image tokens, `[B, 1 + k, C]`.
    pub tokens: Var<'t, T>,
    /// Original-grid indices of the kept image tokens, ascending.
    pub survivors: Vec<Vec<usize>>,
}

/// Keeps the `keep` surviving image tokens with the highest keep
/// probability (plus the class token). Requests beyond the number of
/// survivors keep everything.
pub fn prune_for_inference<'t, T: Real>(
    tokens: Var<'t, T>,
    keep_prob: &Tensor<T>,
    survivors: &[Vec<usize>],
    keep: usize,
) -> Result<Pruned<'t, T>> {
    let shape = tokens.shape();
    let [b, l, _] = shape[..] else {
        return Err(Error::contract(format!("prune expects [B, L, C], got {shape:?}")));
    };
    let n = l - 1;
    if keep_prob.shape() != [b, n] || survivors.len() != b || survivors.iter().any(|s| s.len() != n) {
        return Err(Error::shape("prune_for_inference", &shape, keep_prob.shape()));
    }
    let keep = if keep > n {
        warn!("requested {keep} tokens but only {n} survive; keeping all");
        n
    } else {
        keep
    };
    if keep == n {
        return Ok(Pruned {
            tokens,
            survivors: survivors.to_vec(),
        });
    }
    let mut rows = Vec::with_capacity(b);
    let mut kept = Vec::with_capacity(b);
    for (bi, scores) in keep_prob.rows().enumerate() {
        let pos = top_k_positions(scores, keep);
        kept.push(pos.iter().map(|&p| survivors[bi][p]).collect());
        rows.push(std::iter::once(0).chain(pos.iter().map(|&p| p + 1)).collect());
    }
    Ok(Pruned {
        tokens: tokens.gather_tokens(&rows)?,
        survivors: kept,
    })
}
