use rand::Rng;

use crate::error::Result;
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Bound, ParamStore};

fn name(stage: usize, part: &str) -> String {
    format!("hts.{stage}.{part}")
}

/// Registers the per-stage keep/drop MLP: `C → C/2 → 2`.
pub fn init_predictor<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, stage: usize, dim: usize, rng: &mut R) {
    let hidden = (dim / 2).max(1);
    store.insert(name(stage, "fc1.weight"), Tensor::trunc_normal(vec![dim, hidden], 0.02, rng));
    store.insert(name(stage, "fc1.bias"), Tensor::zeros(vec![hidden]));
    store.insert(name(stage, "fc2.weight"), Tensor::trunc_normal(vec![hidden, 2], 0.02, rng));
    store.insert(name(stage, "fc2.bias"), Tensor::zeros(vec![2]));
}

/// `ln π = log_softmax(MLP(D̂_i · x_i))` for image tokens `[B, N, C]`;
/// column 1 is the keep log-probability.
pub fn predict_log_probs<'t, T: Real>(
    params: &Bound<'t, T>,
    stage: usize,
    tokens: Var<'t, T>,
    mask: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let x = match mask {
        Some(m) => tokens.scale_rows(m)?,
        None => tokens,
    };
    let h = x
        .linear(params.get(&name(stage, "fc1.weight"))?, Some(params.get(&name(stage, "fc1.bias"))?))?
        .gelu();
    let logits = h.linear(params.get(&name(stage, "fc2.weight"))?, Some(params.get(&name(stage, "fc2.bias"))?))?;
    Ok(logits.log_softmax_last())
}

/// Decision probabilities π `[B, N, 2]`.
pub fn predict_keep_probs<'t, T: Real>(
    params: &Bound<'t, T>,
    stage: usize,
    tokens: Var<'t, T>,
    mask: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    Ok(predict_log_probs(params, stage, tokens, mask)?.exp())
}
