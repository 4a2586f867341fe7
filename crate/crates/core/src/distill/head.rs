use rand::Rng;

use crate::error::Result;
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CLASSIFIER_STD_SCALE: f64 = 1.0;

/// Registers the identity classifier `[C, K]` (no bias), preceded by a
/// batch-norm neck when `bn_neck` is set.
pub fn init_head<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, classes: usize, bn_neck: bool, rng: &mut R) {
    if bn_neck {
        store.insert("head.bn.gamma", Tensor::ones(vec![dim]));
        store.insert("head.bn.beta", Tensor::zeros(vec![dim]));
        store.insert_buffer("head.bn.running_mean", Tensor::zeros(vec![dim]));
        store.insert_buffer("head.bn.running_var", Tensor::ones(vec![dim]));
    }
    store.insert("head.classifier.weight", Tensor::trunc_normal(vec![dim, classes], CLASSIFIER_STD_SCALE / (dim as f64).sqrt(), rng));
}

pub fn has_bn_neck<T: Real>(store: &ParamStore<T>) -> bool {
    store.contains("head.bn.gamma")
}

/// Head output for one batch.
pub struct HeadOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    /// Classifier input: the BN-neck output, or the raw feature without a
    /// neck.
    pub neck: Var<'t, T>,
    /// Batch mean and biased variance, recorded in training mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Logits from class features `[B, C]`. Training mode normalises with
/// batch statistics, evaluation mode with the running buffers.
pub fn head_forward<'t, T: Real>(p: &Bound<'t, T>, feature: Var<'t, T>, train: bool) -> Result<HeadOutput<'t, T>> {
    let w = p.get("head.classifier.weight")?;
    let Ok(gamma) = p.get("head.bn.gamma") else {
        return Ok(HeadOutput {
            logits: feature.linear(w, None)?,
            neck: feature,
            batch_stats: None,
        });
    };
    let beta = p.get("head.bn.beta")?;
    let (neck, stats) = if train {
        let (y, mean, var) = feature.batch_norm(gamma, beta, T::lit(BN_EPS))?;
        (y, Some((mean, var)))
    } else {
        let (rm, rv) = (p.get("head.bn.running_mean")?.value(), p.get("head.bn.running_var")?.value());
        let shift: Vec<T> = rm.data().iter().map(|&m| -m).collect();
        let inv: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let b = feature.shape()[0];
        let tape = feature.tape();
        let c = shift.len();
        let shift = tape.constant(Tensor::new(vec![1, c], shift)?).broadcast_leading(b)?;
        let inv = tape.constant(Tensor::new(vec![1, c], inv)?).broadcast_leading(b)?;
        let y = feature.add(shift)?.mul(inv)?;
        let y = y.mul(gamma.reshape(vec![1, c])?.broadcast_leading(b)?)?;
        (y.add(beta.reshape(vec![1, c])?.broadcast_leading(b)?)?, None)
    };
    Ok(HeadOutput {
        logits: neck.linear(w, None)?,
        neck,
        batch_stats: stats,
    })
}

/// Exponential update of the running buffers; the variance is stored
/// unbiased.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, mean: &[T], biased_var: &[T], batch: usize) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    let unbias = T::lit(batch as f64 / (batch.max(2) - 1) as f64);
    for (r, &x) in store.get_mut("head.bn.running_mean")?.data_mut().iter_mut().zip(mean) {
        *r = (T::one() - m) * *r + m * x;
    }
    for (r, &x) in store.get_mut("head.bn.running_var")?.data_mut().iter_mut().zip(biased_var) {
        *r = (T::one() - m) * *r + m * x * unbias;
    }
    Ok(())
}

/// Evaluation-mode neck applied to plain features.
pub fn neck_eval<T: Real>(store: &ParamStore<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
    if !has_bn_neck(store) {
        return Ok(feature.clone());
    }
    let (rm, rv) = (store.get("head.bn.running_mean")?, store.get("head.bn.running_var")?);
    let (g, b) = (store.get("head.bn.gamma")?, store.get("head.bn.beta")?);
    let c = g.numel();
    let eps = T::lit(BN_EPS);
    Ok(Tensor::from_fn(feature.shape().to_vec(), |i| {
        let j = i % c;
        (feature.data()[i] - rm.data()[j]) / (rv.data()[j] + eps).sqrt() * g.data()[j] + b.data()[j]
    }))
}
