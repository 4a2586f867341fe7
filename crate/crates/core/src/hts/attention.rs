//! Multi-head self-attention with decision masking.
//!
//! With a keep mask `m` over the sequence, the attention logits
//! `A = QKᵀ/√d` are renormalised with the gate `G_ij = 1` for `i = j` and
//! `G_ij = m_j` otherwise:
//!
//! ```text
//! Ã_ij = exp(A_ij)·G_ij / Σ_k exp(A_ik)·G_ik
//! ```
//!
//! so a dropped token still attends to itself but contributes to no other
//! token. `d` is the per-head width. The row maximum is taken over entries
//! with a non-zero gate before exponentiation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{gemm_acc, gemm_nt_acc, Real, Tensor, Var};

struct Geometry {
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
}

fn geometry<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: Option<&Tensor<T>>, heads: usize) -> Result<Geometry> {
    let [batch, len, dim] = *q.shape() else {
        return Err(Error::contract(format!("attention expects [B, L, C], got {:?}", q.shape())));
    };
    if k.shape() != q.shape() {
        return Err(Error::shape("attention keys", q.shape(), k.shape()));
    }
    if v.shape() != q.shape() {
        return Err(Error::shape("attention values", q.shape(), v.shape()));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!("embed dim {dim} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.shape() != [batch, len] {
            return Err(Error::shape("attention mask", &[batch, len], m.shape()));
        }
    }
    Ok(Geometry {
        batch,
        len,
        dim,
        heads,
        head_dim: dim / heads,
    })
}

/// Copies head `h` of batch entry `b` out of a `[B, L, C]` buffer.
fn head_slice<T: Real>(x: &[T], g: &Geometry, b: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(g.len * g.head_dim);
    for i in 0..g.len {
        let row = (b * g.len + i) * g.dim + h * g.head_dim;
        out.extend_from_slice(&x[row..row + g.head_dim]);
    }
    out
}

fn head_scatter_add<T: Real>(dst: &mut [T], src: &[T], g: &Geometry, b: usize, h: usize) {
    for i in 0..g.len {
        let row = (b * g.len + i) * g.dim + h * g.head_dim;
        for (d, &s) in dst[row..row + g.head_dim].iter_mut().zip(&src[i * g.head_dim..(i + 1) * g.head_dim]) {
            *d += s;
        }
    }
}

/// Gated softmax of one `rows × len` logit block. Returns the normalised
/// weights and `exp(A - max)/Z` (the gate sensitivity) per entry.
fn gated_softmax<T: Real>(logits: &[T], gate: impl Fn(usize, usize) -> T, rows: usize, len: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); rows * len];
    let mut sens = vec![T::zero(); rows * len];
    for i in 0..rows {
        let a = &logits[i * len..(i + 1) * len];
        let m = (0..len)
            .filter(|&j| gate(i, j) > T::zero())
            .fold(T::neg_infinity(), |m, j| m.max(a[j]));
        let mut z = T::zero();
        for j in 0..len {
            let e = (a[j] - m).exp();
            sens[i * len + j] = e;
            let w = e * gate(i, j);
            probs[i * len + j] = w;
            z += w;
        }
        assert!(z > T::zero(), "attention row {i} has zero total gate weight");
        for j in 0..len {
            probs[i * len + j] /= z;
            sens[i * len + j] /= z;
        }
    }
    (probs, sens)
}

fn gate_fn<T: Real>(mask: Option<&Tensor<T>>, b: usize, len: usize) -> impl Fn(usize, usize) -> T + '_ {
    move |i, j| match mask {
        Some(m) if i != j => m.data()[b * len + j],
        _ => T::one(),
    }
}

/// Masked multi-head attention over `[B, L, C]` queries, keys and values.
/// `mask` is `[B, L]` over the full sequence (class token included);
/// `None` means every token is kept.
pub fn masked_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Option<Var<'t, T>>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let mv = mask.map(|m| m.value());
    let g = geometry(&qv, &kv, &vv, mv.as_deref(), heads)?;
    let scale = T::one() / T::lit(g.head_dim as f64).sqrt();
    let (l, dh) = (g.len, g.head_dim);

    let mut out = vec![T::zero(); g.batch * l * g.dim];
    let mut saved = Vec::with_capacity(g.batch * g.heads);
    for b in 0..g.batch {
        let gate = gate_fn(mv.as_deref(), b, l);
        for h in 0..g.heads {
            let qh = head_slice(qv.data(), &g, b, h);
            let kh = head_slice(kv.data(), &g, b, h);
            let vh = head_slice(vv.data(), &g, b, h);
            let mut logits = vec![T::zero(); l * l];
            gemm_nt_acc(&qh, &kh, &mut logits, l, dh, l);
            logits.iter_mut().for_each(|a| *a *= scale);
            let (probs, sens) = gated_softmax(&logits, &gate, l, l);
            let mut oh = vec![T::zero(); l * dh];
            gemm_acc(&probs, &vh, &mut oh, l, l, dh);
            head_scatter_add(&mut out, &oh, &g, b, h);
            saved.push((probs, sens));
        }
    }
    let y = Tensor::new(vec![g.batch, l, g.dim], out)?;
    let saved = Rc::new(saved);

    let mut inputs = vec![q, k, v];
    inputs.extend(mask);
    Ok(q.tape().record(
        &inputs,
        y,
        Box::new(move |grad, needs| {
            let n = g.batch * l * g.dim;
            let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            let mut dmask = vec![T::zero(); g.batch * l];
            for b in 0..g.batch {
                for h in 0..g.heads {
                    let (probs, sens) = &saved[b * g.heads + h];
                    let qh = head_slice(qv.data(), &g, b, h);
                    let kh = head_slice(kv.data(), &g, b, h);
                    let vh = head_slice(vv.data(), &g, b, h);
                    let doh = head_slice(grad.data(), &g, b, h);

                    // dP = dO·Vᵀ, dV = Pᵀ·dO
                    let mut dp = vec![T::zero(); l * l];
                    gemm_nt_acc(&doh, &vh, &mut dp, l, dh, l);
                    let mut dvh = vec![T::zero(); l * dh];
                    for i in 0..l {
                        for j in 0..l {
                            let p = probs[i * l + j];
                            for t in 0..dh {
                                dvh[j * dh + t] += p * doh[i * dh + t];
                            }
                        }
                    }
                    head_scatter_add(&mut dv, &dvh, &g, b, h);

                    let mut ds = vec![T::zero(); l * l];
                    for i in 0..l {
                        let row = i * l..(i + 1) * l;
                        let r: T = dp[row.clone()].iter().zip(&probs[row]).map(|(&a, &b)| a * b).sum();
                        for j in 0..l {
                            let centered = dp[i * l + j] - r;
                            ds[i * l + j] = probs[i * l + j] * centered * scale;
                            if j != i {
                                dmask[b * l + j] += centered * sens[i * l + j];
                            }
                        }
                    }
                    let mut dqh = vec![T::zero(); l * dh];
                    gemm_acc(&ds, &kh, &mut dqh, l, l, dh);
                    head_scatter_add(&mut dq, &dqh, &g, b, h);
                    let mut dkh = vec![T::zero(); l * dh];
                    for i in 0..l {
                        for j in 0..l {
                            let s = ds[i * l + j];
                            for t in 0..dh {
                                dkh[j * dh + t] += s * qh[i * dh + t];
                            }
                        }
                    }
                    head_scatter_add(&mut dk, &dkh, &g, b, h);
                }
            }
            let shape = vec![g.batch, l, g.dim];
            let mut grads = vec![
                needs[0].then(|| Tensor::new(shape.clone(), dq).expect("shape")),
                needs[1].then(|| Tensor::new(shape.clone(), dk).expect("shape")),
                needs[2].then(|| Tensor::new(shape.clone(), dv).expect("shape")),
            ];
            if needs.len() == 4 {
                grads.push(needs[3].then(|| Tensor::new(vec![g.batch, l], dmask).expect("shape")));
            }
            grads
        }),
    ))
}

/// Class-token attention row `Ã_0·`, averaged over heads: `[B, L]`, each
/// row summing to one.
pub fn class_attention<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, mask: Option<Var<'t, T>>, heads: usize) -> Result<Var<'t, T>> {
    let (qv, kv) = (q.value(), k.value());
    let mv = mask.map(|m| m.value());
    let g = geometry(&qv, &kv, &kv, mv.as_deref(), heads)?;
    let scale = T::one() / T::lit(g.head_dim as f64).sqrt();
    let inv_heads = T::one() / T::lit(g.heads as f64);
    let (l, dh) = (g.len, g.head_dim);

    let mut out = vec![T::zero(); g.batch * l];
    let mut saved = Vec::with_capacity(g.batch * g.heads);
    for b in 0..g.batch {
        let gate = gate_fn(mv.as_deref(), b, l);
        for h in 0..g.heads {
            let qh = head_slice(qv.data(), &g, b, h);
            let kh = head_slice(kv.data(), &g, b, h);
            let mut logits = vec![T::zero(); l];
            gemm_nt_acc(&qh[..dh], &kh, &mut logits, 1, dh, l);
            logits.iter_mut().for_each(|a| *a *= scale);
            let (probs, sens) = gated_softmax(&logits, &gate, 1, l);
            for j in 0..l {
                out[b * l + j] += probs[j] * inv_heads;
            }
            saved.push((probs, sens));
        }
    }
    let y = Tensor::new(vec![g.batch, l], out)?;
    let mut inputs = vec![q, k];
    inputs.extend(mask);
    Ok(q.tape().record(
        &inputs,
        y,
        Box::new(move |grad, needs| {
            let n = g.batch * l * g.dim;
            let (mut dq, mut dk) = (vec![T::zero(); n], vec![T::zero(); n]);
            let mut dmask = vec![T::zero(); g.batch * l];
            for b in 0..g.batch {
                let gb = &grad.data()[b * l..(b + 1) * l];
                for h in 0..g.heads {
                    let (probs, sens) = &saved[b * g.heads + h];
                    let qh = head_slice(qv.data(), &g, b, h);
                    let kh = head_slice(kv.data(), &g, b, h);
                    let r: T = gb.iter().zip(probs).map(|(&a, &p)| a * inv_heads * p).sum();
                    let mut dqh = vec![T::zero(); l * dh];
                    let mut dkh = vec![T::zero(); l * dh];
                    for j in 0..l {
                        let centered = gb[j] * inv_heads - r;
                        let ds = probs[j] * centered * scale;
                        for t in 0..dh {
                            dqh[t] += ds * kh[j * dh + t];
                            dkh[j * dh + t] += ds * qh[t];
                        }
                        if j != 0 {
                            dmask[b * l + j] += centered * sens[j];
                        }
                    }
                    head_scatter_add(&mut dq, &dqh, &g, b, h);
                    head_scatter_add(&mut dk, &dkh, &g, b, h);
                }
            }
            let shape = vec![g.batch, l, g.dim];
            let mut grads = vec![
                needs[0].then(|| Tensor::new(shape.clone(), dq).expect("shape")),
                needs[1].then(|| Tensor::new(shape.clone(), dk).expect("shape")),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| Tensor::new(vec![g.batch, l], dmask).expect("shape")));
            }
            grads
        }),
    ))
}

/// The normalised attention matrix `Ã` for a single head, `q`, `k` of
/// shape `[L, d]` and a keep mask of length `L`. Used for inspection.
pub fn attention_weights<T: Real>(q: &Tensor<T>, k: &Tensor<T>, mask: Option<&[T]>) -> Result<Tensor<T>> {
    let [l, d] = *q.shape() else {
        return Err(Error::contract("attention_weights expects [L, d]"));
    };
    if k.shape() != q.shape() {
        return Err(Error::shape("attention_weights", q.shape(), k.shape()));
    }
    if mask.is_some_and(|m| m.len() != l) {
        return Err(Error::contract("mask length must equal sequence length"));
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut logits = vec![T::zero(); l * l];
    gemm_nt_acc(q.data(), k.data(), &mut logits, l, d, l);
    logits.iter_mut().for_each(|a| *a *= scale);
    let gate = |i: usize, j: usize| match mask {
        Some(m) if i != j => m[j],
        _ => T::one(),
    };
    let (probs, _) = gated_softmax(&logits, gate, l, l);
    Tensor::new(vec![l, l], probs)
}
