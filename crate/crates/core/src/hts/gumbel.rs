//! Gumbel-Softmax sampling of binary keep/drop decisions.
//!
//! For log-probabilities `z = ln π` and i.i.d. Gumbel noise `g`, the hard
//! decision `argmax(z + g)` is exactly distributed as π. The relaxation
//! `softmax((z + g)/τ)` supplies the gradient for the straight-through
//! estimator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// How a sampled decision enters the computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Relaxation {
    /// Hard 0/1 forward value, gradient of the soft relaxation backward.
    #[default]
    StraightThrough,
    /// Soft relaxation both ways. Smooth in its inputs, so it can be
    /// finite-difference checked with frozen noise.
    Soft,
    /// Hard value with no gradient.
    Hard,
}

/// One standard Gumbel draw, `-ln(-ln u)` with `u` in the open unit interval.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn gumbel_noise<T: Real, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(gumbel(rng)))
}

/// Samples hard keep decisions `D ∈ {0,1}` from probabilities `π[.., 2]`
/// (column 1 = keep).
pub fn gumbel_sample<T: Real, R: Rng + ?Sized>(pi: &Tensor<T>, tau: f64, rng: &mut R) -> Result<Tensor<T>> {
    if pi.last_dim() != 2 {
        return Err(Error::contract(format!("decision probabilities need a trailing 2, got {:?}", pi.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let out_shape = pi.shape()[..pi.rank() - 1].to_vec();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let data = pi
        .rows()
        .map(|r| {
            let drop = r[0].as_f64().ln() + gumbel(rng);
            let keep = r[1].as_f64().ln() + gumbel(rng);
            if keep > drop {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(out_shape, data)
}

/// Keep decisions `[B, N]` from log-probabilities `[B, N, 2]` and frozen
/// noise of the same shape.
pub fn gumbel_keep<'t, T: Real>(log_pi: Var<'t, T>, noise: &Tensor<T>, tau: T, relaxation: Relaxation) -> Result<Var<'t, T>> {
    let lp = log_pi.value();
    if lp.last_dim() != 2 || lp.rank() < 2 {
        return Err(Error::contract(format!("log-probabilities need a trailing 2, got {:?}", lp.shape())));
    }
    if noise.shape() != lp.shape() {
        return Err(Error::shape("gumbel noise", lp.shape(), noise.shape()));
    }
    if tau <= T::zero() {
        return Err(Error::config("Gumbel temperature must be positive"));
    }
    let n = lp.numel() / 2;
    let mut soft = Vec::with_capacity(n);
    let mut hard = Vec::with_capacity(n);
    for (r, g) in lp.rows().zip(noise.rows()) {
        let drop = r[0] + g[0];
        let keep = r[1] + g[1];
        // softmax over two entries = logistic of the scaled difference
        let y = T::one() / (T::one() + ((drop - keep) / tau).exp());
        soft.push(y);
        hard.push(if keep > drop { T::one() } else { T::zero() });
    }
    let shape = lp.shape()[..lp.rank() - 1].to_vec();
    let value = match relaxation {
        Relaxation::Soft => soft.clone(),
        Relaxation::StraightThrough | Relaxation::Hard => hard,
    };
    let y = Tensor::new(shape, value)?;
    if relaxation == Relaxation::Hard {
        return Ok(log_pi.tape().constant(y));
    }
    let in_shape = lp.shape().to_vec();
    Ok(log_pi.tape().record(
        &[log_pi],
        y,
        Box::new(move |g, _| {
            let mut d = Vec::with_capacity(2 * g.numel());
            for (&gv, &y) in g.data().iter().zip(&soft) {
                let s = gv * y * (T::one() - y) / tau;
                d.push(-s);
                d.push(s);
            }
            vec![Some(Tensor::new(in_shape.clone(), d).expect("shape"))]
        }),
    ))
}
