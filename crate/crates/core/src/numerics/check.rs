//! Central finite-difference gradient checking at `f64`.
//!
//! The numeric side re-evaluates the function on fresh tapes built from
//! constants, so it never touches the reverse-mode rules it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Number of coordinates sampled across all inputs.
    pub coords: usize,
    /// Denominator floor for the relative error, so that gradients that
    /// are numerically zero are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords: 100,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input, flat index, analytic, numeric) at the worst coordinate.
    pub worst: (usize, usize, f64, f64),
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences on randomly sampled coordinates.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad(*v).expect("param leaf")).collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = sample(&mut rng, total, cfg.coords.min(total));

    let mut work = inputs.to_vec();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for flat in picks.iter() {
        let which = offsets.iter().rposition(|&o| o <= flat).expect("offset 0");
        let idx = flat - offsets[which];
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + cfg.step;
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = orig - cfg.step;
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[which].data()[idx];
        let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = (which, idx, a, numeric);
        }
    }
    Ok(report)
}
