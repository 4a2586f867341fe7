use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Which side of the distillation pair is resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    /// Teacher features mapped to the student width.
    #[default]
    TeacherToStudent,
    /// Student features mapped to the teacher width.
    StudentToTeacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    /// Parameter-free linear resampling.
    #[default]
    Interpolation,
    /// Learnable linear map.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Alignment {
    pub direction: Direction,
    pub method: Method,
}

/// Source index and blend weight for every output position: output `j`
/// reads `(1 − t)·f[lo] + t·f[lo + 1]`, with positions placed at
/// `j·(C_from − 1)/(C_to − 1)` in source units.
fn taps(c_from: usize, c_to: usize) -> Vec<(usize, f64)> {
    (0..c_to)
        .map(|j| {
            if c_from == 1 || c_to == 1 {
                return (0, 0.0);
            }
            let num = j * (c_from - 1);
            let den = c_to - 1;
            let lo = (num / den).min(c_from - 2);
            let t = (num - lo * den) as f64 / den as f64;
            (lo, t)
        })
        .collect()
}

fn lerp<T: Real>(row: &[T], lo: usize, t: T) -> T {
    if t == T::zero() {
        row[lo]
    } else if t == T::one() {
        row[lo + 1]
    } else {
        row[lo] + t * (row[lo + 1] - row[lo])
    }
}

/// Resamples each row of `[B, C_from]` to `C_to` values by linear
/// interpolation over equispaced positions on `[0, 1]`. `C_from = 1`
/// extends the single value.
pub fn align_features<T: Real>(f: &Tensor<T>, c_to: usize) -> Result<Tensor<T>> {
    let c_from = f.last_dim();
    if c_to == 0 {
        return Err(Error::config("alignment target width must be positive"));
    }
    if c_from == c_to {
        return Ok(f.clone());
    }
    let taps = taps(c_from, c_to);
    let mut shape = f.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = c_to;
    let data = f
        .rows()
        .flat_map(|r| taps.iter().map(move |&(lo, t)| lerp(r, lo, T::lit(t))))
        .collect();
    Tensor::new(shape, data)
}

/// Differentiable [`align_features`].
pub fn align_var<'t, T: Real>(f: Var<'t, T>, c_to: usize) -> Result<Var<'t, T>> {
    let fv = f.value();
    let c_from = fv.last_dim();
    if c_from == c_to {
        return Ok(f);
    }
    let out = align_features(&fv, c_to)?;
    let taps = Rc::new(taps(c_from, c_to));
    let rows = fv.numel() / c_from;
    let in_shape = fv.shape().to_vec();
    Ok(f.tape().record(
        &[f],
        out,
        Box::new(move |g, _| {
            let mut d = vec![T::zero(); rows * c_from];
            for (r, gr) in g.data().chunks(c_to).enumerate() {
                for (&(lo, t), &gv) in taps.iter().zip(gr) {
                    let t = T::lit(t);
                    d[r * c_from + lo] += (T::one() - t) * gv;
                    if t != T::zero() {
                        d[r * c_from + lo + 1] += t * gv;
                    }
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), d).expect("shape"))]
        }),
    ))
}

/// Registers the projection used by [`Method::Linear`].
pub fn init_alignment<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, align: Alignment, student_dim: usize, teacher_dim: usize, rng: &mut R) {
    if align.method != Method::Linear {
        return;
    }
    let (din, dout) = match align.direction {
        Direction::TeacherToStudent => (teacher_dim, student_dim),
        Direction::StudentToTeacher => (student_dim, teacher_dim),
    };
    store.insert("align.proj.weight", Tensor::randn(vec![din, dout], 1.0 / (din as f64).sqrt(), rng));
    store.insert("align.proj.bias", Tensor::zeros(vec![dout]));
}

/// Both features brought to a common width, `(student, teacher)`.
pub fn aligned_pair<'t, T: Real>(
    p: &Bound<'t, T>,
    align: Alignment,
    student: Var<'t, T>,
    teacher: &Tensor<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = student.tape();
    let (cs, ct) = (student.shape()[1], teacher.last_dim());
    let t = tape.constant(teacher.clone());
    let map = |x: Var<'t, T>, width: usize| -> Result<Var<'t, T>> {
        match align.method {
            Method::Interpolation => align_var(x, width),
            Method::Linear => x.linear(p.get("align.proj.weight")?, Some(p.get("align.proj.bias")?)),
        }
    };
    match align.direction {
        Direction::TeacherToStudent => Ok((student, map(t, cs)?)),
        Direction::StudentToTeacher => Ok((map(student, ct)?, t)),
    }
}
