//! Differentiable primitives on [`Var`].
//!
//! Shape-checked operations return [`Result`]; elementwise maps are total.

use super::tape::Var;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// (outer, dim, inner) factorisation of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &a, &b));
        }
        Ok(())
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let xs = x.clone();
        let ys = std::rc::Rc::new(y.clone());
        let ys2 = ys.clone();
        self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(xs.data())
                    .zip(ys2.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "add")?;
        let y = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .tape
            .record(&[self, other], y, Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "sub")?;
        let y = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.record(
            &[self, other],
            y,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(
            &[self, other],
            y,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, b| g * b).expect("shape")),
                    needs[1].then(|| g.zip_map(&a, |g, a| g * a).expect("shape")),
                ]
            }),
        ))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let y = self.value().scale(c);
        self.tape.record(&[self], y, Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let y = self.value().map(|x| x + c);
        self.tape.record(&[self], y, Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Multiplies every element by a learnable one-element `s`.
    pub fn mul_scalar_var(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        if s.value().numel() != 1 {
            return Err(Error::shape("mul_scalar_var", &self.shape(), &s.shape()));
        }
        let x = self.value();
        let sv = s.value().item();
        let y = x.scale(sv);
        Ok(self.tape.record(
            &[self, s],
            y,
            Box::new(move |g, needs| {
                let ds = needs[1].then(|| {
                    let d: T = g.data().iter().zip(x.data()).map(|(&g, &x)| g * x).sum();
                    Tensor::scalar(d)
                });
                vec![needs[0].then(|| g.scale(sv)), ds]
            }),
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let shape = x.shape().to_vec();
        let y = Tensor::new(reduced_last(&shape), x.rows().map(|r| r.iter().copied().sum()).collect())
            .expect("reduced shape");
        self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(c)).collect();
                vec![Some(Tensor::new(shape.clone(), data).expect("shape"))]
            }),
        )
    }

    pub fn mean_last(self) -> Var<'t, T> {
        let c = T::lit(self.value().last_dim() as f64);
        self.sum_last().scale(T::one() / c)
    }

    pub fn sqr(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let k = T::lit(GELU_K);
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        self.unary(
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            },
        )
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let y = softmax_last(&x);
        let ys = y.clone();
        self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let c = ys.last_dim();
                let mut dx = vec![T::zero(); g.numel()];
                for ((dxr, gr), yr) in dx.chunks_exact_mut(c).zip(g.rows()).zip(ys.rows()) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
            }),
        )
    }

    pub fn log_softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let mut out = Vec::with_capacity(x.numel());
        for r in x.rows() {
            let m = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(r.iter().map(|&v| v - lse));
        }
        let y = Tensor::new(x.shape().to_vec(), out).expect("shape");
        let ys = y.clone();
        self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.numel()];
                for ((dxr, gr), yr) in dx.chunks_exact_mut(c).zip(g.rows()).zip(ys.rows()) {
                    let s: T = gr.iter().copied().sum();
                    for ((d, &g), &y) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = g - y.exp() * s;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
            }),
        )
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        let y = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(
            &[self, other],
            y,
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt_acc(g.data(), b.data(), &mut d, m, n, k);
                    Tensor::new(vec![m, k], d).expect("shape")
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn_acc(a.data(), g.data(), &mut d, m, k, n);
                    Tensor::new(vec![k, n], d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = w.value();
        let xs = x.shape().to_vec();
        let (din, dout) = match wv.shape() {
            [i, o] if *i == x.last_dim() => (*i, *o),
            _ => return Err(Error::shape("linear", &xs, wv.shape())),
        };
        if let Some(b) = &b {
            if b.shape() != [dout] {
                return Err(Error::shape("linear bias", wv.shape(), &b.shape()));
            }
        }
        let rows = x.numel() / din;
        let mut out = match &b {
            Some(b) => {
                let bv = b.value();
                let mut o = Vec::with_capacity(rows * dout);
                for _ in 0..rows {
                    o.extend_from_slice(bv.data());
                }
                o
            }
            None => vec![T::zero(); rows * dout],
        };
        gemm_acc(x.data(), wv.data(), &mut out, rows, din, dout);
        let mut ys = xs.clone();
        *ys.last_mut().expect("rank >= 1") = dout;
        let y = Tensor::new(ys, out)?;
        let mut inputs = vec![self, w];
        inputs.extend(b);
        Ok(self.tape.record(
            &inputs,
            y,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * din];
                    gemm_nt_acc(g.data(), wv.data(), &mut d, rows, dout, din);
                    Tensor::new(xs.clone(), d).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); din * dout];
                    gemm_tn_acc(x.data(), g.data(), &mut d, rows, din, dout);
                    Tensor::new(vec![din, dout], d).expect("shape")
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); dout];
                        for r in g.rows() {
                            for (a, &v) in d.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                        Tensor::new(vec![dout], d).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }

    /// Per-row normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.last_dim();
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::shape("layer_norm", x.shape(), &gain.shape()));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let n = T::lit(c as f64);
        let rows = x.numel() / c;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in x.rows() {
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(r.iter().map(|&v| (v - mean) * inv));
        }
        let y: Vec<T> = xhat
            .chunks_exact(c)
            .flat_map(|r| r.iter().zip(gv.data()).zip(bv.data()).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let y = Tensor::new(x.shape().to_vec(), y)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            &[self, gain, bias],
            y,
            Box::new(move |g, needs| {
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.numel()];
                for (row, ((gr, hr), dxr)) in g
                    .rows()
                    .zip(xhat.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let mut mean_dh = T::zero();
                    let mut mean_dhh = T::zero();
                    for j in 0..c {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dhh += dh * hr[j];
                    }
                    mean_dh /= n;
                    mean_dhh /= n;
                    let inv = inv_std[row];
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        dxr[j] = inv * (dh - mean_dh - hr[j] * mean_dhh);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(shape.clone(), dx).expect("shape")),
                    needs[1].then(|| Tensor::new(vec![c], dgain).expect("shape")),
                    needs[2].then(|| Tensor::new(vec![c], dbias).expect("shape")),
                ]
            }),
        ))
    }

    /// Training-mode batch normalisation of `[B, C]` over the batch axis.
    /// Also returns the batch mean and biased variance per channel.
    pub fn batch_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let [b, c] = x.shape() else {
            return Err(Error::shape("batch_norm", x.shape(), &gamma.shape()));
        };
        let (b, c) = (*b, *c);
        if gamma.shape() != [c] || beta.shape() != [c] || b < 2 {
            return Err(Error::shape("batch_norm", x.shape(), &gamma.shape()));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let n = T::lit(b as f64);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for r in x.rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for r in x.rows() {
            for j in 0..c {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = (0..b * c).map(|i| (xd[i] - mean[i % c]) * inv[i % c]).collect();
        let y: Vec<T> = (0..b * c)
            .map(|i| xhat[i] * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let y = Tensor::new(vec![b, c], y)?;
        let out = self.tape.record(
            &[self, gamma, beta],
            y,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut mean_dh = vec![T::zero(); c];
                let mut mean_dhh = vec![T::zero(); c];
                for i in 0..b * c {
                    let j = i % c;
                    dgamma[j] += gd[i] * xhat[i];
                    dbeta[j] += gd[i];
                    let dh = gd[i] * gv.data()[j];
                    mean_dh[j] += dh;
                    mean_dhh[j] += dh * xhat[i];
                }
                let dx: Vec<T> = (0..b * c)
                    .map(|i| {
                        let j = i % c;
                        let dh = gd[i] * gv.data()[j];
                        inv[j] * (dh - mean_dh[j] / n - xhat[i] * mean_dhh[j] / n)
                    })
                    .collect();
                vec![
                    needs[0].then(|| Tensor::new(vec![b, c], dx).expect("shape")),
                    needs[1].then(|| Tensor::new(vec![c], dgamma).expect("shape")),
                    needs[2].then(|| Tensor::new(vec![c], dbeta).expect("shape")),
                ]
            }),
        );
        Ok((out, mean, var))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| vec![Some(g.clone().reshape(old.clone()).expect("numel"))]),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let y = Tensor::new(shape, out)?;
        Ok(tape.record(
            parts,
            y,
            Box::new(move |g, needs| {
                let mut offset = 0;
                dims.iter()
                    .zip(needs)
                    .map(|(&d, &need)| {
                        let start = offset;
                        offset += d;
                        need.then(|| {
                            let mut data = Vec::with_capacity(outer * d * inner);
                            for o in 0..outer {
                                let row = (o * total + start) * inner;
                                data.extend_from_slice(&g.data()[row..row + d * inner]);
                            }
                            let mut s = base.clone();
                            s[axis] = d;
                            Tensor::new(s, data).expect("shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::contract(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[row..row + len * inner]);
        }
        let mut ys = shape.clone();
        ys[axis] = len;
        let y = Tensor::new(ys, out)?;
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let row = (o * dim + start) * inner;
                    dx[row..row + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// Repeats a `[1, ...]` value `n` times along the leading axis.
    pub fn broadcast_leading(self, n: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape[0] != 1 {
            return Err(Error::contract(format!("broadcast_leading needs leading extent 1, got {shape:?}")));
        }
        let mut out = Vec::with_capacity(x.numel() * n);
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        let mut ys = shape.clone();
        ys[0] = n;
        let y = Tensor::new(ys, out)?;
        let m = x.numel();
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); m];
                for chunk in g.data().chunks_exact(m) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// `x[.., C] * m[..]`: scales each last-axis row by one entry of `m`.
    pub fn scale_rows(self, m: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let mv = m.value();
        let c = x.last_dim();
        if reduced_last(x.shape()) != mv.shape() {
            return Err(Error::shape("scale_rows", x.shape(), mv.shape()));
        }
        let y: Vec<T> = x
            .rows()
            .zip(mv.data())
            .flat_map(|(r, &s)| r.iter().map(move |&v| v * s))
            .collect();
        let y = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.tape.record(
            &[self, m],
            y,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let d = g
                        .rows()
                        .zip(mv.data())
                        .flat_map(|(r, &s)| r.iter().map(move |&v| v * s))
                        .collect();
                    Tensor::new(x.shape().to_vec(), d).expect("shape")
                });
                let dm = needs[1].then(|| {
                    let d = g
                        .rows()
                        .zip(x.data().chunks_exact(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::new(mv.shape().to_vec(), d).expect("shape")
                });
                vec![dx, dm]
            }),
        ))
    }

    /// Selects rows along axis 1 of a `[B, L, C]` value, separately for
    /// each batch entry. Every index list must have the same length.
    pub fn gather_tokens(self, indices: &[Vec<usize>]) -> Result<Var<'t, T>> {
        let x = self.value();
        let [b, l, c] = *x.shape() else {
            return Err(Error::contract(format!("gather_tokens needs rank 3, got {:?}", x.shape())));
        };
        let k = indices.first().map_or(0, Vec::len);
        if indices.len() != b || k == 0 || indices.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= l)) {
            return Err(Error::contract("gather_tokens index lists must be equal length and in range"));
        }
        let mut out = Vec::with_capacity(b * k * c);
        for (bi, ix) in indices.iter().enumerate() {
            for &i in ix {
                let row = (bi * l + i) * c;
                out.extend_from_slice(&x.data()[row..row + c]);
            }
        }
        let y = Tensor::new(vec![b, k, c], out)?;
        let idx = indices.to_vec();
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); b * l * c];
                for (bi, ix) in idx.iter().enumerate() {
                    for (j, &i) in ix.iter().enumerate() {
                        let src = (bi * k + j) * c;
                        let dst = (bi * l + i) * c;
                        for t in 0..c {
                            dx[dst + t] += g.data()[src + t];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, l, c], dx).expect("shape"))]
            }),
        ))
    }

    /// Picks flat element indices into a rank-1 result.
    pub fn gather_flat(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if indices.is_empty() || indices.iter().any(|&i| i >= x.numel()) {
            return Err(Error::contract("gather_flat index out of range"));
        }
        let y = Tensor::new(vec![indices.len()], indices.iter().map(|&i| x.data()[i]).collect())?;
        let idx = indices.to_vec();
        let shape = x.shape().to_vec();
        let n = x.numel();
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n];
                for (&i, &v) in idx.iter().zip(g.data()) {
                    dx[i] += v;
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// Euclidean distances between the rows of a `[B, C]` value. Squared
    /// distances are clamped below at `min_sq` before the square root.
    pub fn pairwise_dist(self, min_sq: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let [b, c] = *x.shape() else {
            return Err(Error::contract(format!("pairwise_dist needs rank 2, got {:?}", x.shape())));
        };
        let xd = x.data();
        let mut d = vec![T::zero(); b * b];
        let mut clamped = vec![false; b * b];
        for i in 0..b {
            for j in 0..b {
                let sq: T = (0..c).map(|t| (xd[i * c + t] - xd[j * c + t]).powi(2)).sum();
                if sq < min_sq {
                    clamped[i * b + j] = true;
                }
                d[i * b + j] = sq.max(min_sq).sqrt();
            }
        }
        let y = Tensor::new(vec![b, b], d.clone())?;
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _| {
                let xd = x.data();
                let mut dx = vec![T::zero(); b * c];
                for i in 0..b {
                    for j in 0..b {
                        let gij = g.data()[i * b + j];
                        if clamped[i * b + j] || gij == T::zero() {
                            continue;
                        }
                        let s = gij / d[i * b + j];
                        for t in 0..c {
                            let diff = (xd[i * c + t] - xd[j * c + t]) * s;
                            dx[i * c + t] += diff;
                            dx[j * c + t] -= diff;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, c], dx).expect("shape"))]
            }),
        ))
    }
}

/// Row softmax over the last axis of a plain tensor.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(x.numel());
    for r in x.rows() {
        let m = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        out.extend(r.iter().map(|&v| (v - m).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}
