use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

pub const LABEL_SMOOTHING: f64 = 0.1;
pub const TRIPLET_MARGIN: f64 = 0.3;
const MIN_SQ_DIST: f64 = 1e-12;

/// Weights of the combined objective
/// `α·(λ_KD·L_KL + L_feat + λ_ratio·L_ratio) + β·(L_cls + L_tri)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_ratio: f64,
    pub kd_lambda: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_ratio: 2.0,
            kd_lambda: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    /// Profile for small datasets: distillation weighted twice.
    pub fn small_dataset() -> Self {
        Self {
            alpha: 2.0,
            ..Self::default()
        }
    }

    pub fn combine(&self, kd: f64, ratio: f64, cls: f64, tri: f64) -> f64 {
        self.alpha * (kd + self.lambda_ratio * ratio) + self.beta * (cls + tri)
    }
}

/// Argument order of the logits divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(σ(gˢ/T) ‖ σ(gᵗ/T))`.
    #[default]
    StudentTeacher,
    /// `KL(σ(gᵗ/T) ‖ σ(gˢ/T))`.
    TeacherStudent,
}

/// Batch-mean KL divergence between temperature-softened distributions.
/// Only the student receives gradients.
pub fn kl_logits_loss<'t, T: Real>(student: Var<'t, T>, teacher: &Tensor<T>, temperature: f64, direction: KlDirection) -> Result<Var<'t, T>> {
    if student.shape() != teacher.shape() || teacher.rank() != 2 {
        return Err(Error::shape("kl_logits_loss", &student.shape(), teacher.shape()));
    }
    let b = teacher.shape()[0];
    let inv_t = T::lit(1.0 / temperature);
    let ls = student.scale(inv_t).log_softmax_last();
    let lt = student.tape().constant(log_softmax_rows(&teacher.scale(inv_t)));
    let per_elem = match direction {
        KlDirection::StudentTeacher => ls.exp().mul(ls.sub(lt)?)?,
        KlDirection::TeacherStudent => lt.exp().mul(lt.sub(ls)?)?,
    };
    Ok(per_elem.sum().scale(T::one() / T::lit(b as f64)))
}

fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.last_dim();
    for r in out.data_mut().chunks_mut(n) {
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = r.iter().map(|&v| (v - m).exp()).fold(T::zero(), |a, b| a + b).ln() + m;
        r.iter_mut().for_each(|v| *v = *v - lse);
    }
    out
}

/// Batch-mean squared Euclidean distance between aligned features.
pub fn feature_loss<'t, T: Real>(student: Var<'t, T>, teacher: Var<'t, T>) -> Result<Var<'t, T>> {
    let b = student.shape()[0];
    Ok(student.sub(teacher)?.sqr().sum().scale(T::one() / T::lit(b as f64)))
}

/// `λ_KD·L_KL + L_feat`, together with its two parts.
pub struct KdParts<'t, T: Real> {
    pub kl: Var<'t, T>,
    pub feat: Var<'t, T>,
    pub total: Var<'t, T>,
}

pub fn npkd_loss<'t, T: Real>(
    student_aligned: Var<'t, T>,
    teacher_aligned: Var<'t, T>,
    student_logits: Var<'t, T>,
    teacher_logits: &Tensor<T>,
    weights: &LossWeights,
    direction: KlDirection,
) -> Result<KdParts<'t, T>> {
    let kl = kl_logits_loss(student_logits, teacher_logits, weights.temperature, direction)?;
    let feat = feature_loss(student_aligned, teacher_aligned)?;
    let total = kl.scale(T::lit(weights.kd_lambda)).add(feat)?;
    Ok(KdParts { kl, feat, total })
}

/// Label-smoothed cross entropy with smoothing `epsilon`, batch mean.
pub fn cls_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[usize], epsilon: f64) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let [b, k] = shape[..] else {
        return Err(Error::contract(format!("logits must be [B, K], got {shape:?}")));
    };
    if labels.len() != b {
        return Err(Error::shape("cls_loss labels", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} outside [0, {k})")));
    }
    let off = epsilon / k as f64;
    let on = 1.0 - epsilon + off;
    let q = Tensor::from_fn(vec![b, k], |i| T::lit(if labels[i / k] == i % k { on } else { off }));
    let lp = logits.log_softmax_last();
    Ok(lp.mul(logits.tape().constant(q))?.sum().scale(T::lit(-1.0 / b as f64)))
}

/// Batch-hard triplet loss over Euclidean distances: for each anchor the
/// farthest positive and the nearest negative, hinged at `margin`, mean
/// over anchors. An anchor without positives uses distance zero.
pub fn triplet_loss<'t, T: Real>(features: Var<'t, T>, labels: &[usize], margin: f64) -> Result<Var<'t, T>> {
    let b = features.shape()[0];
    if labels.len() != b {
        return Err(Error::shape("triplet_loss labels", &features.shape(), &[labels.len()]));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::contract("triplet loss needs at least two identities in the batch"));
    }
    let dist = features.pairwise_dist(T::lit(MIN_SQ_DIST))?;
    let dv = dist.value();
    let d = dv.data();
    let (mut pos, mut neg, mut has_pos) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
    for i in 0..b {
        let row = &d[i * b..(i + 1) * b];
        let hardest = |same: bool, farther: bool| {
            (0..b)
                .filter(|&j| j != i && (labels[j] == labels[i]) == same)
                .reduce(|a, j| if (row[j] > row[a]) == farther && row[j] != row[a] { j } else { a })
        };
        let p = hardest(true, true);
        has_pos.push(T::lit(if p.is_some() { 1.0 } else { 0.0 }));
        pos.push(i * b + p.unwrap_or(i));
        neg.push(i * b + hardest(false, false).expect("two identities"));
    }
    let dp = dist.gather_flat(&pos)?.mul(features.tape().constant(Tensor::new(vec![b], has_pos)?))?;
    let dn = dist.gather_flat(&neg)?;
    Ok(dp.sub(dn)?.add_scalar(T::lit(margin)).relu().mean())
}

/// Loss components of one step on the tape.
pub struct LossParts<'t, T: Real> {
    pub cls: Var<'t, T>,
    pub tri: Var<'t, T>,
    pub kd: Option<KdParts<'t, T>>,
    pub ratio: Option<Var<'t, T>>,
}

/// The weighted sum of all present components.
pub fn total_loss<'t, T: Real>(parts: &LossParts<'t, T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    let mut total = parts.cls.add(parts.tri)?.scale(T::lit(weights.beta));
    let mut distill: Option<Var<'t, T>> = parts.kd.as_ref().map(|k| k.total);
    if let Some(r) = parts.ratio {
        let r = r.scale(T::lit(weights.lambda_ratio));
        distill = Some(match distill {
            Some(d) => d.add(r)?,
            None => r,
        });
    }
    if let Some(d) = distill {
        total = total.add(d.scale(T::lit(weights.alpha)))?;
    }
    Ok(total)
}
