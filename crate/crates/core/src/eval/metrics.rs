use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::par::Exec;

/// Identity and camera of a query or gallery image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.last_dim();
    for r in out.data_mut().chunks_mut(c) {
        let n = r.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        if n > T::zero() {
            r.iter_mut().for_each(|v| *v = *v / n);
        }
    }
    out
}

/// Squared Euclidean distances `[Q, G]` between feature rows.
pub fn distance_matrix<T: Real>(queries: &Tensor<T>, gallery: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    let (qs, gs) = (queries.shape(), gallery.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(Error::shape("distance_matrix", qs, gs));
    }
    let (nq, ng, c) = (qs[0], gs[0], qs[1]);
    let rows = exec.map_range(nq, |i| {
        let q = &queries.data()[i * c..(i + 1) * c];
        gallery
            .rows()
            .map(|g| q.iter().zip(g).map(|(&a, &b)| (a - b) * (a - b)).fold(T::zero(), |s, v| s + v))
            .collect::<Vec<T>>()
    });
    Tensor::new(vec![nq, ng], rows.into_iter().flatten().collect())
}

/// Retrieval accuracy for one query set.
#[derive(Clone, Debug, PartialEq)]
pub struct Cmc {
    /// `curve[k - 1]` is the Rank-k accuracy.
    pub curve: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
    /// Queries without any cross-camera match.
    pub skipped_queries: usize,
}

impl Cmc {
    pub fn rank(&self, k: usize) -> f64 {
        self.curve[(k - 1).min(self.curve.len() - 1)]
    }
}

/// Per-query ranking outcome: first-hit rank (0-based) and average
/// precision, or `None` without valid matches.
fn score_query(dist: &[f64], query: Meta, gallery: &[Meta]) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&g| !(gallery[g].identity == query.identity && gallery[g].camera == query.camera))
        .collect();
    let npos = order.iter().filter(|&&g| gallery[g].identity == query.identity).count();
    if npos == 0 {
        return None;
    }
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut first = None;
    let mut ap = 0.0;
    for (rank, &g) in order.iter().enumerate() {
        if gallery[g].identity == query.identity {
            hits += 1;
            first.get_or_insert(rank);
            ap += hits as f64 / (rank + 1) as f64;
            if hits == npos {
                break;
            }
        }
    }
    Some((first.expect("npos > 0"), ap / npos as f64))
}

/// CMC curve up to `max_rank` and mAP under the cross-camera protocol:
/// gallery entries sharing both identity and camera with the query are
/// ignored. Equal distances rank the lower gallery index first.
pub fn cmc_map<T: Real>(dist: &Tensor<T>, queries: &[Meta], gallery: &[Meta], max_rank: usize, exec: Exec) -> Result<Cmc> {
    if dist.shape() != [queries.len(), gallery.len()] {
        return Err(Error::shape("cmc_map", dist.shape(), &[queries.len(), gallery.len()]));
    }
    if max_rank == 0 {
        return Err(Error::config("max rank must be positive"));
    }
    let g = gallery.len();
    let scored = exec.map_range(queries.len(), |i| {
        let row: Vec<f64> = dist.data()[i * g..(i + 1) * g].iter().map(|v| v.as_f64()).collect();
        score_query(&row, queries[i], gallery)
    });
    let mut curve = vec![0.0; max_rank];
    let mut map = 0.0;
    let mut valid = 0;
    for (first, ap) in scored.iter().flatten() {
        valid += 1;
        map += ap;
        for c in curve.iter_mut().skip(*first) {
            *c += 1.0;
        }
    }
    let denom = valid.max(1) as f64;
    Ok(Cmc {
        curve: curve.into_iter().map(|c| c / denom).collect(),
        map: map / denom,
        valid_queries: valid,
        skipped_queries: queries.len() - valid,
    })
}
