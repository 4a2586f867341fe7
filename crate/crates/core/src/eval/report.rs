use std::fmt;
use std::time::Instant;

use super::metrics::{cmc_map, distance_matrix, l2_normalize, Meta};
use crate::augment::{images_to_tensor, RgbImage};
use crate::distill::neck_eval;
use crate::error::Result;
use crate::numerics::{Real, Tensor};
use crate::par::Exec;
use crate::vit::Vit;

pub const RANKS: [usize; 4] = [1, 3, 5, 10];

/// Retrieval features: inference-mode class features through the
/// evaluation-mode neck, L2-normalised. The classifier is not used.
pub fn extract_embeddings<T: Real>(model: &Vit<T>, images: &[RgbImage], batch: usize, exec: Exec) -> Result<Tensor<T>> {
    let chunks: Vec<&[RgbImage]> = images.chunks(batch.max(1)).collect();
    let parts = exec.map_slice(&chunks, |_, chunk| -> Result<Tensor<T>> {
        let x = images_to_tensor::<T>(chunk)?;
        let (f, _) = model.infer_features(&x)?;
        Ok(l2_normalize(&neck_eval(&model.params, &f)?))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let c = model.config.embed_dim;
    let data: Vec<T> = parts.into_iter().flat_map(|t| t.into_data()).collect();
    Tensor::new(vec![data.len() / c, c], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Accuracy at each of [`RANKS`].
    pub ranks: [f64; 4],
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    pub skipped_queries: usize,
    pub keep_ratio: f64,
    /// Images per second of feature extraction.
    pub throughput: f64,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.ranks[0]
    }

    pub const CSV_HEADER: &'static str = "rank1,rank3,rank5,rank10,mAP,queries,gallery,skipped,keep_ratio,imgs_per_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.2}",
            self.ranks[0], self.ranks[1], self.ranks[2], self.ranks[3], self.map, self.queries, self.gallery, self.skipped_queries, self.keep_ratio, self.throughput
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>10}", "metric", "value")?;
        for (k, r) in RANKS.iter().zip(self.ranks) {
            writeln!(f, "{:<12}{:>9.2}%", format!("Rank-{k}"), r * 100.0)?;
        }
        writeln!(f, "{:<12}{:>9.2}%", "mAP", self.map * 100.0)?;
        writeln!(f, "{:<12}{:>10}", "queries", self.queries)?;
        writeln!(f, "{:<12}{:>10}", "gallery", self.gallery)?;
        if self.skipped_queries > 0 {
            writeln!(f, "{:<12}{:>10}", "skipped", self.skipped_queries)?;
        }
        writeln!(f, "{:<12}{:>10}", "keep ratio", self.keep_ratio)?;
        write!(f, "{:<12}{:>10.1}", "img/s", self.throughput)
    }
}

/// Embeds both sets with `model` and scores the ranking.
pub fn evaluate<T: Real>(
    model: &Vit<T>,
    query: (&[RgbImage], &[Meta]),
    gallery: (&[RgbImage], &[Meta]),
    batch: usize,
    exec: Exec,
) -> Result<EvalReport> {
    let start = Instant::now();
    let qf = extract_embeddings(model, query.0, batch, exec)?;
    let gf = extract_embeddings(model, gallery.0, batch, exec)?;
    let secs = start.elapsed().as_secs_f64();
    let dist = distance_matrix(&qf, &gf, exec)?;
    let cmc = cmc_map(&dist, query.1, gallery.1, *RANKS.last().expect("ranks"), exec)?;
    Ok(EvalReport {
        ranks: RANKS.map(|k| cmc.rank(k)),
        map: cmc.map,
        queries: query.0.len(),
        gallery: gallery.0.len(),
        skipped_queries: cmc.skipped_queries,
        keep_ratio: model.config.sparsify.as_ref().map_or(1.0, |s| s.base_ratio()),
        throughput: (query.0.len() + gallery.0.len()) as f64 / secs.max(1e-9),
    })
}
