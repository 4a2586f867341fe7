use crate::error::{Error, Result};

/// Layers at which tokens are sparsified and the cumulative keep targets
/// `p, p², p³, …` for those stages.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsifySchedule {
    stage_layers: Vec<usize>,
    base_ratio: f64,
}

impl SparsifySchedule {
    pub fn new(stage_layers: Vec<usize>, base_ratio: f64) -> Result<Self> {
        if stage_layers.is_empty() {
            return Err(Error::config("sparsify schedule needs at least one stage layer"));
        }
        if stage_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "stage layers must be strictly increasing, got {stage_layers:?}"
            )));
        }
        if !(base_ratio > 0.0 && base_ratio <= 1.0) {
            return Err(Error::config(format!("keep ratio must lie in (0, 1], got {base_ratio}")));
        }
        Ok(Self {
            stage_layers,
            base_ratio,
        })
    }

    pub fn stage_layers(&self) -> &[usize] {
        &self.stage_layers
    }

    pub fn base_ratio(&self) -> f64 {
        self.base_ratio
    }

    pub fn num_stages(&self) -> usize {
        self.stage_layers.len()
    }

    /// Target keep fraction after stage `s` (0-based): `p^(s+1)`.
    pub fn stage_ratio(&self, s: usize) -> f64 {
        self.base_ratio.powi(s as i32 + 1)
    }

    pub fn stage_ratios(&self) -> Vec<f64> {
        (0..self.num_stages()).map(|s| self.stage_ratio(s)).collect()
    }

    /// Image tokens kept after stage `s` at inference: `⌈p^(s+1)·N⌉`,
    /// relative to the original token count.
    pub fn keep_count(&self, s: usize, num_tokens: usize) -> usize {
        keep_count(self.stage_ratio(s), num_tokens)
    }

    /// Stage index whose sparsification runs before `layer`, if any.
    pub fn stage_at(&self, layer: usize) -> Option<usize> {
        self.stage_layers.iter().position(|&l| l == layer)
    }

    /// Same layers with a different base ratio.
    pub fn with_ratio(&self, base_ratio: f64) -> Result<Self> {
        Self::new(self.stage_layers.clone(), base_ratio)
    }
}

/// `⌈ratio·n⌉`, tolerant of products that land a rounding error above an
/// integer, never below 1.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    ((exact - 1e-9).ceil().max(1.0) as usize).min(n)
}
