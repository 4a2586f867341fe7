use crate::error::{Error, Result};
use crate::hts::SparsifySchedule;

/// Input geometry: `H × W` images with `d` channels cut into `P × P`
/// non-overlapping patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchConfig {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        let cfg = Self {
            height,
            width,
            channels,
            patch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config(format!("degenerate patch geometry {self:?}")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Image token count `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        self.height * self.width / (self.patch * self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Grid cell (row, col) of image token `i`, row-major.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        let (_, cols) = self.grid();
        (i / cols, i % cols)
    }
}

/// Encoder hyper-parameters. A schedule turns the model into a student
/// with token sparsification; `bn_neck` puts batch norm between the
/// feature and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub sparsify: Option<SparsifySchedule>,
    pub bn_neck: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::config(format!("degenerate model config {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if let Some(s) = &self.sparsify {
            if s.stage_layers().iter().any(|&l| l >= self.depth) {
                return Err(Error::config(format!(
                    "sparsify layers {:?} out of range for depth {}",
                    s.stage_layers(),
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Same backbone without sparsification at a different width, used for
    /// the teacher.
    pub fn teacher_of(student: &ModelConfig, width_factor: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: student.embed_dim * width_factor,
            sparsify: None,
            bn_neck: false,
            ..student.clone()
        }
    }
}
