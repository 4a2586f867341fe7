//! Run configuration as a plain `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Command-line overrides use the same `key=value` syntax and are
//! applied after the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::{Alignment, Direction, KlDirection, LossWeights, Method};
use crate::error::{Error, Result};
use crate::hts::SparsifySchedule;
use crate::vit::{ModelConfig, PatchConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset root holding `manifest.csv`.
    pub data_dir: PathBuf,
    /// Checkpoints and logs are written here.
    pub out_dir: PathBuf,
    /// Frozen teacher checkpoint, required when `npkd` is on.
    pub teacher: Option<PathBuf>,
    /// Occluder library for the paste augmentation.
    pub occluders: Option<PathBuf>,
    pub seed: u64,

    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub teacher_width: usize,
    pub bn_neck: bool,

    pub hts: bool,
    pub npkd: bool,
    pub noda: bool,
    pub keep_ratio: f64,
    pub stage_layers: Vec<usize>,
    pub gumbel_tau: f64,
    /// Probabilities of random erasing and random patch on the first view.
    pub erase_prob: f64,
    pub patch_prob: f64,
    /// Brightness/contrast/saturation jitter on every training view.
    pub view_jitter: f64,

    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub align: Alignment,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub grad_clip: f64,
    pub ids_per_batch: usize,
    pub imgs_per_id: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            teacher: None,
            occluders: None,
            seed: 0,
            image_height: 64,
            image_width: 32,
            patch: 8,
            embed_dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            teacher_width: 2,
            bn_neck: true,
            hts: true,
            npkd: true,
            noda: true,
            keep_ratio: 0.7,
            stage_layers: vec![2, 3],
            gumbel_tau: crate::hts::GUMBEL_TAU,
            erase_prob: 0.5,
            patch_prob: 0.5,
            view_jitter: 0.4,
            weights: LossWeights::small_dataset(),
            kl_direction: KlDirection::default(),
            align: Alignment::default(),
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            warmup_epochs: 2,
            grad_clip: 5.0,
            ids_per_batch: 4,
            imgs_per_id: 4,
            checkpoint_every: 1,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("cannot parse {key} = {value:?} as a switch"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Every recognised key.
    pub const KEYS: &'static [&'static str] = &[
        "data_dir",
        "out_dir",
        "teacher",
        "occluders",
        "seed",
        "image_height",
        "image_width",
        "patch",
        "embed_dim",
        "depth",
        "heads",
        "mlp_ratio",
        "teacher_width",
        "bn_neck",
        "hts",
        "npkd",
        "noda",
        "keep_ratio",
        "stage_layers",
        "gumbel_tau",
        "erase_prob",
        "patch_prob",
        "view_jitter",
        "alpha",
        "beta",
        "lambda_ratio",
        "kd_lambda",
        "temperature",
        "kl_direction",
        "align_direction",
        "align_method",
        "lr",
        "momentum",
        "weight_decay",
        "epochs",
        "warmup_epochs",
        "grad_clip",
        "ids_per_batch",
        "imgs_per_id",
        "checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "teacher" => self.teacher = opt_path(v),
            "occluders" => self.occluders = opt_path(v),
            "seed" => self.seed = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "teacher_width" => self.teacher_width = parse(key, v)?,
            "bn_neck" => self.bn_neck = parse_bool(key, v)?,
            "hts" => self.hts = parse_bool(key, v)?,
            "npkd" => self.npkd = parse_bool(key, v)?,
            "noda" => self.noda = parse_bool(key, v)?,
            "keep_ratio" => self.keep_ratio = parse(key, v)?,
            "stage_layers" => {
                self.stage_layers = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "gumbel_tau" => self.gumbel_tau = parse(key, v)?,
            "erase_prob" => self.erase_prob = parse(key, v)?,
            "patch_prob" => self.patch_prob = parse(key, v)?,
            "view_jitter" => self.view_jitter = parse(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "lambda_ratio" => self.weights.lambda_ratio = parse(key, v)?,
            "kd_lambda" => self.weights.kd_lambda = parse(key, v)?,
            "temperature" => self.weights.temperature = parse(key, v)?,
            "kl_direction" => {
                self.kl_direction = match v {
                    "student_teacher" => KlDirection::StudentTeacher,
                    "teacher_student" => KlDirection::TeacherStudent,
                    _ => return Err(Error::config(format!("kl_direction must be student_teacher or teacher_student, got {v:?}"))),
                }
            }
            "align_direction" => {
                self.align.direction = match v {
                    "t2s" => Direction::TeacherToStudent,
                    "s2t" => Direction::StudentToTeacher,
                    _ => return Err(Error::config(format!("align_direction must be t2s or s2t, got {v:?}"))),
                }
            }
            "align_method" => {
                self.align.method = match v {
                    "interpolation" => Method::Interpolation,
                    "linear" => Method::Linear,
                    _ => return Err(Error::config(format!("align_method must be interpolation or linear, got {v:?}"))),
                }
            }
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "ids_per_batch" => self.ids_per_batch = parse(key, v)?,
            "imgs_per_id" => self.imgs_per_id = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got {a:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect::<Vec<_>>();
        cfg.apply(&lines)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 {
            return Err(Error::config("ids_per_batch must be at least 2 for the triplet loss"));
        }
        if self.imgs_per_id == 0 || self.epochs == 0 {
            return Err(Error::config("imgs_per_id and epochs must be positive"));
        }
        if ![self.erase_prob, self.patch_prob].iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::config("erase_prob and patch_prob must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.view_jitter) {
            return Err(Error::config("view_jitter must lie in [0, 1)"));
        }
        if self.teacher_width == 0 {
            return Err(Error::config("teacher_width must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("need lr > 0, momentum in [0, 1) and weight_decay >= 0"));
        }
        self.patch_config()?;
        self.student_config(1)?.validate()?;
        Ok(())
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        PatchConfig::new(self.image_height, self.image_width, 3, self.patch)
    }

    pub fn student_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let sparsify = if self.hts {
            Some(SparsifySchedule::new(self.stage_layers.clone(), self.keep_ratio)?)
        } else {
            None
        };
        Ok(ModelConfig {
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes,
            sparsify,
            bn_neck: self.bn_neck,
        })
    }

    /// Wider, unsparsified model without a BN-neck.
    pub fn teacher_config(&self, num_classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig::teacher_of(&self.student_config(num_classes)?, self.teacher_width))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let layers = self.stage_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
        let kl = match self.kl_direction {
            KlDirection::StudentTeacher => "student_teacher",
            KlDirection::TeacherStudent => "teacher_student",
        };
        let dir = match self.align.direction {
            Direction::TeacherToStudent => "t2s",
            Direction::StudentToTeacher => "s2t",
        };
        let method = match self.align.method {
            Method::Interpolation => "interpolation",
            Method::Linear => "linear",
        };
        let w = &self.weights;
        writeln!(f, "data_dir = {}", self.data_dir.display())?;
        writeln!(f, "out_dir = {}", self.out_dir.display())?;
        writeln!(f, "teacher = {}", path(&self.teacher))?;
        writeln!(f, "occluders = {}", path(&self.occluders))?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "image_height = {}", self.image_height)?;
        writeln!(f, "image_width = {}", self.image_width)?;
        writeln!(f, "patch = {}", self.patch)?;
        writeln!(f, "embed_dim = {}", self.embed_dim)?;
        writeln!(f, "depth = {}", self.depth)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "mlp_ratio = {}", self.mlp_ratio)?;
        writeln!(f, "teacher_width = {}", self.teacher_width)?;
        writeln!(f, "bn_neck = {}", self.bn_neck)?;
        writeln!(f, "hts = {}", self.hts)?;
        writeln!(f, "npkd = {}", self.npkd)?;
        writeln!(f, "noda = {}", self.noda)?;
        writeln!(f, "keep_ratio = {}", self.keep_ratio)?;
        writeln!(f, "stage_layers = {layers}")?;
        writeln!(f, "gumbel_tau = {}", self.gumbel_tau)?;
        writeln!(f, "erase_prob = {}", self.erase_prob)?;
        writeln!(f, "patch_prob = {}", self.patch_prob)?;
        writeln!(f, "view_jitter = {}", self.view_jitter)?;
        writeln!(f, "alpha = {}", w.alpha)?;
        writeln!(f, "beta = {}", w.beta)?;
        writeln!(f, "lambda_ratio = {}", w.lambda_ratio)?;
        writeln!(f, "kd_lambda = {}", w.kd_lambda)?;
        writeln!(f, "temperature = {}", w.temperature)?;
        writeln!(f, "kl_direction = {kl}")?;
        writeln!(f, "align_direction = {dir}")?;
        writeln!(f, "align_method = {method}")?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "warmup_epochs = {}", self.warmup_epochs)?;
        writeln!(f, "grad_clip = {}", self.grad_clip)?;
        writeln!(f, "ids_per_batch = {}", self.ids_per_batch)?;
        writeln!(f, "imgs_per_id = {}", self.imgs_per_id)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.apply(&["keep_ratio=0.5", "stage_layers=1,3", "align_method=linear", "teacher=/tmp/t.ckpt", "kl_direction=teacher_student"])
            .unwrap();
        let text = cfg.to_string();
        assert_eq!(RunConfig::parse_str(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for (line, key) in text.lines().zip(RunConfig::KEYS) {
            assert!(line.starts_with(&format!("{key} = ")), "{line}");
        }
    }

    #[test]
    fn comments_overrides_and_errors() {
        let cfg = RunConfig::parse_str("# toy\n\nepochs = 3\nnoda=off\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.noda);
        assert!(RunConfig::parse_str("bogus = 1").is_err());
        assert!(RunConfig::parse_str("epochs = many").is_err());
        assert!(RunConfig::parse_str("ids_per_batch = 1").is_err());
        assert!(RunConfig::parse_str("stage_layers = 3,2").is_err());
        assert!(RunConfig::parse_str("stage_layers = 2,9").is_err());
    }

    #[test]
    fn defaults_follow_the_scaled_down_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weights.alpha, 2.0);
        assert_eq!(cfg.weights.beta, 1.0);
        let t = cfg.teacher_config(16).unwrap();
        assert_eq!(t.embed_dim, 64);
        assert!(t.sparsify.is_none() && !t.bn_neck);
        let s = cfg.student_config(16).unwrap();
        assert_eq!(s.sparsify.unwrap().stage_layers(), &[2, 3]);
    }
}
