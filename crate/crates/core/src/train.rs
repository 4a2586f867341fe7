//! Training loop: identity-balanced sampling, the dual augmented batch,
//! the sparsified student with a frozen teacher, and SGD with momentum
//! under a warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{build_dual_batch, fit_images, images_to_tensor, load_patch_library, AugmentConfig, OcclusionPatch, SampleClock};
use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::data::{Manifest, TrainSet};
use crate::distill::{
    aligned_pair, cls_loss, head_forward, init_alignment, npkd_loss, total_loss, triplet_loss, update_running_stats, LossParts,
    LABEL_SMOOTHING, TRIPLET_MARGIN,
};
use crate::error::{Error, Result};
use crate::hts::{ratio_loss, Relaxation};
use crate::numerics::{matmul, Tape, Tensor};
use crate::par::{derive_seed, Exec};
use crate::vit::{Mode, StageControl, Vit};

const SAMPLER_STREAM: u64 = 0x5a;
const GUMBEL_STREAM: u64 = 0x6b;

/// Which network a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Wide dense model trained with classification and triplet losses only.
    Teacher,
    /// Configured model; distils from the teacher when `npkd` is on.
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Loss breakdown of one optimisation step. Absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub cls: f64,
    pub tri: f64,
    pub kl: f64,
    pub feat: f64,
    pub ratio: f64,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,L_cls,L_tri,L_KL,L_feat,L_ratio,L_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.step, self.cls, self.tri, self.kl, self.feat, self.ratio, self.total
        )
    }
}

/// Identity-balanced batches covering roughly one pass over `images`
/// training images: each batch holds `ids` identities with `per_id` images
/// each. The identity order is reshuffled whenever it runs out; identities
/// with too few images are sampled with replacement.
pub fn pk_batches(by_label: &[Vec<usize>], ids: usize, per_id: usize, images: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, SAMPLER_STREAM]));
    let usable: Vec<usize> = (0..by_label.len()).filter(|&l| !by_label[l].is_empty()).collect();
    let count = (images / (ids * per_id)).max(1);
    let mut order: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(count);
    while batches.len() < count && usable.len() >= ids {
        if order.len() < ids {
            order = usable.clone();
            order.shuffle(&mut rng);
        }
        let mut batch = Vec::with_capacity(ids * per_id);
        for l in order.drain(..ids) {
            let pool = &by_label[l];
            if pool.len() >= per_id {
                batch.extend(pool.choose_multiple(&mut rng, per_id).copied());
            } else {
                batch.extend((0..per_id).map(|_| *pool.choose(&mut rng).expect("non-empty")));
            }
        }
        batches.push(batch);
    }
    batches
}

/// Linear warmup to `base`, then cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.rank() >= 2 && name != "cls" && name != "pos"
}

/// SGD with momentum and L2 weight decay on weight matrices.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, grad_clip: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            grad_clip,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut Vit<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.data()).map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        let (mu, wd) = (self.momentum as f32, self.weight_decay as f32);
        for (name, g) in grads {
            let w = model.params.get_mut(name)?;
            let decay = if decays(name, w) { wd } else { 0.0 };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
            for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.data_mut().iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi * clip as f32 + decay * *wi;
                *wi -= lr as f32 * *vi;
            }
        }
        Ok(norm)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub role: Role,
    pub model: Vit<f32>,
    data: TrainSet,
    by_label: Vec<Vec<usize>>,
    library: Vec<OcclusionPatch>,
    teacher: Option<Vit<f32>>,
    opt: Sgd,
    aug: AugmentConfig,
    steps_per_epoch: usize,
    step: usize,
    exec: Exec,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, role: Role, mut data: TrainSet, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (cfg.image_width as u32, cfg.image_height as u32);
        data.images = fit_images(std::mem::take(&mut data.images), w, h);
        let noda = cfg.noda;
        let library = match (&cfg.occluders, noda) {
            (Some(dir), true) => load_patch_library(dir)?,
            (None, true) => return Err(Error::config("noda is on but no occluder directory is configured")),
            _ => Vec::new(),
        };
        if noda && library.is_empty() {
            return Err(Error::config("noda is on but the occluder library is empty"));
        }
        let patch = cfg.patch_config()?;
        let classes = data.num_classes;
        let (model_cfg, distill) = match role {
            Role::Teacher => (cfg.teacher_config(classes)?, false),
            Role::Student => (cfg.student_config(classes)?, cfg.npkd),
        };
        let mut model = Vit::new(patch, model_cfg, cfg.seed)?;
        let teacher = if distill {
            let path = cfg
                .teacher
                .as_ref()
                .ok_or_else(|| Error::config("npkd is on but no teacher checkpoint is configured"))?;
            if !path.exists() {
                return Err(Error::config(format!("teacher checkpoint {} does not exist", path.display())));
            }
            let teacher = load_model(path)?;
            if teacher.patch != model.patch {
                return Err(Error::config("teacher and student input geometry differ"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xa1]));
            init_alignment(&mut model.params, cfg.align, model.config.embed_dim, teacher.config.embed_dim, &mut rng);
            Some(teacher)
        } else {
            None
        };
        let by_label = data.by_label();
        if by_label.len() < cfg.ids_per_batch {
            return Err(Error::config(format!(
                "{} identities cannot fill batches of {}",
                by_label.len(),
                cfg.ids_per_batch
            )));
        }
        let steps_per_epoch = (data.images.len() / (cfg.ids_per_batch * cfg.imgs_per_id)).max(1);
        let mut aug = AugmentConfig {
            noda_enabled: noda,
            seed: cfg.seed,
            ..AugmentConfig::default()
        };
        aug.erase.probability = cfg.erase_prob;
        aug.random_patch.probability = cfg.patch_prob;
        aug.view_jitter = cfg.view_jitter;
        Ok(Self {
            cfg: cfg.clone(),
            role,
            model,
            data,
            by_label,
            library,
            teacher,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay, cfg.grad_clip),
            aug,
            steps_per_epoch,
            step: 0,
            exec,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn teacher(&self) -> Option<&Vit<f32>> {
        self.teacher.as_ref()
    }

    fn lr(&self) -> f64 {
        let total = self.cfg.epochs * self.steps_per_epoch;
        learning_rate(self.cfg.lr, self.step, self.cfg.warmup_epochs * self.steps_per_epoch, total)
    }

    /// One optimisation step on the images at `indices`.
    pub fn train_step(&mut self, indices: &[usize], epoch: u64) -> Result<StepLog> {
        let images: Vec<_> = indices.iter().map(|&i| self.data.images[i].clone()).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.data.labels[i]).collect();
        let clock = SampleClock {
            epoch,
            step: self.step as u64,
        };
        let dual = build_dual_batch(&images, &labels, &self.aug, &self.library, clock, self.exec)?;
        let views: Vec<_> = dual.a.into_iter().chain(dual.b).collect();
        let labels: Vec<usize> = dual.labels.iter().chain(&dual.labels).copied().collect();
        let x = images_to_tensor::<f32>(&views)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, epoch, self.step as u64, GUMBEL_STREAM]));
        let noise = self.model.sample_noise(views.len(), &mut rng);
        let mode = if self.model.config.sparsify.is_some() {
            Mode::Train {
                control: StageControl::Gumbel {
                    noise: &noise,
                    tau: self.cfg.gumbel_tau as f32,
                    relaxation: Relaxation::StraightThrough,
                },
                reweight: true,
            }
        } else {
            Mode::dense_train()
        };

        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let feats = self.model.forward_features(&p, &x, mode)?;
        let head = head_forward(&p, feats.feature, true)?;
        let cls = cls_loss(head.logits, &labels, LABEL_SMOOTHING)?;
        let tri = triplet_loss(feats.feature, &labels, TRIPLET_MARGIN)?;
        let ratio = match &self.model.config.sparsify {
            Some(s) => Some(ratio_loss(&feats.stage_masks, s)?),
            None => None,
        };
        let kd = match &self.teacher {
            Some(t) => {
                let (tf, _) = t.infer_features(&x)?;
                let t_logits = matmul(&tf, t.params.get("head.classifier.weight")?)?;
                let (s_al, t_al) = aligned_pair(&p, self.cfg.align, feats.feature, &tf)?;
                Some(npkd_loss(s_al, t_al, head.logits, &t_logits, &self.cfg.weights, self.cfg.kl_direction)?)
            }
            None => None,
        };
        let parts = LossParts { cls, tri, kd, ratio };
        let total = total_loss(&parts, &self.cfg.weights)?;
        total.backward()?;

        let log = StepLog {
            step: self.step,
            cls: f64::from(cls.item()),
            tri: f64::from(tri.item()),
            kl: parts.kd.as_ref().map_or(0.0, |k| f64::from(k.kl.item())),
            feat: parts.kd.as_ref().map_or(0.0, |k| f64::from(k.feat.item())),
            ratio: ratio.map_or(0.0, |r| f64::from(r.item())),
            total: f64::from(total.item()),
        };
        if !log.total.is_finite() {
            return Err(Error::contract(format!("non-finite loss at step {}", self.step)));
        }
        let grads: BTreeMap<String, Tensor<f32>> = p
            .iter()
            .filter(|(name, _)| self.model.params.iter().any(|(n, e)| n == *name && e.trainable))
            .filter_map(|(name, v)| v.grad().map(|g| (name.to_string(), g)))
            .collect();
        let stats = head.batch_stats.clone();
        drop(p);
        let lr = self.lr();
        self.opt.step(&mut self.model, &grads, lr)?;
        if let Some((mean, var)) = stats {
            update_running_stats(&mut self.model.params, &mean, &var, labels.len())?;
        }
        self.step += 1;
        Ok(log)
    }

    /// Runs every step of `epoch` (zero-based).
    pub fn train_epoch(&mut self, epoch: usize) -> Result<Vec<StepLog>> {
        let batches = pk_batches(
            &self.by_label,
            self.cfg.ids_per_batch,
            self.cfg.imgs_per_id,
            self.data.images.len(),
            self.cfg.seed,
            epoch as u64,
        );
        batches.iter().map(|b| self.train_step(b, epoch as u64)).collect()
    }
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome {
    pub model: Vit<f32>,
    pub log: Vec<StepLog>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, role: Role) -> PathBuf {
    out_dir.join(format!("{}.ckpt", role.name()))
}

/// Loads the training split from `cfg.data_dir`, trains for `cfg.epochs`
/// and writes checkpoints, the loss log and the config echo to
/// `cfg.out_dir`.
pub fn train(cfg: &RunConfig, role: Role, exec: Exec) -> Result<TrainOutcome> {
    let manifest = Manifest::load(&cfg.data_dir)?;
    let data = TrainSet::load(&manifest, exec)?;
    train_on(cfg, role, data, exec)
}

pub fn train_on(cfg: &RunConfig, role: Role, data: TrainSet, exec: Exec) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, role, data, exec)?;
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(format!("{}.cfg", role.name())))?;
    let log_path = cfg.out_dir.join(format!("{}_loss.csv", role.name()));
    let mut log_file = fs::File::create(&log_path)?;
    writeln!(log_file, "{}", StepLog::CSV_HEADER)?;
    let mut log = Vec::new();
    let mut epoch_loss = Vec::new();
    for epoch in 0..cfg.epochs {
        let steps = trainer.train_epoch(epoch)?;
        for s in &steps {
            writeln!(log_file, "{}", s.csv_row())?;
        }
        let mean = steps.iter().map(|s| s.total).sum::<f64>() / steps.len().max(1) as f64;
        log::info!("{} epoch {}/{}: loss {mean:.4}", role.name(), epoch + 1, cfg.epochs);
        epoch_loss.push(mean);
        log.extend(steps);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save_model(&trainer.model, &cfg.out_dir.join(format!("{}_epoch{:03}.ckpt", role.name(), epoch + 1)))?;
        }
    }
    let checkpoint = checkpoint_path(&cfg.out_dir, role);
    save_model(&trainer.model, &checkpoint)?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        epoch_loss,
        checkpoint,
    })
}
