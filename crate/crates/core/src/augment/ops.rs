use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::patch::{OcclusionPatch, Orientation};
use super::pnm::{Rgb, RgbImage};
use crate::error::{Error, Result};
use crate::par::{derive_seed, Exec};

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fill {
    #[default]
    Zero,
    Random,
}

/// Rectangle sampling shared by random erasing and random patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EraseParams {
    pub probability: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub fill: Fill,
}

impl Default for EraseParams {
    fn default() -> Self {
        Self {
            probability: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 1.0 / 0.3),
            fill: Fill::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub noda_enabled: bool,
    pub erase: EraseParams,
    pub random_patch: EraseParams,
    /// Brightness, contrast and saturation factors for occluder patches
    /// are drawn from `1 ± jitter`.
    pub jitter: f64,
    /// The same jitter applied to every training view.
    pub view_jitter: f64,
    /// Smallest per-side fraction kept by the occluder crop.
    pub min_crop: f64,
    pub pad: u32,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noda_enabled: true,
            erase: EraseParams::default(),
            random_patch: EraseParams::default(),
            jitter: 0.2,
            view_jitter: 0.4,
            min_crop: 0.8,
            pad: 4,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// Brightness, contrast and saturation jitter.
pub fn color_jitter(img: &RgbImage, amount: f64, rng: &mut impl Rng) -> RgbImage {
    let mut draw = || if amount > 0.0 { rng.gen_range(1.0 - amount..=1.0 + amount) } else { 1.0 };
    let (fb, fc, fs) = (draw(), draw(), draw());
    let n = f64::from(img.width() * img.height()).max(1.0);
    let mean = img.pixels().map(luma).sum::<f64>() / n * fb;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let c: [f64; 3] = [0, 1, 2].map(|i| f64::from(p[i]) * fb);
        let c = c.map(|v| (v - mean) * fc + mean);
        let g = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        *p = Rgb(c.map(|v| ((v - g) * fs + g).round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// Slab thickness range `[⌈D/3⌉, ⌊D/2⌋]` for an occluded dimension `D`.
pub fn slab_range(dim: u32) -> (u32, u32) {
    let lo = dim.div_ceil(3).max(1);
    let hi = (dim / 2).max(lo);
    (lo, hi)
}

/// Pastes a jittered, flipped, cropped and resized occluder flush against
/// one image edge. Horizontal occluders become full-width slabs at the
/// top or bottom, vertical ones full-height slabs at the left or right.
/// Returns the augmented image and the pasted rectangle.
pub fn apply_noda(img: &RgbImage, patch: &OcclusionPatch, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, Rect) {
    let (w, h) = img.dimensions();
    let mut occ = color_jitter(&patch.pixels, cfg.jitter, rng);
    if rng.gen_bool(0.5) {
        occ = imageops::flip_horizontal(&occ);
    }
    let (pw, ph) = occ.dimensions();
    let cw = rng.gen_range(((f64::from(pw) * cfg.min_crop).ceil() as u32).clamp(1, pw)..=pw);
    let ch = rng.gen_range(((f64::from(ph) * cfg.min_crop).ceil() as u32).clamp(1, ph)..=ph);
    let cx = rng.gen_range(0..=pw - cw);
    let cy = rng.gen_range(0..=ph - ch);
    let occ = imageops::crop_imm(&occ, cx, cy, cw, ch).to_image();

    let rect = match patch.orientation {
        Orientation::Horizontal => {
            let (lo, hi) = slab_range(h);
            let sh = rng.gen_range(lo..=hi);
            let y = if rng.gen_bool(0.5) { 0 } else { h - sh };
            Rect { x: 0, y, w, h: sh }
        }
        Orientation::Vertical => {
            let (lo, hi) = slab_range(w);
            let sw = rng.gen_range(lo..=hi);
            let x = if rng.gen_bool(0.5) { 0 } else { w - sw };
            Rect { x, y: 0, w: sw, h }
        }
    };
    let occ = imageops::resize(&occ, rect.w, rect.h, FilterType::Triangle);
    let mut out = img.clone();
    imageops::replace(&mut out, &occ, i64::from(rect.x), i64::from(rect.y));
    (out, rect)
}

/// Samples a rectangle with area fraction and aspect ratio from `params`
/// that fits inside `w × h`. Gives up after 100 attempts.
fn sample_rect(w: u32, h: u32, params: &EraseParams, rng: &mut impl Rng) -> Option<Rect> {
    let area = f64::from(w) * f64::from(h);
    for _ in 0..100 {
        let target = rng.gen_range(params.area.0..=params.area.1) * area;
        let ratio = rng.gen_range(params.aspect.0.ln()..=params.aspect.1.ln()).exp();
        let rh = (target * ratio).sqrt().round() as u32;
        let rw = (target / ratio).sqrt().round() as u32;
        if rh >= 1 && rw >= 1 && rh < h && rw < w {
            let x = rng.gen_range(0..=w - rw);
            let y = rng.gen_range(0..=h - rh);
            return Some(Rect { x, y, w: rw, h: rh });
        }
    }
    None
}

/// Random erasing in place. Returns the erased rectangle, if any.
pub fn random_erase(img: &mut RgbImage, params: &EraseParams, rng: &mut impl Rng) -> Option<Rect> {
    if params.probability <= 0.0 || !rng.gen_bool(params.probability.min(1.0)) {
        return None;
    }
    let rect = sample_rect(img.width(), img.height(), params, rng)?;
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            let v = match params.fill {
                Fill::Zero => Rgb([0, 0, 0]),
                Fill::Random => Rgb(rng.gen()),
            };
            img.put_pixel(x, y, v);
        }
    }
    Some(rect)
}

/// Random patch in place: a rectangle cut from `source` is pasted at a
/// random position of `img`.
pub fn random_patch(img: &mut RgbImage, source: &RgbImage, params: &EraseParams, rng: &mut impl Rng) -> Option<Rect> {
    if params.probability <= 0.0 || !rng.gen_bool(params.probability.min(1.0)) {
        return None;
    }
    let (w, h) = (img.width().min(source.width()), img.height().min(source.height()));
    let r = sample_rect(w, h, params, rng)?;
    let sx = rng.gen_range(0..=source.width() - r.w);
    let sy = rng.gen_range(0..=source.height() - r.h);
    let piece = imageops::crop_imm(source, sx, sy, r.w, r.h).to_image();
    imageops::replace(img, &piece, i64::from(r.x), i64::from(r.y));
    Some(r)
}

/// Resize to `w × h`, pad by `pad` with mid-grey, random crop back, random flip,
/// colour jitter.
pub fn common_augment(img: &RgbImage, w: u32, h: u32, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let base = if img.dimensions() == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, w, h, FilterType::Triangle)
    };
    let mut out = if cfg.pad > 0 {
        // mid-grey border, zero after normalisation
        let mut padded = RgbImage::from_pixel(w + 2 * cfg.pad, h + 2 * cfg.pad, Rgb([128, 128, 128]));
        imageops::replace(&mut padded, &base, i64::from(cfg.pad), i64::from(cfg.pad));
        let x = rng.gen_range(0..=2 * cfg.pad);
        let y = rng.gen_range(0..=2 * cfg.pad);
        imageops::crop_imm(&padded, x, y, w, h).to_image()
    } else {
        base
    };
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0)) {
        out = imageops::flip_horizontal(&out);
    }
    if cfg.view_jitter > 0.0 {
        out = color_jitter(&out, cfg.view_jitter, rng);
    }
    out
}

/// Two augmented views of the same images with shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    pub a: Vec<RgbImage>,
    pub b: Vec<RgbImage>,
    pub labels: Vec<usize>,
}

/// Position of one sample in the training run, for RNG stream derivation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleClock {
    pub epoch: u64,
    pub step: u64,
}

fn sample_rng(cfg: &AugmentConfig, clock: SampleClock, index: usize, view: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, clock.epoch, clock.step, index as u64, view]))
}

fn view_a(images: &[RgbImage], i: usize, w: u32, h: u32, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = common_augment(&images[i], w, h, cfg, rng);
    random_erase(&mut out, &cfg.erase, rng);
    if images.len() > 1 {
        let j = (i + 1 + rng.gen_range(0..images.len() - 1)) % images.len();
        let src = common_augment(&images[j], w, h, cfg, rng);
        random_patch(&mut out, &src, &cfg.random_patch, rng);
    }
    out
}

/// Batch A: common augmentation, random erasing and random patch. Batch B:
/// common augmentation and occlusion paste, or a second A-style view when
/// occlusion paste is disabled. Each sample draws from its own stream, so
/// the result does not depend on `exec`.
pub fn build_dual_batch(
    images: &[RgbImage],
    labels: &[usize],
    cfg: &AugmentConfig,
    library: &[OcclusionPatch],
    clock: SampleClock,
    exec: Exec,
) -> Result<DualBatch> {
    if images.len() != labels.len() {
        return Err(Error::shape("dual batch labels", &[images.len()], &[labels.len()]));
    }
    if cfg.noda_enabled && library.is_empty() {
        return Err(Error::config("occlusion paste enabled with an empty patch library"));
    }
    let Some(first) = images.first() else {
        return Err(Error::contract("empty batch"));
    };
    let (w, h) = first.dimensions();
    let a = exec.map_range(images.len(), |i| view_a(images, i, w, h, cfg, &mut sample_rng(cfg, clock, i, 0)));
    let b = exec.map_range(images.len(), |i| {
        let mut rng = sample_rng(cfg, clock, i, 1);
        if cfg.noda_enabled {
            let base = common_augment(&images[i], w, h, cfg, &mut rng);
            let patch = library.choose(&mut rng).expect("non-empty library");
            apply_noda(&base, patch, cfg, &mut rng).0
        } else {
            view_a(images, i, w, h, cfg, &mut rng)
        }
    });
    Ok(DualBatch {
        a,
        b,
        labels: labels.to_vec(),
    })
}

/// Deterministically occludes every image with a patch from `library`;
/// used to build occluded evaluation queries.
pub fn occlude_all(images: &[RgbImage], library: &[OcclusionPatch], seed: u64, exec: Exec) -> Result<Vec<RgbImage>> {
    if library.is_empty() {
        return Err(Error::config("empty patch library"));
    }
    let cfg = AugmentConfig::default();
    Ok(exec.map_range(images.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let patch = library.choose(&mut rng).expect("non-empty library");
        apply_noda(&images[i], patch, &cfg, &mut rng).0
    }))
}
