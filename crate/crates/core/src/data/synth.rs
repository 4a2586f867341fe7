//! Synthetic re-identification data: textured per-identity figures seen
//! through simulated cameras, plus a separate occluder library.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, ManifestRow, Split};
use crate::augment::{write_ppm, Rgb, RgbImage};
use crate::error::{Error, Result};
use crate::par::{derive_seed, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub images_per_id: usize,
    pub height: u32,
    pub width: u32,
    pub cameras: usize,
    /// Identities assigned to the training split; the rest are test.
    pub train_identities: usize,
    /// Occluders per library (train and eval each).
    pub occluders: usize,
    /// Standard deviation of per-pixel noise, in 8-bit units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 32,
            images_per_id: 8,
            height: 64,
            width: 32,
            cameras: 2,
            train_identities: 16,
            occluders: 24,
            noise: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::config("synthetic data needs at least two cameras"));
        }
        if self.train_identities == 0 || self.train_identities >= self.identities {
            return Err(Error::config("train identities must leave a non-empty test split"));
        }
        if self.images_per_id < self.cameras + 1 {
            return Err(Error::config("each identity needs one query per camera plus a gallery image"));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::config("synthetic images must be at least 16x8"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    HStripes(u32),
    VStripes(u32),
    Split,
}

/// Appearance of one identity; fixed across all of its images.
#[derive(Clone, Debug)]
struct Figure {
    hair: [f64; 3],
    skin: [f64; 3],
    top: [f64; 3],
    top_alt: [f64; 3],
    pattern: Pattern,
    legs: [f64; 3],
    shoes: [f64; 3],
    bag: Option<([f64; 3], bool)>,
    shoulder: f64,
    hip: f64,
}

fn vivid(rng: &mut impl Rng) -> [f64; 3] {
    let h = rng.gen_range(0.0..6.0f64);
    let s = rng.gen_range(0.45..1.0);
    let v = rng.gen_range(90.0..245.0);
    let f = h.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn dull(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    let base = rng.gen_range(lo..hi);
    [0, 1, 2].map(|_| (base + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0))
}

impl Figure {
    fn sample(rng: &mut impl Rng) -> Self {
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Solid,
            1 => Pattern::HStripes(rng.gen_range(2..5)),
            2 => Pattern::VStripes(rng.gen_range(2..4)),
            _ => Pattern::Split,
        };
        let legs = if rng.gen_bool(0.5) { vivid(rng) } else { dull(rng, 20.0, 200.0) };
        Self {
            hair: dull(rng, 10.0, 120.0),
            skin: {
                let t = rng.gen_range(0.0..1.0);
                [120.0 + 110.0 * t, 80.0 + 100.0 * t, 60.0 + 90.0 * t]
            },
            top: vivid(rng),
            top_alt: vivid(rng),
            pattern,
            legs,
            shoes: dull(rng, 10.0, 230.0),
            bag: rng.gen_bool(0.4).then(|| (vivid(rng), rng.gen_bool(0.5))),
            shoulder: rng.gen_range(0.28..0.36),
            hip: rng.gen_range(0.2..0.28),
        }
    }

    /// Clean colour at `(x, y)` in unit coordinates, or `None` for
    /// background.
    fn color(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let dx = u - 0.5;
        // head
        if ((dx / 0.13).powi(2) + ((v - 0.12) / 0.08).powi(2)) <= 1.0 {
            return Some(if v < 0.08 { self.hair } else { self.skin });
        }
        // torso
        if (0.2..0.56).contains(&v) && dx.abs() <= self.shoulder {
            if let Some((c, left)) = self.bag {
                let side = if left { -1.0 } else { 1.0 };
                if dx * side > self.shoulder - 0.1 && (0.3..0.5).contains(&v) {
                    return Some(c);
                }
            }
            let t = (v - 0.2) / 0.36;
            let alt = match self.pattern {
                Pattern::Solid => false,
                Pattern::HStripes(n) => ((t * f64::from(2 * n)) as u32) % 2 == 1,
                Pattern::VStripes(n) => (((dx + self.shoulder) / (2.0 * self.shoulder) * f64::from(2 * n)) as u32) % 2 == 1,
                Pattern::Split => t > 0.5,
            };
            return Some(if alt { self.top_alt } else { self.top });
        }
        // legs with a gap between them
        if (0.56..0.93).contains(&v) && dx.abs() <= self.hip && (v < 0.65 || dx.abs() > 0.03) {
            return Some(self.legs);
        }
        if (0.93..0.98).contains(&v) && dx.abs() <= self.hip + 0.02 && dx.abs() > 0.03 {
            return Some(self.shoes);
        }
        None
    }
}

/// Per-camera colour gain and offset, and background tone.
#[derive(Clone, Debug)]
struct Camera {
    gain: [f64; 3],
    offset: f64,
    background: [f64; 3],
}

impl Camera {
    fn sample(index: usize, rng: &mut impl Rng) -> Self {
        if index == 0 {
            return Self {
                gain: [1.0; 3],
                offset: 0.0,
                background: [110.0, 115.0, 105.0],
            };
        }
        Self {
            gain: [0, 1, 2].map(|_| rng.gen_range(0.85..1.15)),
            offset: rng.gen_range(-15.0..15.0),
            background: dull(rng, 70.0, 160.0),
        }
    }

    fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| c[i] * self.gain[i] + self.offset)
    }
}

fn to_u8(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn render(figure: &Figure, camera: &Camera, w: u32, h: u32, noise: f64, rng: &mut impl Rng) -> RgbImage {
    let normal = Normal::new(0.0, noise.max(1e-9)).expect("finite noise");
    RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = ((f64::from(x) + 0.5) / f64::from(w), (f64::from(y) + 0.5) / f64::from(h));
        let clean = figure.color(u, v).map_or(camera.background, |c| camera.apply(c));
        to_u8(clean.map(|c| c + normal.sample(rng)))
    })
}

fn occluder(vertical: bool, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = if vertical {
        (rng.gen_range(8..16), rng.gen_range(40..64))
    } else {
        (rng.gen_range(36..64), rng.gen_range(12..26))
    };
    let (a, b) = (vivid(rng), dull(rng, 20.0, 200.0));
    let period = rng.gen_range(3..9);
    let diagonal = rng.gen_bool(0.5);
    RgbImage::from_fn(w, h, |x, y| {
        let k = if diagonal { x + y } else if vertical { y } else { x };
        let c = if (k / period) % 2 == 0 { a } else { b };
        to_u8(c.map(|v| v + rng.gen_range(-15.0..15.0)))
    })
}

pub const OCCLUDER_TRAIN_DIR: &str = "occluders/train";
pub const OCCLUDER_EVAL_DIR: &str = "occluders/eval";

/// Writes the dataset under `out` and returns its manifest. Each test
/// identity contributes its first image from every camera as a query; the
/// rest form the gallery.
pub fn gen_synth(spec: &SynthSpec, out: &Path, exec: Exec) -> Result<Manifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras: Vec<Camera> = (0..spec.cameras).map(|c| Camera::sample(c, &mut rng)).collect();
    let figures: Vec<Figure> = (0..spec.identities).map(|_| Figure::sample(&mut rng)).collect();

    let mut rows = Vec::with_capacity(spec.identities * spec.images_per_id);
    for (id, _) in figures.iter().enumerate() {
        for k in 0..spec.images_per_id {
            let camera = k % spec.cameras;
            let split = if id < spec.train_identities {
                Split::Train
            } else if k < spec.cameras {
                Split::Query
            } else {
                Split::Gallery
            };
            rows.push(ManifestRow {
                path: format!("images/{id:04}_{k:02}_c{camera}.ppm"),
                identity: id,
                camera,
                split,
            });
        }
    }
    let written = exec.map_slice(&rows, |i, row| {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 1, i as u64]));
        let img = render(&figures[row.identity], &cameras[row.camera], spec.width, spec.height, spec.noise, &mut r);
        write_ppm(&out.join(&row.path), &img)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;

    for (dir, stream) in [(OCCLUDER_TRAIN_DIR, 2u64), (OCCLUDER_EVAL_DIR, 3)] {
        for i in 0..spec.occluders {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, stream, i as u64]));
            write_ppm(&out.join(dir).join(format!("{i:03}.ppm")), &occluder(i % 2 == 0, &mut r))?;
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        rows,
    };
    manifest.save()?;
    Ok(manifest)
}
