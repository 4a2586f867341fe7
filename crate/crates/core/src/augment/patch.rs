use std::fs;
use std::path::Path;

use log::warn;

use super::pnm::{read_ppm, RgbImage};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Pasted as a full-height slab against the left or right edge.
    Vertical,
    /// Pasted as a full-width slab against the top or bottom edge.
    Horizontal,
}

impl Orientation {
    /// Vertical iff `p_h / p_w > 2`, evaluated exactly on integers.
    pub fn classify(height: u32, width: u32) -> Self {
        if u64::from(height) > 2 * u64::from(width) {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        }
    }
}

/// External occluder image.
#[derive(Clone, Debug)]
pub struct OcclusionPatch {
    pub pixels: RgbImage,
    pub aspect_ratio: f64,
    pub orientation: Orientation,
}

impl OcclusionPatch {
    pub fn new(pixels: RgbImage) -> Self {
        let (w, h) = pixels.dimensions();
        Self {
            aspect_ratio: f64::from(h) / f64::from(w),
            orientation: Orientation::classify(h, w),
            pixels,
        }
    }
}

/// Loads every `.ppm` file under `dir`, in file-name order. Files that
/// fail to parse are skipped with a warning.
pub fn load_patch_library(dir: &Path) -> Result<Vec<OcclusionPatch>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        match read_ppm(&p) {
            Ok(img) => out.push(OcclusionPatch::new(img)),
            Err(e) => warn!("skipping occluder {}: {e}", p.display()),
        }
    }
    Ok(out)
}
