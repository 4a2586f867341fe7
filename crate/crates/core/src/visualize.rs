//! Token-mask rendering: discarded patches drawn as black grid cells.

use crate::augment::{images_to_tensor, Rgb, RgbImage};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::vit::{PatchConfig, Vit};

/// Rendered masks for one input image.
#[derive(Clone, Debug)]
pub struct MaskView {
    /// One image per stage; the input itself when the model has no stages.
    pub stages: Vec<RgbImage>,
    /// Discarded token count per stage.
    pub discarded: Vec<usize>,
}

/// Copies `image` with every cell of `patch` whose `keep` entry is zero set
/// to black.
pub fn black_out(image: &RgbImage, patch: &PatchConfig, keep: &[bool]) -> RgbImage {
    let mut out = image.clone();
    let p = patch.patch as u32;
    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
        let (r, c) = patch.cell(i);
        let (y0, x0) = (r as u32 * p, c as u32 * p);
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                out.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    out
}

/// Runs inference on `images` and renders each stage's cumulative mask.
/// An unsparsified model passes every image through unchanged.
pub fn visualize<T: Real>(model: &Vit<T>, images: &[RgbImage]) -> Result<Vec<MaskView>> {
    let (w, h) = (model.patch.width as u32, model.patch.height as u32);
    if let Some(bad) = images.iter().find(|img| img.dimensions() != (w, h)) {
        return Err(Error::Image {
            path: None,
            reason: format!("expected {w}x{h}, got {}x{}", bad.width(), bad.height()),
        });
    }
    if model.num_stages() == 0 {
        log::warn!("model has no sparsification stages; images are passed through unchanged");
        return Ok(images
            .iter()
            .map(|img| MaskView {
                stages: vec![img.clone()],
                discarded: vec![0],
            })
            .collect());
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (_, decisions) = model.infer_features(&images_to_tensor::<T>(images)?)?;
    let n = model.num_patches();
    Ok(images
        .iter()
        .enumerate()
        .map(|(b, img)| {
            let mut view = MaskView {
                stages: Vec::new(),
                discarded: Vec::new(),
            };
            for stage in &decisions.stages {
                let keep: Vec<bool> = stage.mask.data()[b * n..(b + 1) * n].iter().map(|&v| v > T::zero()).collect();
                view.discarded.push(keep.iter().filter(|&&k| !k).count());
                view.stages.push(black_out(img, &model.patch, &keep));
            }
            view
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::hts::{keep_count, SparsifySchedule};
    use crate::vit::ModelConfig;

    fn model(p: Option<f64>) -> Vit<f64> {
        let patch = PatchConfig::new(16, 8, 3, 4).unwrap();
        let config = ModelConfig {
            embed_dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            sparsify: p.map(|p| SparsifySchedule::new(vec![1, 2], p).unwrap()),
            bn_neck: false,
        };
        Vit::new(patch, config, 3).unwrap()
    }

    fn images(n: usize) -> Vec<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n).map(|_| RgbImage::from_fn(8, 16, |_, _| Rgb([rng.gen_range(1..=255), rng.gen(), rng.gen()]))).collect()
    }

    #[test]
    fn full_ratio_is_identity() {
        let imgs = images(2);
        for v in visualize(&model(Some(1.0)), &imgs).unwrap().iter().zip(&imgs) {
            assert!(v.0.stages.iter().all(|s| s == v.1));
        }
    }

    #[test]
    fn unsparsified_passes_through() {
        let imgs = images(1);
        let v = visualize(&model(None), &imgs).unwrap();
        assert_eq!(v[0].stages, imgs);
    }

    #[test]
    fn black_cell_counts_and_grid_alignment() {
        let imgs = images(3);
        let m = model(Some(0.5));
        let n = m.num_patches();
        for v in visualize(&m, &imgs).unwrap() {
            for (s, out) in v.stages.iter().enumerate() {
                let expected = n - keep_count(0.5f64.powi(s as i32 + 1), n);
                assert_eq!(v.discarded[s], expected);
                let mut black = 0;
                for i in 0..n {
                    let (r, c) = m.patch.cell(i);
                    let cell: Vec<_> = (0..4).flat_map(|y| (0..4).map(move |x| (c as u32 * 4 + x, r as u32 * 4 + y))).collect();
                    let dark = cell.iter().filter(|&&(x, y)| out.get_pixel(x, y).0 == [0, 0, 0]).count();
                    assert!(dark == 0 || dark == 16, "partial cell");
                    black += usize::from(dark == 16);
                }
                assert_eq!(black, expected);
            }
        }
    }

    #[test]
    fn wrong_size_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(visualize(&model(Some(0.5)), &[img]).is_err());
    }
}
