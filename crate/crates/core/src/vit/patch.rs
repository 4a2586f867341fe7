use super::config::PatchConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Rearranges `[B, d, H, W]` images into `[B, N, P·P·d]` patch vectors.
/// Patches are taken row-major over the grid; inside a patch the layout is
/// (row, col, channel).
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::shape(
            "patchify",
            &[0, cfg.channels, cfg.height, cfg.width],
            s,
        ));
    }
    let b = s[0];
    let (p, d, h, w) = (cfg.patch, cfg.channels, cfg.height, cfg.width);
    let (rows, cols) = cfg.grid();
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * rows * cols * pd);
    for bi in 0..b {
        for gr in 0..rows {
            for gc in 0..cols {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..d {
                            out.push(src[((bi * d + c) * h + gr * p + y) * w + gc * p + x]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, rows * cols, pd], out)
}
