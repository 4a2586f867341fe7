//! Occlusion-paste augmentation and the standard augmentation pipeline it
//! is compared against. Images are 8-bit RGB.

mod ops;
mod patch;
mod pnm;

pub use ops::{
    apply_noda, build_dual_batch, color_jitter, common_augment, occlude_all, random_erase, random_patch, slab_range, AugmentConfig,
    DualBatch, EraseParams, Fill, Rect, SampleClock,
};
pub use patch::{load_patch_library, OcclusionPatch, Orientation};
pub use pnm::{decode_ppm, encode_ppm, fit_images, images_to_tensor, read_ppm, to_unit, write_ppm, Rgb, RgbImage};
