//! Binary portable pixmap (P6) IO and conversion to model input.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
pub use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: Some(path.to_path_buf()),
        reason: reason.to_string(),
    }
}

/// Decodes P6 bytes. Other PNM variants are rejected.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image {
            path: None,
            reason: "missing P6 magic".into(),
        });
    }
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
        .decode()
        .map_err(|e| Error::Image {
            path: None,
            reason: e.to_string(),
        })?;
    Ok(img.into_rgb8())
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: None,
            reason: e.to_string(),
        })?;
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Image { reason, .. } => image_error(path, reason),
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Maps 8-bit channels to `[-1, 1]`.
pub fn to_unit<T: Real>(v: u8) -> T {
    T::lit(f64::from(v) / 127.5 - 1.0)
}

/// Stacks equally sized images into `[B, 3, H, W]`.
pub fn images_to_tensor<T: Real>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(Error::shape(
                "image batch",
                &[h, w],
                &[img.height() as usize, img.width() as usize],
            ));
        }
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend((0..h * w).map(|i| to_unit::<T>(raw[i * 3 + c])));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Resizes every image that is not already `w × h`.
pub fn fit_images(images: Vec<RgbImage>, w: u32, h: u32) -> Vec<RgbImage> {
    images
        .into_iter()
        .map(|img| {
            if img.dimensions() == (w, h) {
                img
            } else {
                image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle)
            }
        })
        .collect()
}
