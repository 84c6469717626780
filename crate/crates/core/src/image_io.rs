//! PGM/PPM frames as `H×W×ch` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads a grayscale or RGB image. Other color types are converted to RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ch, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other if other.color().channel_count() <= 2 => (1, other.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, ch], data)
}

/// Writes a PGM (1 channel) or PPM (3 channels), rounding to 8 bits.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, ch) = match *image.shape() {
        [h, w, ch] => (h, w, ch),
        ref other => return Err(Error::Size(format!("expected H×W×ch image, got {other:?}"))),
    };
    let color = match ch {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        _ => return Err(Error::Size(format!("cannot save a {ch}-channel image"))),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, ImageFormat::Pnm)?;
    Ok(())
}
