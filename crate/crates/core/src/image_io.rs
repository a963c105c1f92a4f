//! Reading and writing 8-bit RGB images as `(1, 3, H, W)` tensors of pixel
//! values in `[0, 255]`. PNG and PPM/PNM are supported.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pnm" | "pgm" | "pbm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedImage(format!(
            "{}: expected a .png or .ppm file",
            path.display()
        ))),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let format = format_for(path)?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::UnsupportedImage(format!("{}: {e}", path.display())))?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn save_image(path: &Path, pixels: &Tensor) -> Result<()> {
    let format = format_for(path)?;
    to_rgb(pixels)?
        .save_with_format(path, format)
        .map_err(|e| Error::UnsupportedImage(format!("{}: {e}", path.display())))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.plane_mut(0, c)[y as usize * w + x as usize] = p.0[c] as f64;
        }
    }
    t
}

/// Rounds and clamps to 8-bit RGB.
pub fn to_rgb(pixels: &Tensor) -> Result<RgbImage> {
    if pixels.batch() != 1 || pixels.channels() != 3 {
        return Err(Error::shape(
            "to_rgb",
            format!("expected (1, 3, H, W), got {:?}", pixels.shape()),
        ));
    }
    let (h, w) = (pixels.height(), pixels.width());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            pixels.plane(0, c)[i].round().clamp(0.0, 255.0) as u8
        }))
    }))
}
