//! PNG/JPEG conversion between files and `(3, H, W)` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub fn read_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn from_rgb<T: Scalar>(img: &RgbImage) -> ImageTensor<T> {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn_chw(3, h as usize, w as usize, |c, y, x| {
        T::from_f64_lossy(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Quantizes to 8 bits with clamping to `[0, 1]`.
pub fn to_rgb<T: Scalar>(t: &ImageTensor<T>) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(crate::error::shape_err!("expected 3 channels, got {c}"));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| {
            let v = t.at(ch, y as usize, x as usize).as_f64().clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn write_image<T: Scalar>(t: &ImageTensor<T>, path: &Path) -> Result<()> {
    write_png(&to_rgb(t)?, path)
}
