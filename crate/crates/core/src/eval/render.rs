//! Drawing boxes and score labels onto images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::detect::{BBox, Detection};
use crate::error::Result;
use crate::imageio::{to_rgb, write_png};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const PREDICTION_COLOR: [u8; 3] = [255, 40, 40];
pub const GROUND_TRUTH_COLOR: [u8; 3] = [40, 255, 80];

// 3x5 glyphs, one row per u8 (low three bits, MSB left)
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];
const DOT: [u8; 5] = [0, 0, 0, 0, 2];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn rect(img: &mut RgbImage, b: &BBox, c: [u8; 3]) {
    let (x0, y0) = (b.xmin.floor() as i64, b.ymin.floor() as i64);
    let (x1, y1) = (b.xmax.ceil() as i64 - 1, b.ymax.ceil() as i64 - 1);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

fn label(img: &mut RgbImage, text: &str, x: i64, y: i64, c: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let glyph = match ch {
            '0'..='9' => DIGITS[ch as usize - '0' as usize],
            '.' => DOT,
            _ => continue,
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, cx + col, y + row as i64, c);
                }
            }
        }
        cx += 4;
    }
}

/// Image with ground truth and predictions (score above the box) drawn on top.
pub fn draw_detections<T: Scalar>(image: &ImageTensor<T>, detections: &[Detection], ground_truth: &[BBox]) -> Result<RgbImage> {
    let mut img = to_rgb(image)?;
    for g in ground_truth {
        rect(&mut img, g, GROUND_TRUTH_COLOR);
    }
    for d in detections {
        rect(&mut img, &d.bbox, PREDICTION_COLOR);
        let y = (d.bbox.ymin.floor() as i64 - 6).max(0);
        label(&mut img, &format!("{:.2}", d.score), d.bbox.xmin.floor() as i64, y, PREDICTION_COLOR);
    }
    Ok(img)
}

pub fn render_detections<T: Scalar>(image: &ImageTensor<T>, detections: &[Detection], ground_truth: &[BBox], path: &Path) -> Result<()> {
    write_png(&draw_detections(image, detections, ground_truth)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn dims_and_colors() {
        let t = Tensor::<f32>::full(&[3, 20, 30], 0.0);
        let gt = [BBox::new(2.0, 3.0, 10.0, 12.0).unwrap()];
        let img = draw_detections(&t, &[], &gt).unwrap();
        assert_eq!(img.dimensions(), (30, 20));
        assert_eq!(img.get_pixel(2, 3).0, GROUND_TRUTH_COLOR);
        assert_eq!(img.get_pixel(9, 11).0, GROUND_TRUTH_COLOR);
        assert_eq!(img.get_pixel(5, 6).0, [0, 0, 0]);
        let det = Detection { bbox: BBox::new(12.0, 8.0, 25.0, 18.0).unwrap(), class_id: 0, score: 0.5 };
        let img = draw_detections(&t, &[det], &[]).unwrap();
        assert_eq!(img.get_pixel(12, 8).0, PREDICTION_COLOR);
        assert!(img.pixels().all(|p| p.0 != GROUND_TRUTH_COLOR));
    }
}
