//! Annotated HR/LR sample pairs: pairing, augmentation, synthetic scenes and VOC I/O.

mod augment;
mod synth;
mod voc;

pub use augment::{augment, flip_horizontal, flip_vertical, rotate90, Augmentation};
pub use synth::{render_scene, synth_dataset, synth_scenes, Scene, SynthConfig};
pub use voc::{load_voc_dataset, parse_annotation, write_voc, Annotation, LoadReport, VocObject};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{invalid, Result};
use crate::nn::{bicubic_resize, resize_to};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Boxes shorter than this (in HR pixels) on either side are dropped.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid!("unknown split {other}, expected train or test")),
        }
    }
}

/// One training or test pair with ground truth in HR pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T = f32> {
    pub id: String,
    pub hr: ImageTensor<T>,
    pub lr: ImageTensor<T>,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

impl<T: Scalar> Sample<T> {
    pub fn validate(&self, alpha: usize) -> Result<()> {
        let (_, hh, hw) = self.hr.chw()?;
        let (_, lh, lw) = self.lr.chw()?;
        if lh * alpha != hh || lw * alpha != hw {
            return Err(invalid!("{}: LR {lh}x{lw} times {alpha} is not HR {hh}x{hw}", self.id));
        }
        if self.boxes.len() != self.classes.len() {
            return Err(invalid!("{}: {} boxes but {} classes", self.id, self.boxes.len(), self.classes.len()));
        }
        for b in &self.boxes {
            b.validate()?;
            if b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > hw as f64 || b.ymax > hh as f64 {
                return Err(invalid!("{}: box {b:?} outside {hw}x{hh}", self.id));
            }
        }
        Ok(())
    }

    pub fn hr_size(&self) -> (usize, usize) {
        let s = self.hr.shape();
        (s[1], s[2])
    }
}

/// Ordered samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f32> {
    pub split: Split,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn validate(&self, alpha: usize) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(invalid!("duplicate image id {}", s.id));
            }
            s.validate(alpha)?;
            if let Some(c) = s.classes.iter().find(|&&c| c >= self.class_names.len()) {
                return Err(invalid!("{}: class {c} outside the class table", s.id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Result of [`make_pair`] with the number of boxes that collapsed.
#[derive(Clone, Debug)]
pub struct Paired<T> {
    pub sample: Sample<T>,
    pub dropped_boxes: usize,
}

/// Builds an HR/LR pair from an original frame.
///
/// The original is first resized to `2 * hr_size` square if needed; HR is
/// the original shrunk by 2 and LR the original shrunk by `2 * alpha`.
/// Boxes follow the same scaling and are clipped to HR bounds; boxes with
/// a side under [`MIN_BOX_SIDE`] are dropped and counted.
pub fn make_pair<T: Scalar>(
    id: &str,
    original: &ImageTensor<T>,
    boxes: &[BBox],
    classes: &[usize],
    alpha: usize,
    hr_size: usize,
) -> Result<Paired<T>> {
    if alpha == 0 || hr_size % alpha != 0 || hr_size / alpha < 8 {
        return Err(invalid!("HR size {hr_size} must be a multiple of alpha {alpha} with LR >= 8"));
    }
    if boxes.len() != classes.len() {
        return Err(invalid!("{} boxes but {} classes", boxes.len(), classes.len()));
    }
    let (_, h, w) = original.chw()?;
    let norm = 2 * hr_size;
    let (frame, sx, sy) = if (h, w) == (norm, norm) {
        (original.clone(), 1.0, 1.0)
    } else {
        (resize_to(original, (norm, norm))?, norm as f64 / w as f64, norm as f64 / h as f64)
    };
    let hr = bicubic_resize(&frame, Ratio::new(1, 2))?;
    let lr = bicubic_resize(&frame, Ratio::new(1, 2 * alpha as u32))?;
    let mut out_boxes = Vec::new();
    let mut out_classes = Vec::new();
    let mut dropped = 0;
    for (b, &c) in boxes.iter().zip(classes) {
        let scaled = b.scale(sx / 2.0, sy / 2.0).clip(hr_size as f64, hr_size as f64);
        match scaled {
            Some(s) if s.width() >= MIN_BOX_SIDE && s.height() >= MIN_BOX_SIDE => {
                out_boxes.push(s);
                out_classes.push(c);
            }
            _ => dropped += 1,
        }
    }
    Ok(Paired {
        sample: Sample { id: id.to_string(), hr, lr, boxes: out_boxes, classes: out_classes },
        dropped_boxes: dropped,
    })
}

/// `10 * log10(peak^2 / MSE)`, reported as [`PSNR_CAP`] when the images (nearly) agree.
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::error::shape_err!("PSNR shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>()
        / a.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn pair_shapes_and_box_scaling() {
        let orig = Tensor::<f32>::full(&[3, 1024, 1024], 0.3);
        let b = BBox::new(100.0, 100.0, 300.0, 300.0).unwrap();
        let p = make_pair("x", &orig, &[b], &[0], 4, 512).unwrap();
        assert_eq!(p.sample.hr.shape(), &[3, 512, 512]);
        assert_eq!(p.sample.lr.shape(), &[3, 128, 128]);
        assert_eq!(p.sample.boxes, vec![BBox::new(50.0, 50.0, 150.0, 150.0).unwrap()]);
        assert!(p.sample.hr.data().iter().chain(p.sample.lr.data()).all(|v| (v - 0.3).abs() < 1e-6));
        p.sample.validate(4).unwrap();
    }

    #[test]
    fn non_square_originals_are_normalized_and_tiny_boxes_dropped() {
        let orig = Tensor::<f32>::full(&[3, 60, 100], 0.5);
        let big = BBox::new(10.0, 6.0, 50.0, 30.0).unwrap();
        let tiny = BBox::new(10.0, 10.0, 12.0, 12.0).unwrap();
        let p = make_pair("y", &orig, &[big, tiny], &[0, 0], 2, 32).unwrap();
        assert_eq!(p.sample.hr.shape(), &[3, 32, 32]);
        assert_eq!(p.sample.lr.shape(), &[3, 16, 16]);
        assert_eq!(p.dropped_boxes, 1);
        let s = &p.sample.boxes[0];
        assert!((s.xmin - 10.0 * 64.0 / 100.0 / 2.0).abs() < 1e-12);
        assert!((s.ymax - 30.0 * 64.0 / 60.0 / 2.0).abs() < 1e-12);
        assert!(make_pair("z", &orig, &[], &[], 4, 30).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert!(psnr(&a, &a, 1.0).unwrap() >= 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = Tensor::from_fn_chw(3, 4, 4, |c, y, x| (c + y * x) as f64 * 0.01);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }
}
