use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub const fn new_unchecked(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite());
        if !finite || self.xmax <= self.xmin || self.ymax <= self.ymin {
            return Err(invalid!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Intersection with `[0, w] x [0, h]`; `None` if nothing positive remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        let b = Self {
            xmin: self.xmin.clamp(0.0, w),
            ymin: self.ymin.clamp(0.0, h),
            xmax: self.xmax.clamp(0.0, w),
            ymax: self.ymax.clamp(0.0, h),
        };
        (b.xmax > b.xmin && b.ymax > b.ymin).then_some(b)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self { xmin: self.xmin * sx, ymin: self.ymin * sy, xmax: self.xmax * sx, ymax: self.ymax * sy }
    }
}

/// A scored, classified box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Object class, 0-based; background is not a class here.
    pub class_id: usize,
    pub score: f64,
}

/// Intersection over union without validity checks; 0 for empty unions.
#[inline]
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection area over union area of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// One record per line: `image_id class_id score xmin ymin xmax ymax`.
pub fn format_detections(image_id: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format!(
            "{image_id} {} {:.4} {:.4} {:.4} {:.4} {:.4}\n",
            d.class_id, d.score, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax
        ));
    }
    s
}

/// Parses the output of [`format_detections`] into `(image_id, detection)` pairs.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(invalid!("detection line {}: expected 7 fields, got {}", n + 1, f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| invalid!("detection line {}: bad number {s}", n + 1));
        let class_id = f[1].parse().map_err(|_| invalid!("detection line {}: bad class {}", n + 1, f[1]))?;
        out.push((
            f[0].to_string(),
            Detection {
                class_id,
                score: num(f[2])?,
                bbox: BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?)?,
            },
        ));
    }
    Ok(out)
}
