//! Offset encoding between boxes and priors.

use super::boxes::BBox;
use super::priors::PriorBox;
use crate::error::{invalid, Result};
use crate::Error;

/// Decodes one offset row against its prior into pixel corners.
///
/// `cx = p_cx + v0 * t_x * p_w`, `w = p_w * exp(v1 * t_w)`.
#[inline]
pub fn decode_one(t: [f64; 4], p: &PriorBox, variances: [f64; 2], image_wh: (f64, f64)) -> BBox {
    let cx = p.cx + variances[0] * t[0] * p.w;
    let cy = p.cy + variances[0] * t[1] * p.h;
    let w = p.w * (variances[1] * t[2]).exp();
    let h = p.h * (variances[1] * t[3]).exp();
    let (iw, ih) = image_wh;
    BBox::new_unchecked((cx - w / 2.0) * iw, (cy - h / 2.0) * ih, (cx + w / 2.0) * iw, (cy + h / 2.0) * ih)
}

/// Decodes an `(N, 4)` row-major offset array.
pub fn decode_boxes(loc: &[f64], priors: &[PriorBox], variances: [f64; 2], image_wh: (f64, f64)) -> Result<Vec<BBox>> {
    if loc.len() != priors.len() * 4 {
        return Err(invalid!("{} offset values for {} priors", loc.len(), priors.len()));
    }
    if loc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box offsets".into()));
    }
    Ok(priors
        .iter()
        .zip(loc.chunks_exact(4))
        .map(|(p, t)| decode_one([t[0], t[1], t[2], t[3]], p, variances, image_wh))
        .collect())
}

/// Inverse of [`decode_one`] for a pixel-space box.
pub fn encode_box(b: &BBox, p: &PriorBox, variances: [f64; 2], image_wh: (f64, f64)) -> [f64; 4] {
    let (iw, ih) = image_wh;
    let gcx = (b.xmin + b.xmax) / 2.0 / iw;
    let gcy = (b.ymin + b.ymax) / 2.0 / ih;
    let gw = b.width() / iw;
    let gh = b.height() / ih;
    [
        (gcx - p.cx) / (variances[0] * p.w),
        (gcy - p.cy) / (variances[0] * p.h),
        (gw / p.w).ln() / variances[1],
        (gh / p.h).ln() / variances[1],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: [f64; 2] = [0.1, 0.2];

    fn prior(cx: f64, cy: f64, w: f64, h: f64) -> PriorBox {
        PriorBox { cx, cy, w, h, map: 0 }
    }

    #[test]
    fn zero_offsets_reproduce_priors() {
        let ps = [prior(0.5, 0.5, 0.2, 0.2), prior(0.1, 0.8, 0.05, 0.3)];
        let boxes = decode_boxes(&[0.0; 8], &ps, V, (100.0, 200.0)).unwrap();
        for (b, p) in boxes.iter().zip(&ps) {
            let c = p.corners().scale(100.0, 200.0);
            assert!((b.xmin - c.xmin).abs() < 1e-12 && (b.ymax - c.ymax).abs() < 1e-12);
        }
    }

    #[test]
    fn width_doubles() {
        let p = prior(0.5, 0.5, 0.2, 0.2);
        let t = [0.0, 0.0, 2f64.ln() / V[1], 0.0];
        let b = decode_boxes(&t, &[p], V, (1.0, 1.0)).unwrap()[0];
        assert!((b.width() - 0.4).abs() < 1e-12);
        assert!((b.height() - 0.2).abs() < 1e-12);
        assert!(((b.xmin + b.xmax) / 2.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = prior(0.3, 0.6, 0.25, 0.1);
        for b in [BBox::new(10.0, 50.0, 90.0, 70.0).unwrap(), BBox::new(0.5, 0.5, 3.0, 200.0).unwrap()] {
            let t = encode_box(&b, &p, V, (256.0, 256.0));
            let back = decode_one(t, &p, V, (256.0, 256.0));
            for (x, y) in [(b.xmin, back.xmin), (b.ymin, back.ymin), (b.xmax, back.xmax), (b.ymax, back.ymax)] {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_offsets() {
        let p = [prior(0.5, 0.5, 0.1, 0.1)];
        assert!(decode_boxes(&[0.0; 3], &p, V, (1.0, 1.0)).is_err());
        assert!(decode_boxes(&[0.0, f64::NAN, 0.0, 0.0], &p, V, (1.0, 1.0)).is_err());
    }
}
