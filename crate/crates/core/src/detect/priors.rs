use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::error::{invalid, Result};

/// Reference box in normalized centre form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Pyramid level the prior belongs to.
    pub map: usize,
}

impl PriorBox {
    /// Corner form in normalized coordinates.
    pub fn corners(&self) -> BBox {
        BBox::new_unchecked(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Anchor scales and aspect ratios per pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// `levels + 1` increasing scales; level `k` uses `scales[k]` and `sqrt(scales[k] * scales[k+1])`.
    pub scales: Vec<f64>,
    /// Extra aspect ratios per level; each ratio `r` adds `r` and `1/r` boxes.
    pub aspect_ratios: Vec<Vec<f64>>,
    /// Whether each level also gets the `sqrt(s_k * s_k+1)` square.
    #[serde(default = "yes")]
    pub extra_square: bool,
}

fn yes() -> bool {
    true
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self, level: usize) -> usize {
        1 + usize::from(self.extra_square) + 2 * self.aspect_ratios[level].len()
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.scales.len() != levels + 1 || self.aspect_ratios.len() != levels {
            return Err(invalid!(
                "anchor spec for {levels} maps needs {} scales and {levels} ratio lists, got {} and {}",
                levels + 1,
                self.scales.len(),
                self.aspect_ratios.len()
            ));
        }
        if self.scales.iter().any(|s| !(*s > 0.0)) || self.aspect_ratios.iter().flatten().any(|r| !(*r > 0.0)) {
            return Err(invalid!("anchor scales and aspect ratios must be positive"));
        }
        Ok(())
    }

    /// Normalized `(w, h)` of every anchor at one level, in emission order.
    pub fn shapes(&self, level: usize) -> Vec<(f64, f64)> {
        let s = self.scales[level];
        let s2 = (s * self.scales[level + 1]).sqrt();
        let mut v = vec![(s, s)];
        if self.extra_square {
            v.push((s2, s2));
        }
        for &r in &self.aspect_ratios[level] {
            let q = r.sqrt();
            v.push((s * q, s / q));
            v.push((s / q, s * q));
        }
        v
    }
}

/// Priors for every cell of every map, ordered by map, row, column, anchor.
///
/// Boxes are clipped to the unit square.
pub fn generate_priors(spec: &AnchorSpec, map_sizes: &[(usize, usize)]) -> Result<Vec<PriorBox>> {
    if map_sizes.is_empty() {
        return Err(invalid!("no feature maps to place priors on"));
    }
    spec.validate(map_sizes.len())?;
    for pair in map_sizes.windows(2) {
        if pair[1].0 >= pair[0].0 && pair[1].1 >= pair[0].1 {
            return Err(invalid!("map sizes must strictly decrease, got {map_sizes:?}"));
        }
    }
    let mut out = Vec::new();
    for (k, &(h, w)) in map_sizes.iter().enumerate() {
        let shapes = spec.shapes(k);
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) / w as f64;
                let cy = (y as f64 + 0.5) / h as f64;
                for &(bw, bh) in &shapes {
                    let x0 = (cx - bw / 2.0).clamp(0.0, 1.0);
                    let x1 = (cx + bw / 2.0).clamp(0.0, 1.0);
                    let y0 = (cy - bh / 2.0).clamp(0.0, 1.0);
                    let y1 = (cy + bh / 2.0).clamp(0.0, 1.0);
                    out.push(PriorBox {
                        cx: (x0 + x1) / 2.0,
                        cy: (y0 + y1) / 2.0,
                        w: x1 - x0,
                        h: y1 - y0,
                        map: k,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_for_single_map() {
        let spec = AnchorSpec { scales: vec![0.2, 0.4], aspect_ratios: vec![vec![2.0]], extra_square: false };
        assert_eq!(spec.anchors_per_cell(0), 3);
        let p = generate_priors(&spec, &[(2, 2)]).unwrap();
        assert_eq!(p.len(), 12);
        let four = AnchorSpec { extra_square: true, ..spec.clone() };
        assert_eq!(generate_priors(&four, &[(2, 2)]).unwrap().len(), 16);
        assert!(generate_priors(&spec, &[]).is_err());
    }

    #[test]
    fn priors_are_clipped() {
        let spec = AnchorSpec { scales: vec![0.9, 1.2], aspect_ratios: vec![vec![3.0]], extra_square: true };
        for p in generate_priors(&spec, &[(3, 3)]).unwrap() {
            let c = p.corners();
            assert!(c.xmin >= -1e-12 && c.ymin >= -1e-12 && c.xmax <= 1.0 + 1e-12 && c.ymax <= 1.0 + 1e-12);
            assert!(p.w > 0.0 && p.h > 0.0);
        }
    }

    #[test]
    fn rejects_non_decreasing_maps() {
        let spec = AnchorSpec { scales: vec![0.2, 0.4, 0.6], aspect_ratios: vec![vec![], vec![]], extra_square: true };
        assert!(generate_priors(&spec, &[(2, 2), (2, 2)]).is_err());
        assert!(generate_priors(&spec, &[(4, 4), (2, 2)]).is_ok());
    }
}
