//! Procedural ship scenes: textured water with elongated bright hulls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_pair, Dataset, Sample, Split};
use crate::detect::BBox;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Side of the square original frame; HR is half of it.
    pub canvas: usize,
    pub ships_min: usize,
    pub ships_max: usize,
    /// Hull length range in original pixels.
    pub length_min: f64,
    pub length_max: f64,
    /// Beam as a fraction of length.
    pub beam_min: f64,
    pub beam_max: f64,
    /// Amplitude of the low-frequency swell.
    pub swell: f64,
    /// Amplitude of per-pixel sea clutter.
    pub clutter: f64,
    /// Placement attempts per ship before giving up on it.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            test_count: 50,
            canvas: 1024,
            ships_min: 1,
            ships_max: 3,
            length_min: 160.0,
            length_max: 420.0,
            beam_min: 0.18,
            beam_max: 0.3,
            swell: 0.06,
            clutter: 0.03,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.canvas >= 16
            && self.ships_min <= self.ships_max
            && self.length_min > 0.0
            && self.length_min <= self.length_max
            && self.length_max < self.canvas as f64
            && self.beam_min > 0.0
            && self.beam_min <= self.beam_max
            && self.beam_max <= 1.0
            && self.swell >= 0.0
            && self.clutter >= 0.0;
        if !ok {
            return Err(invalid!("inconsistent synthetic scene config {self:?}"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }
}

/// One rendered original frame with exact ship boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `(3, canvas, canvas)`, every value a multiple of 1/255.
    pub image: ImageTensor<f32>,
    /// Tight integer bounds of each hull mask, `[xmin, xmax)` x `[ymin, ymax)`.
    pub boxes: Vec<BBox>,
    /// Per-pixel ship index + 1 (0 = water).
    pub mask: Vec<u16>,
    /// Ships that could not be placed.
    pub unplaced: usize,
}

struct Hull {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_len: f64,
    half_beam: f64,
}

impl Hull {
    /// Position along the hull (-1 stern .. 1 bow) if the point is inside.
    fn local(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.half_len;
        let v = (-dx * self.sin + dy * self.cos) / self.half_beam;
        if !(-1.0..=1.0).contains(&u) {
            return None;
        }
        // pointed bow over the front 35 %
        let taper = if u > 0.3 { ((1.0 - u) / 0.7).max(0.0) } else { 1.0 };
        (v.abs() <= taper).then_some((u, v))
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let ex = self.half_len * self.cos.abs() + self.half_beam * self.sin.abs();
        let ey = self.half_len * self.sin.abs() + self.half_beam * self.cos.abs();
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Test => 0x5445_5354_0000_0000u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(index as u64);
    rng
}

/// Renders scene `index` of `split`; depends only on `(config, split, index)`.
pub fn render_scene(config: &SynthConfig, split: Split, index: usize) -> Result<Scene> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, split, index);
    let n = config.canvas;
    let nf = n as f64;

    // water: base tone, a few swell components and coarse value noise
    let base = [0.08 + 0.08 * rng.random::<f64>(), 0.2 + 0.1 * rng.random::<f64>(), 0.3 + 0.1 * rng.random::<f64>()];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let freq = (2.0 + 6.0 * rng.random::<f64>()) * std::f64::consts::TAU / nf;
            (th.cos() * freq, th.sin() * freq, rng.random::<f64>() * std::f64::consts::TAU, config.swell * (0.5 + rng.random::<f64>()) / 3.0)
        })
        .collect();
    let grid = 9;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let coarse_at = |x: f64, y: f64| {
        let gx = x / nf * (grid - 1) as f64;
        let gy = y / nf * (grid - 1) as f64;
        let (ix, iy) = ((gx as usize).min(grid - 2), (gy as usize).min(grid - 2));
        let (tx, ty) = (gx - ix as f64, gy - iy as f64);
        let at = |a: usize, b: usize| coarse[b * grid + a];
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    // ships
    let want = rng.random_range(config.ships_min..=config.ships_max);
    let mut hulls: Vec<Hull> = Vec::new();
    let mut footprints: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut unplaced = 0;
    for _ in 0..want {
        let mut placed = false;
        for _ in 0..config.max_retries.max(1) {
            let len = config.length_min + (config.length_max - config.length_min) * rng.random::<f64>();
            let beam = len * (config.beam_min + (config.beam_max - config.beam_min) * rng.random::<f64>());
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let hull = Hull {
                cx: nf * rng.random::<f64>(),
                cy: nf * rng.random::<f64>(),
                cos: th.cos(),
                sin: th.sin(),
                half_len: len / 2.0,
                half_beam: beam / 2.0,
            };
            let e = hull.extent();
            let margin = 2.0;
            if e.0 < margin || e.1 < margin || e.2 > nf - margin || e.3 > nf - margin {
                continue;
            }
            let gap = 0.05 * nf;
            let clash = footprints.iter().any(|f| e.0 < f.2 + gap && f.0 < e.2 + gap && e.1 < f.3 + gap && f.1 < e.3 + gap);
            if clash {
                continue;
            }
            footprints.push(e);
            hulls.push(hull);
            placed = true;
            break;
        }
        if !placed {
            unplaced += 1;
        }
    }
    let tones: Vec<(f64, f64)> = hulls.iter().map(|_| (0.72 + 0.2 * rng.random::<f64>(), 0.25 + 0.2 * rng.random::<f64>())).collect();

    let mut data = vec![0f32; 3 * n * n];
    let mut mask = vec![0u16; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let swell: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum();
            let tex = swell + 0.04 * coarse_at(px, py) + config.clutter * (rng.random::<f64>() * 2.0 - 1.0);
            let mut rgb = [base[0] + tex, base[1] + tex, base[2] + tex * 1.2];
            for (k, hull) in hulls.iter().enumerate() {
                if let Some((u, v)) = hull.local(px, py) {
                    let (hull_tone, deck_tone) = tones[k];
                    // superstructure blocks amidships and a dark centreline
                    let block = (-0.55..0.25).contains(&u) && v.abs() < 0.45 && ((u * 6.0).floor() as i64) % 2 == 0;
                    let stripe = v.abs() < 0.12;
                    let t = if block { deck_tone } else if stripe { hull_tone - 0.25 } else { hull_tone };
                    rgb = [t, t, t * 0.97];
                    mask[y * n + x] = k as u16 + 1;
                }
            }
            for c in 0..3 {
                data[(c * n + y) * n + x] = quantize(rgb[c]);
            }
        }
    }

    let mut boxes = Vec::new();
    for k in 0..hulls.len() {
        let id = k as u16 + 1;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, &m) in mask.iter().enumerate() {
            if m == id {
                let (x, y) = (i % n, i / n);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        if x1 > x0 && y1 > y0 {
            boxes.push(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?);
        } else {
            unplaced += 1;
        }
    }
    Ok(Scene {
        id: format!("{}_{index:05}", split.as_str()),
        image: ImageTensor::from_vec(&[3, n, n], data)?,
        boxes,
        mask,
        unplaced,
    })
}

/// All scenes of one split, in index order.
pub fn synth_scenes(config: &SynthConfig, split: Split) -> Result<Vec<Scene>> {
    (0..config.count(split)).map(|i| render_scene(config, split, i)).collect()
}

/// Synthetic split paired into HR (`canvas / 2`) and LR (`canvas / (2 alpha)`) images.
pub fn synth_dataset<T: Scalar>(config: &SynthConfig, split: Split, alpha: usize) -> Result<Dataset<T>> {
    if config.canvas % 2 != 0 {
        return Err(invalid!("canvas {} must be even", config.canvas));
    }
    let mut samples: Vec<Sample<T>> = Vec::with_capacity(config.count(split));
    for i in 0..config.count(split) {
        let scene = render_scene(config, split, i)?;
        let classes = vec![0; scene.boxes.len()];
        let paired = make_pair(&scene.id, &scene.image.cast(), &scene.boxes, &classes, alpha, config.canvas / 2)?;
        if paired.dropped_boxes > 0 {
            log::warn!("{}: {} ship(s) too small after pairing", scene.id, paired.dropped_boxes);
        }
        samples.push(paired.sample);
    }
    Ok(Dataset { split, class_names: vec!["ship".into()], samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_count: 6,
            test_count: 3,
            canvas: 64,
            length_min: 16.0,
            length_max: 28.0,
            beam_min: 0.3,
            beam_max: 0.4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_scenes(&small(), Split::Train).unwrap();
        let b = synth_scenes(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
        let c = synth_scenes(&SynthConfig { seed: 1, ..small() }, Split::Train).unwrap();
        assert_ne!(a[0].image, c[0].image);
        let t = synth_scenes(&small(), Split::Test).unwrap();
        assert_ne!(a[0].image, t[0].image);
    }

    #[test]
    fn boxes_are_tight_mask_bounds() {
        for scene in synth_scenes(&small(), Split::Train).unwrap() {
            let n = 64;
            for (k, b) in scene.boxes.iter().enumerate() {
                let id = k as u16 + 1;
                let pts: Vec<(usize, usize)> =
                    (0..n * n).filter(|&i| scene.mask[i] == id).map(|i| (i % n, i / n)).collect();
                let xs = pts.iter().map(|p| p.0);
                let ys = pts.iter().map(|p| p.1);
                assert_eq!(b.xmin, xs.clone().min().unwrap() as f64);
                assert_eq!(b.xmax, xs.max().unwrap() as f64 + 1.0);
                assert_eq!(b.ymin, ys.clone().min().unwrap() as f64);
                assert_eq!(b.ymax, ys.max().unwrap() as f64 + 1.0);
            }
        }
    }

    #[test]
    fn counts_follow_config() {
        let cfg = SynthConfig { train_count: 50, ships_min: 1, ships_max: 3, ..small() };
        let ds = synth_dataset::<f32>(&cfg, Split::Train, 2).unwrap();
        assert_eq!(ds.len(), 50);
        for s in &ds.samples {
            assert!((1..=3).contains(&s.boxes.len()), "{} has {} boxes", s.id, s.boxes.len());
        }
        ds.validate(2).unwrap();
    }

    #[test]
    fn pixels_are_8bit_exact() {
        let s = render_scene(&small(), Split::Test, 0).unwrap();
        assert!(s.image.data().iter().all(|v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
    }
}
