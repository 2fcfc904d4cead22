use rand::Rng;

use super::Sample;
use crate::detect::BBox;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Which transforms were applied, in order h-flip, v-flip, rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = if rng.random_bool(0.5) { rng.random_range(1..=3) } else { 0 };
        Self { hflip, vflip, quarter_turns }
    }

    pub fn apply<T: Scalar>(&self, s: &Sample<T>) -> Sample<T> {
        let mut out = s.clone();
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(&out);
        }
        out
    }
}

/// Random h-flip, v-flip and quarter-turn rotation, each with probability 1/2.
pub fn augment<T: Scalar, R: Rng + ?Sized>(sample: &Sample<T>, rng: &mut R) -> Sample<T> {
    Augmentation::draw(rng).apply(sample)
}

fn map_image<T: Scalar>(img: &ImageTensor<T>, out_hw: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> ImageTensor<T> {
    let c = img.shape()[0];
    ImageTensor::from_fn_chw(c, out_hw.0, out_hw.1, |ch, y, x| {
        let (sy, sx) = src(y, x);
        img.at(ch, sy, sx)
    })
}

fn transform<T: Scalar>(
    s: &Sample<T>,
    swap: bool,
    pixel: impl Fn(usize, usize, usize, usize) -> (usize, usize),
    bbox: impl Fn(&BBox, f64, f64) -> BBox,
) -> Sample<T> {
    let apply = |img: &ImageTensor<T>| {
        let (_, h, w) = img.chw().expect("image");
        let out_hw = if swap { (w, h) } else { (h, w) };
        map_image(img, out_hw, |y, x| pixel(y, x, h, w))
    };
    let (_, h, w) = s.hr.chw().expect("image");
    Sample {
        id: s.id.clone(),
        hr: apply(&s.hr),
        lr: apply(&s.lr),
        boxes: s.boxes.iter().map(|b| bbox(b, w as f64, h as f64)).collect(),
        classes: s.classes.clone(),
    }
}

/// Mirror left-right: `xmin' = W - xmax`.
pub fn flip_horizontal<T: Scalar>(s: &Sample<T>) -> Sample<T> {
    transform(
        s,
        false,
        |y, x, _, w| (y, w - 1 - x),
        |b, w, _| BBox::new_unchecked(w - b.xmax, b.ymin, w - b.xmin, b.ymax),
    )
}

/// Mirror top-bottom: `ymin' = H - ymax`.
pub fn flip_vertical<T: Scalar>(s: &Sample<T>) -> Sample<T> {
    transform(
        s,
        false,
        |y, x, h, _| (h - 1 - y, x),
        |b, _, h| BBox::new_unchecked(b.xmin, h - b.ymax, b.xmax, h - b.ymin),
    )
}

/// Quarter turn clockwise: point `(x, y)` goes to `(H - y, x)`.
pub fn rotate90<T: Scalar>(s: &Sample<T>) -> Sample<T> {
    transform(
        s,
        true,
        // output (y', x') reads input (y, x) with x' = H - 1 - y, y' = x
        |yo, xo, h, _| (h - 1 - xo, yo),
        |b, _, h| BBox::new_unchecked(h - b.ymax, b.xmin, h - b.ymin, b.xmax),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(w: usize, h: usize) -> Sample<f32> {
        let hr = Tensor::from_fn_chw(3, h, w, |c, y, x| (c * 1000 + y * 37 + x) as f32);
        let lr = Tensor::from_fn_chw(3, h / 2, w / 2, |c, y, x| (c * 100 + y * 7 + x) as f32);
        Sample {
            id: "s".into(),
            hr,
            lr,
            boxes: vec![BBox::new(10.0, 20.0, 30.0, 40.0).unwrap(), BBox::new(1.0, 2.0, 5.0, 3.5).unwrap()],
            classes: vec![0, 1],
        }
    }

    #[test]
    fn hflip_box_formula_and_involution() {
        let s = sample(512, 64);
        let f = flip_horizontal(&s);
        assert_eq!(f.boxes[0], BBox::new(482.0, 20.0, 502.0, 40.0).unwrap());
        assert_eq!(flip_horizontal(&f), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
    }

    #[test]
    fn rotation_matches_corner_hull_and_pixels() {
        let s = sample(64, 48);
        let r = rotate90(&s);
        assert_eq!(r.hr.shape(), &[3, 64, 48]);
        let h = 48.0;
        for (b, rb) in s.boxes.iter().zip(&r.boxes) {
            let corners = [(b.xmin, b.ymin), (b.xmax, b.ymin), (b.xmin, b.ymax), (b.xmax, b.ymax)];
            let rot: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| (h - y, x)).collect();
            let hull = BBox::new(
                rot.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
                rot.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
                rot.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
                rot.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            )
            .unwrap();
            assert_eq!(*rb, hull);
            assert_eq!(rb.area(), b.area());
        }
        // pixel at (x, y) lands at (H - 1 - y, x)
        assert_eq!(r.hr.at(1, 5, 47 - 3), s.hr.at(1, 3, 5));
        let full = (0..4).fold(s.clone(), |acc, _| rotate90(&acc));
        assert_eq!(full, s);
    }

    #[test]
    fn augmentation_preserves_count_and_area() {
        let s = sample(48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = augment(&s, &mut rng);
            assert_eq!(a.boxes.len(), s.boxes.len());
            for (x, y) in a.boxes.iter().zip(&s.boxes) {
                assert!((x.area() - y.area()).abs() < 1e-12);
            }
            a.validate(2).unwrap();
        }
    }
}
