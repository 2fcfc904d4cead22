//! Finite-difference checks of every differentiable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::detect::{HeadVars, PriorBox};
use crate::error::Result;
use crate::nn::{grad_check, GradCheckOptions, GradCheckReport, ParamStore};
use crate::sr::{RdbConfig, SrNet, SrNetConfig};
use crate::tensor::Tensor;
use crate::train::{match_priors, multibox_loss, NEG_POS_RATIO};
use crate::detect::BBox;

/// Tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full SR forward pass.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

fn opts(tolerance: f64) -> GradCheckOptions {
    GradCheckOptions { tolerance, ..GradCheckOptions::default() }
}

/// Named reports for conv2d, pixel shuffle, L1, multibox loss and a tiny SR forward.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let w = store.add("w", normal(&[4, 3, 3, 3], &mut rng))?;
    let b = store.add("b", normal(&[4], &mut rng))?;
    let proj = normal(&[4, 4, 3], &mut rng);
    let report = grad_check(&store, &[normal(&[3, 7, 6], &mut rng)], opts(PRIMITIVE_TOLERANCE), |g, x| {
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x[0], wv, Some(bv), 2, 1)?;
        g.project(y, &proj)
    })?;
    out.push(("conv2d".to_string(), report));

    let empty = ParamStore::new();
    let proj = normal(&[2, 6, 4], &mut rng);
    let report = grad_check(&empty, &[normal(&[8, 3, 2], &mut rng)], opts(PRIMITIVE_TOLERANCE), |g, x| {
        let y = g.pixel_shuffle(x[0], 2)?;
        g.project(y, &proj)
    })?;
    out.push(("pixel_shuffle".to_string(), report));

    // keep |a - b| well away from the kink at 0
    let a = normal(&[3, 4, 4], &mut rng);
    let shift = normal(&[3, 4, 4], &mut rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    let bt = a.zip_map(&shift, |x, s| x + s)?;
    let report = grad_check(&empty, &[a, bt], opts(PRIMITIVE_TOLERANCE), |g, x| g.l1_loss(x[0], x[1]))?;
    out.push(("l1_loss".to_string(), report));

    out.push(("multibox_loss".to_string(), multibox_case(&mut rng)?));
    out.push(("sr_forward".to_string(), sr_case(&mut rng)?));
    Ok(out)
}

fn multibox_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let priors: Vec<PriorBox> = (0..12)
        .map(|i| {
            let (x, y) = ((i % 4) as f64, (i / 4) as f64);
            PriorBox { cx: 0.125 + 0.25 * x, cy: 0.2 + 0.3 * y, w: 0.3, h: 0.25 + 0.05 * (i % 2) as f64, map: 0 }
        })
        .collect();
    let boxes = [BBox::new(5.0, 8.0, 32.0, 30.0)?, BBox::new(60.0, 50.0, 95.0, 80.0)?];
    let m = match_priors(&boxes, &[0, 1], &priors, (100.0, 100.0), 0.5, [0.1, 0.2])?;
    // offsets within 0.5 of their targets stay on the quadratic branch
    let mut loc = normal(&[12, 4], rng).map(|v| 0.2 * v.clamp(-2.0, 2.0));
    for (i, t) in m.targets.iter().enumerate() {
        for d in 0..4 {
            loc.data_mut()[i * 4 + d] += t[d];
        }
    }
    // background logits spaced apart so the mined set is stable under probing
    let mut conf = normal(&[12, 3], rng).map(|v| 0.3 * v);
    for i in 0..12 {
        conf.data_mut()[i * 3] = -(i as f64) * 0.37;
    }
    grad_check(&ParamStore::new(), &[loc, conf], opts(PRIMITIVE_TOLERANCE), |g, x| {
        let (v, _) = multibox_loss(g, HeadVars { loc: x[0], conf: x[1] }, &m, NEG_POS_RATIO)?;
        Ok(v)
    })
}

fn sr_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = SrNetConfig { num_blocks: 2, base_channels: 4, rdb: RdbConfig { num_layers: 2, growth: 3 } };
    let mut store = ParamStore::new();
    let net = SrNet::build(&cfg, 2, &mut store, rng)?;
    // a unit-scale tail so the check sees the whole network
    let (tw, _) = net.tail_params();
    let name = store.get(tw).name.clone();
    let shape = store.get(tw).value.shape().to_vec();
    store.set(&name, normal(&shape, rng).map(|v| 0.2 * v))?;
    let input = normal(&[3, 8, 8], rng).map(|v| 0.5 + 0.2 * v);
    let proj = normal(&[3, 16, 16], rng);
    grad_check(&store, &[input], opts(COMPOSITE_TOLERANCE), |g, x| {
        let v = net.forward(g, x[0])?;
        g.project(v.sr_image, &proj)
    })
}
