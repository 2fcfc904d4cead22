//! Brute-force reference implementations and randomized comparison drivers.
//!
//! Each `check_*` runs `trials` random instances (at most 20 boxes or
//! images each) and returns the largest deviation seen, or a description
//! of the first structural mismatch.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdet::detect::{fast_nms, iou, BBox, Detection, PriorBox};
use srdet::data::Dataset;
use srdet::eval::{average_precision, evaluate_detections, evaluate_map, ScoredBox};
use srdet::{Model, ParamStore32, Variant};
use srdet::train::match_priors;

pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const MIN_TRIALS: usize = 200;

pub type Check = Result<f64, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut impl Rng, extent: f64) -> BBox {
    let w = r.random_range(extent / 50.0..extent / 2.0);
    let h = r.random_range(extent / 50.0..extent / 2.0);
    let x = r.random_range(0.0..extent - w);
    let y = r.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn grid_box(r: &mut impl Rng, extent: i32) -> [i32; 4] {
    let x0 = r.random_range(0..extent - 1);
    let y0 = r.random_range(0..extent - 1);
    [x0, y0, r.random_range(x0 + 1..=extent), r.random_range(y0 + 1..=extent)]
}

/// Overlap by counting covered unit cells of an integer grid.
pub fn iou_cells(a: [i32; 4], b: [i32; 4]) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    let lo = a[0].min(b[0]).min(a[1]).min(b[1]);
    let hi = a[2].max(b[2]).max(a[3]).max(b[3]);
    for y in lo..hi {
        for x in lo..hi {
            let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += u32::from(ina && inb);
            union += u32::from(ina || inb);
        }
    }
    f64::from(inter) / f64::from(union)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / ((a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter)
}

pub fn check_iou(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (a, b) = (grid_box(&mut r, 20), grid_box(&mut r, 20));
        let to_box = |q: [i32; 4]| BBox::new(q[0].into(), q[1].into(), q[2].into(), q[3].into()).unwrap();
        let got = iou(&to_box(a), &to_box(b)).map_err(|e| e.to_string())?;
        worst = worst.max((got - iou_cells(a, b)).abs());
        let (c, d) = (random_box(&mut r, 100.0), random_box(&mut r, 100.0));
        let got = iou(&c, &d).map_err(|e| e.to_string())?;
        worst = worst.max((got - iou_ref(&c, &d)).abs());
    }
    Ok(worst)
}

/// Classic suppression: walk candidates best-first, each kept box marks
/// all later same-class boxes above the threshold as suppressed.
pub fn nms_ref(dets: &[Detection], threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut seen_per_class = std::collections::HashMap::new();
    let order: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let n = seen_per_class.entry(dets[i].class_id).or_insert(0usize);
            *n += 1;
            *n <= top_k
        })
        .collect();
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if dets[j].class_id == dets[i].class_id && iou_ref(&dets[i].bbox, &dets[j].bbox) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn check_nms(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for t in 0..trials {
        let n = r.random_range(0..=20);
        let classes = r.random_range(1..=3);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut r, 60.0),
                class_id: r.random_range(0..classes),
                score: f64::from(r.random_range(1..50u32)) / 50.0,
            })
            .collect();
        let threshold = r.random_range(0.1..0.9);
        let top_k = if t % 4 == 0 { r.random_range(1..6) } else { 200 };
        let got = fast_nms(&dets, threshold, top_k);
        let want = nms_ref(&dets, threshold, top_k);
        if got != want {
            return Err(format!("trial {t}: fast_nms kept {} boxes, reference {}", got.len(), want.len()));
        }
    }
    Ok(0.0)
}

fn encode_ref(b: &BBox, p: &PriorBox, v: [f64; 2], wh: (f64, f64)) -> [f64; 4] {
    let (cx, cy) = ((b.xmin + b.xmax) / 2.0 / wh.0, (b.ymin + b.ymax) / 2.0 / wh.1);
    let (w, h) = ((b.xmax - b.xmin) / wh.0, (b.ymax - b.ymin) / wh.1);
    [(cx - p.cx) / p.w / v[0], (cy - p.cy) / p.h / v[0], (w / p.w).ln() / v[1], (h / p.h).ln() / v[1]]
}

/// `(labels, matched gt, targets)` from the full IoU matrix.
pub fn match_ref(
    boxes: &[BBox],
    classes: &[usize],
    priors: &[PriorBox],
    wh: (f64, f64),
    threshold: f64,
    v: [f64; 2],
) -> (Vec<usize>, Vec<Option<usize>>, Vec<[f64; 4]>) {
    let n = priors.len();
    let px: Vec<BBox> = priors
        .iter()
        .map(|p| {
            BBox::new_unchecked((p.cx - p.w / 2.0) * wh.0, (p.cy - p.h / 2.0) * wh.1, (p.cx + p.w / 2.0) * wh.0, (p.cy + p.h / 2.0) * wh.1)
        })
        .collect();
    let m: Vec<Vec<f64>> = boxes.iter().map(|b| px.iter().map(|p| iou_ref(b, p)).collect()).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (j, row) in m.iter().enumerate() {
        for (i, &o) in row.iter().enumerate() {
            pairs.push((o, j, i));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut forced: Vec<Option<usize>> = vec![None; n];
    let mut gt_done = vec![false; boxes.len()];
    for (_, j, i) in pairs {
        if !gt_done[j] && forced[i].is_none() {
            gt_done[j] = true;
            forced[i] = Some(j);
        }
    }
    let mut labels = vec![0; n];
    let mut gt = vec![None; n];
    let mut targets = vec![[0.0; 4]; n];
    for i in 0..n {
        let j = forced[i].or_else(|| {
            let mut best = 0;
            for j in 1..boxes.len() {
                if m[j][i] > m[best][i] {
                    best = j;
                }
            }
            (m[best][i] >= threshold).then_some(best)
        });
        if let Some(j) = j {
            labels[i] = classes[j] + 1;
            gt[i] = Some(j);
            targets[i] = encode_ref(&boxes[j], &priors[i], v, wh);
        }
    }
    (labels, gt, targets)
}

pub fn random_priors(r: &mut impl Rng, n: usize) -> Vec<PriorBox> {
    (0..n)
        .map(|_| {
            let w = r.random_range(0.05..0.5);
            let h = r.random_range(0.05..0.5);
            PriorBox { cx: r.random_range(w / 2.0..1.0 - w / 2.0), cy: r.random_range(h / 2.0..1.0 - h / 2.0), w, h, map: 0 }
        })
        .collect()
}

pub fn check_matching(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let v = [0.1, 0.2];
    for t in 0..trials {
        let wh = (r.random_range(50.0..200.0), r.random_range(50.0..200.0));
        let np = r.random_range(1..=20);
        let mut priors = random_priors(&mut r, np);
        let ng = r.random_range(1..=np.min(8));
        let boxes: Vec<BBox> = (0..ng)
            .map(|_| {
                if r.random_bool(0.3) {
                    let p = priors[r.random_range(0..np)];
                    BBox::new((p.cx - p.w / 2.0) * wh.0, (p.cy - p.h / 2.0) * wh.1, (p.cx + p.w / 2.0) * wh.0, (p.cy + p.h / 2.0) * wh.1)
                        .unwrap()
                } else {
                    let b = random_box(&mut r, 1.0);
                    b.scale(wh.0, wh.1)
                }
            })
            .collect();
        if t % 5 == 0 && np > 1 {
            priors[1] = priors[0];
        }
        let classes: Vec<usize> = (0..ng).map(|_| r.random_range(0..3)).collect();
        let threshold = [0.5, 0.3, 0.7][t % 3];
        let got = match_priors(&boxes, &classes, &priors, wh, threshold, v).map_err(|e| e.to_string())?;
        let (labels, gt, targets) = match_ref(&boxes, &classes, &priors, wh, threshold, v);
        if got.labels != labels || got.matched_gt != gt {
            return Err(format!("trial {t}: labels {:?} vs reference {labels:?}", got.labels));
        }
        if got.num_positives() < ng {
            return Err(format!("trial {t}: {} positives for {ng} ground truths", got.num_positives()));
        }
        for (a, b) in got.targets.iter().zip(&targets) {
            for k in 0..4 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    Ok(worst)
}

/// AP as the sum over true positives of `1/npos` times the best precision
/// at that rank or any later one.
pub fn ap_ref(dets: &[ScoredBox], gts: &[Vec<BBox>], threshold: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<&ScoredBox> = dets.iter().collect();
    let key = |d: &ScoredBox| (d.image, [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax]);
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| key(a).partial_cmp(&key(b)).unwrap()));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for d in order {
        let g = &gts[d.image];
        let best = (0..g.len()).fold(None::<usize>, |b, j| match b {
            Some(k) if iou_ref(&d.bbox, &g[k]) >= iou_ref(&d.bbox, &g[j]) => Some(k),
            _ => Some(j),
        });
        let hit = match best {
            Some(j) if iou_ref(&d.bbox, &g[j]) >= threshold && !claimed[d.image][j] => {
                claimed[d.image][j] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let mut precision = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / npos as f64;
        }
    }
    Some(ap)
}

fn distinct_scores(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n).map(|k| (k as f64 + 1.0) / (n as f64 + 1.0)).collect();
    for i in (1..n).rev() {
        s.swap(i, r.random_range(0..=i));
    }
    s
}

/// A random scene where some detections jitter ground truths and some are clutter.
pub fn random_scene(r: &mut impl Rng, images: usize, classes: usize) -> (Vec<(Vec<BBox>, Vec<usize>)>, Vec<Vec<Detection>>) {
    let gt: Vec<(Vec<BBox>, Vec<usize>)> = (0..images)
        .map(|_| {
            let n = r.random_range(0..=4);
            let b: Vec<BBox> = (0..n).map(|_| random_box(r, 100.0)).collect();
            let c = (0..n).map(|_| r.random_range(0..classes)).collect();
            (b, c)
        })
        .collect();
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
    for (i, (boxes, cls)) in gt.iter().enumerate() {
        for (b, &c) in boxes.iter().zip(cls) {
            for _ in 0..r.random_range(0..3) {
                let j: [f64; 4] = std::array::from_fn(|_| r.random_range(-6.0..6.0));
                let bb = BBox::new_unchecked(b.xmin + j[0], b.ymin + j[1], b.xmax + j[2], b.ymax + j[3]);
                if bb.validate().is_ok() {
                    dets[i].push(Detection { bbox: bb, class_id: c, score: 0.0 });
                }
            }
        }
        for _ in 0..r.random_range(0..3) {
            dets[i].push(Detection { bbox: random_box(r, 100.0), class_id: r.random_range(0..classes), score: 0.0 });
        }
    }
    let total: usize = dets.iter().map(Vec::len).sum();
    let mut scores = distinct_scores(r, total).into_iter();
    for d in dets.iter_mut().flatten() {
        d.score = scores.next().unwrap();
    }
    (gt, dets)
}

pub fn check_ap(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let images = r.random_range(1..=20);
        let (gt, dets) = random_scene(&mut r, images, 1);
        let gts: Vec<Vec<BBox>> = gt.iter().map(|(b, _)| b.clone()).collect();
        let flat: Vec<ScoredBox> =
            dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score })).collect();
        let threshold = [0.5, 0.3, 0.75][t % 3];
        let got = average_precision(&flat, &gts, threshold, false).map(|d| d.ap);
        match (got, ap_ref(&flat, &gts, threshold)) {
            (None, None) => {}
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (a, b) => return Err(format!("trial {t}: AP {a:?} vs reference {b:?}")),
        }
    }
    Ok(worst)
}

/// mAP over classes that have ground truth, from [`ap_ref`].
pub fn map_ref(gt: &[(Vec<BBox>, Vec<usize>)], dets: &[Vec<Detection>], classes: usize, threshold: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..classes {
        let gts: Vec<Vec<BBox>> =
            gt.iter().map(|(b, k)| b.iter().zip(k).filter(|(_, k)| **k == c).map(|(b, _)| *b).collect()).collect();
        let flat: Vec<ScoredBox> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score }))
            .collect();
        if let Some(ap) = ap_ref(&flat, &gts, threshold) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn check_evaluate(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let images = r.random_range(1..=20);
        let classes = r.random_range(1..=3);
        let (gt, dets) = random_scene(&mut r, images, classes);
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let got = evaluate_detections(&dets, &gt, &names, 0.5, false).map_err(|e| format!("trial {t}: {e}"))?;
        worst = worst.max((got.map - map_ref(&gt, &dets, classes, 0.5)).abs());
    }
    Ok(worst)
}

/// `evaluate_map` on random image subsets and orders of `data` against
/// [`map_ref`] applied to per-image inference.
pub fn check_evaluate_map(trials: usize, seed: u64, models: &[(Model, ParamStore32)], data: &Dataset<f32>) -> Check {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let variants = [Variant::HrSsd, Variant::BicubicSsd];
    let cache: Vec<Vec<Vec<Vec<Detection>>>> = models
        .iter()
        .map(|(m, s)| {
            variants
                .iter()
                .map(|&v| data.samples.iter().map(|x| m.infer(s, v, &x.lr, Some(&x.hr)).unwrap()).collect())
                .collect()
        })
        .collect();
    for t in 0..trials {
        let mi = r.random_range(0..models.len());
        let vi = r.random_range(0..variants.len());
        let n = r.random_range(1..=data.len().min(20));
        let mut idx: Vec<usize> = (0..data.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        idx.truncate(n);
        let sub = Dataset { split: data.split, class_names: data.class_names.clone(), samples: idx.iter().map(|&i| data.samples[i].clone()).collect() };
        let (m, s) = &models[mi];
        let (got, _) = evaluate_map(m, s, variants[vi], &sub, 0.5, false).map_err(|e| format!("trial {t}: {e}"))?;
        let gt: Vec<(Vec<BBox>, Vec<usize>)> = sub.samples.iter().map(|x| (x.boxes.clone(), x.classes.clone())).collect();
        let dets: Vec<Vec<Detection>> = idx.iter().map(|&i| cache[mi][vi][i].clone()).collect();
        worst = worst.max((got.map - map_ref(&gt, &dets, data.class_names.len(), 0.5)).abs());
    }
    Ok(worst)
}
