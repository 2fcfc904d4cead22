//! VOC-style average precision and dataset-level mAP.

use crate::data::Dataset;
use crate::detect::{iou_unchecked, BBox, Detection};
use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::pipeline::{Model, Variant};
use crate::scalar::Scalar;

/// One detection of a single class, tagged with its image index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Precision/recall bookkeeping of [`average_precision`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApDetail {
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_ground_truths: usize,
}

fn ranked(dets: &[ScoredBox]) -> Vec<ScoredBox> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
            .then(a.bbox.ymin.total_cmp(&b.bbox.ymin))
            .then(a.bbox.xmax.total_cmp(&b.bbox.xmax))
            .then(a.bbox.ymax.total_cmp(&b.bbox.ymax))
    });
    d
}

/// AP of one class over a dataset; `None` when the class has no ground truth.
///
/// Detections are ranked by score (ties by image, then coordinates). Each
/// one is a true positive if its highest-IoU ground truth in the same
/// image reaches `iou_threshold` and was not already claimed.
pub fn average_precision(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64, eleven_point: bool) -> Option<ApDetail> {
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for d in ranked(dets) {
        let Some(image_gts) = gts.get(d.image) else {
            tp_flags.push(false);
            continue;
        };
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in image_gts.iter().enumerate() {
            let o = iou_unchecked(&d.bbox, g);
            if best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        let hit = match best {
            Some((o, j)) if o >= iou_threshold && !used[d.image][j] => {
                used[d.image][j] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(hit);
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in &tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = if eleven_point {
        (0..=10)
            .map(|t| {
                let t = t as f64 / 10.0;
                recall.iter().zip(&precision).filter(|(r, _)| **r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0
    } else {
        let mut mrec = vec![0.0];
        mrec.extend(&recall);
        mrec.push(1.0);
        let mut mpre = vec![0.0];
        mpre.extend(&precision);
        mpre.push(0.0);
        for i in (0..mpre.len() - 1).rev() {
            mpre[i] = mpre[i].max(mpre[i + 1]);
        }
        (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
    };
    Some(ApDetail { ap, true_positives: tp, false_positives: fp, num_ground_truths: npos })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub class_names: Vec<String>,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<ApDetail>>,
    /// Mean AP over classes with ground truth (0 when there are none).
    pub map: f64,
    pub num_images: usize,
    pub num_detections: usize,
}

impl EvalResult {
    pub fn true_positives(&self) -> usize {
        self.per_class.iter().flatten().map(|d| d.true_positives).sum()
    }

    pub fn false_positives(&self) -> usize {
        self.per_class.iter().flatten().map(|d| d.false_positives).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,true_positives,false_positives,ground_truths\n");
        for (name, d) in self.class_names.iter().zip(&self.per_class) {
            match d {
                Some(d) => s.push_str(&format!("{name},{},{},{},{}\n", d.ap, d.true_positives, d.false_positives, d.num_ground_truths)),
                None => s.push_str(&format!("{name},,0,0,0\n")),
            }
        }
        s.push_str(&format!("mAP,{},{},{},\n", self.map, self.true_positives(), self.false_positives()));
        s
    }
}

/// Per-class AP from per-image detections and ground truth `(boxes, classes)`.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[(Vec<BBox>, Vec<usize>)],
    class_names: &[String],
    iou_threshold: f64,
    eleven_point: bool,
) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(invalid!("{} detection lists for {} images", detections.len(), ground_truth.len()));
    }
    let mut per_class = Vec::with_capacity(class_names.len());
    for cls in 0..class_names.len() {
        let gts: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|(b, c)| b.iter().zip(c).filter(|(_, &k)| k == cls).map(|(b, _)| *b).collect())
            .collect();
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == cls).map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score }))
            .collect();
        per_class.push(average_precision(&dets, &gts, iou_threshold, eleven_point));
    }
    let present: Vec<f64> = per_class.iter().flatten().map(|d| d.ap).collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(EvalResult {
        class_names: class_names.to_vec(),
        per_class,
        map,
        num_images: detections.len(),
        num_detections: detections.iter().map(Vec::len).sum(),
    })
}

/// Runs `variant` over every image of `data` and scores it.
pub fn evaluate_map<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    variant: Variant,
    data: &Dataset<T>,
    iou_threshold: f64,
    eleven_point: bool,
) -> Result<(EvalResult, Vec<Vec<Detection>>)> {
    if data.is_empty() {
        return Err(invalid!("cannot evaluate on an empty {} split", data.split.as_str()));
    }
    let mut dets = Vec::with_capacity(data.len());
    for s in &data.samples {
        dets.push(model.infer(store, variant, &s.lr, Some(&s.hr))?);
    }
    let gt: Vec<(Vec<BBox>, Vec<usize>)> = data.samples.iter().map(|s| (s.boxes.clone(), s.classes.clone())).collect();
    let result = evaluate_detections(&dets, &gt, &data.class_names, iou_threshold, eleven_point)?;
    Ok((result, dets))
}
