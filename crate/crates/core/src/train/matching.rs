//! Assignment of ground-truth boxes to priors.

use crate::detect::{encode_box, iou_unchecked, BBox, PriorBox};
use crate::error::{invalid, Result};

/// Per-prior training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// 0 for background, `class + 1` for objects.
    pub labels: Vec<usize>,
    /// Encoded offsets; zero for background priors.
    pub targets: Vec<[f64; 4]>,
    pub positive: Vec<bool>,
    /// Ground-truth index each positive prior regresses to.
    pub matched_gt: Vec<Option<usize>>,
    /// The image had no ground truth, so every prior is background.
    pub no_ground_truth: bool,
}

impl MatchResult {
    pub fn num_priors(&self) -> usize {
        self.labels.len()
    }

    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Matches pixel-space `boxes` against normalized `priors` for an image of `image_wh`.
///
/// Each ground truth is first paired with one distinct prior by greedy
/// bipartite matching on IoU (highest pair first, ties to the lower
/// ground-truth then prior index). Every other prior whose best IoU
/// reaches `iou_threshold` becomes positive for that best ground truth.
pub fn match_priors(
    boxes: &[BBox],
    classes: &[usize],
    priors: &[PriorBox],
    image_wh: (f64, f64),
    iou_threshold: f64,
    variances: [f64; 2],
) -> Result<MatchResult> {
    if boxes.len() != classes.len() {
        return Err(invalid!("{} boxes but {} classes", boxes.len(), classes.len()));
    }
    if boxes.len() > priors.len() {
        return Err(invalid!("{} ground truths cannot each own one of {} priors", boxes.len(), priors.len()));
    }
    for b in boxes {
        b.validate()?;
    }
    let n = priors.len();
    if boxes.is_empty() {
        return Ok(MatchResult {
            labels: vec![0; n],
            targets: vec![[0.0; 4]; n],
            positive: vec![false; n],
            matched_gt: vec![None; n],
            no_ground_truth: true,
        });
    }
    let (iw, ih) = image_wh;
    let pixel_priors: Vec<BBox> = priors.iter().map(|p| p.corners().scale(iw, ih)).collect();
    let overlaps: Vec<Vec<f64>> = boxes.iter().map(|b| pixel_priors.iter().map(|p| iou_unchecked(b, p)).collect()).collect();

    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut best: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut bi = (overlaps[0][i], 0);
            for (j, row) in overlaps.iter().enumerate().skip(1) {
                if row[i] > bi.0 {
                    bi = (row[i], j);
                }
            }
            bi
        })
        .collect();

    let mut gt_done = vec![false; boxes.len()];
    for _ in 0..boxes.len() {
        let mut pick: Option<(f64, usize, usize)> = None;
        for (j, row) in overlaps.iter().enumerate() {
            if gt_done[j] {
                continue;
            }
            for (i, &v) in row.iter().enumerate() {
                if owner[i].is_none() && pick.is_none_or(|(pv, _, _)| v > pv) {
                    pick = Some((v, j, i));
                }
            }
        }
        let (_, j, i) = pick.expect("enough free priors");
        gt_done[j] = true;
        owner[i] = Some(j);
        best[i] = (f64::INFINITY, j);
    }

    let mut out = MatchResult {
        labels: vec![0; n],
        targets: vec![[0.0; 4]; n],
        positive: vec![false; n],
        matched_gt: vec![None; n],
        no_ground_truth: false,
    };
    for i in 0..n {
        let (v, j) = best[i];
        if v >= iou_threshold {
            out.labels[i] = classes[j] + 1;
            out.positive[i] = true;
            out.matched_gt[i] = Some(j);
            out.targets[i] = encode_box(&boxes[j], &priors[i], variances, image_wh);
        }
    }
    Ok(out)
}
