use std::collections::BTreeMap;

use super::boxes::{iou_unchecked, Detection};

/// Class-wise greedy suppression with a per-class top-k prefilter.
///
/// Within each class, candidates are sorted by descending score (input
/// order breaks ties), cut to `top_k`, and a box is kept when its IoU with
/// every already kept box is at most `iou_threshold`. The result is sorted
/// by descending score.
pub fn fast_nms(detections: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        by_class.entry(d.class_id).or_default().push(i);
    }
    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for (_, mut idx) in by_class {
        idx.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
        idx.truncate(top_k);
        let mut class_kept: Vec<usize> = Vec::new();
        for i in idx {
            let b = &detections[i].bbox;
            if class_kept.iter().all(|&k| iou_unchecked(&detections[k].bbox, b) <= iou_threshold) {
                class_kept.push(i);
            }
        }
        kept.extend(class_kept.into_iter().map(|i| (i, detections[i])));
    }
    kept.sort_by(|(ia, a), (ib, b)| b.score.total_cmp(&a.score).then(ia.cmp(ib)));
    kept.into_iter().map(|(_, d)| d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BBox;

    fn det(x: f64, score: f64, class_id: usize) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), class_id, score }
    }

    #[test]
    fn trivial_cases() {
        assert!(fast_nms(&[], 0.45, 200).is_empty());
        let one = [det(0.0, 0.3, 0)];
        assert_eq!(fast_nms(&one, 0.45, 200), one.to_vec());
        let pair = [det(0.0, 0.8, 0), det(0.0, 0.9, 0)];
        assert_eq!(fast_nms(&pair, 0.45, 200), vec![pair[1]]);
    }

    #[test]
    fn classes_do_not_suppress_each_other_and_top_k_applies() {
        let d = [det(0.0, 0.9, 0), det(0.0, 0.8, 1), det(50.0, 0.7, 0)];
        assert_eq!(fast_nms(&d, 0.45, 200), d.to_vec());
        assert_eq!(fast_nms(&d, 0.45, 1), vec![d[0], d[1]]);
    }
}
