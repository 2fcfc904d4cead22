mod common;

use common::oracles::*;
use common::{data, small_config};
use srdet::data::Split;
use srdet::Model;

fn assert_within(name: &str, r: Check) {
    let worst = r.unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(worst <= ORACLE_TOLERANCE, "{name}: deviation {worst:e}");
}

#[test]
fn iou_matches_cell_count_and_closed_form() {
    assert_within("iou", check_iou(MIN_TRIALS, 1));
}

#[test]
fn fast_nms_matches_exhaustive_greedy() {
    assert_within("fast_nms", check_nms(MIN_TRIALS, 2));
}

#[test]
fn match_priors_matches_iou_matrix_reference() {
    assert_within("match_priors", check_matching(MIN_TRIALS, 3));
}

#[test]
fn average_precision_matches_pr_enumeration() {
    assert_within("average_precision", check_ap(MIN_TRIALS, 4));
}

#[test]
fn evaluate_detections_matches_reference_map() {
    assert_within("evaluate_detections", check_evaluate(MIN_TRIALS, 5));
}

#[test]
fn evaluate_map_matches_reference_on_model_output() {
    let cfg = small_config(0, 20);
    let test = data(&cfg, Split::Test);
    let models: Vec<_> = (0..3).map(|s| Model::build::<f32>(&cfg.model, s).unwrap()).collect();
    assert_within("evaluate_map", check_evaluate_map(MIN_TRIALS, 6, &models, &test));
}

#[test]
fn crafted_five_detection_scene() {
    use srdet::detect::BBox;
    use srdet::eval::{average_precision, ScoredBox};
    let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let gts = vec![vec![b(0.0), b(20.0)], vec![b(40.0)]];
    // ranks: TP, FP (clutter), TP, FP (duplicate), TP
    let dets = [
        ScoredBox { image: 0, bbox: b(0.0), score: 0.9 },
        ScoredBox { image: 1, bbox: b(70.0), score: 0.8 },
        ScoredBox { image: 1, bbox: b(41.0), score: 0.7 },
        ScoredBox { image: 0, bbox: b(1.0), score: 0.6 },
        ScoredBox { image: 0, bbox: b(20.0), score: 0.5 },
    ];
    let d = average_precision(&dets, &gts, 0.5, false).unwrap();
    // precision 1, 1/2, 2/3, 1/2, 3/5 at recall 1/3, 1/3, 2/3, 2/3, 1
    let want = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
    assert!((d.ap - want).abs() < 1e-12);
    assert!((ap_ref(&dets, &gts, 0.5).unwrap() - want).abs() < 1e-12);
    assert_eq!((d.true_positives, d.false_positives), (3, 2));
}
