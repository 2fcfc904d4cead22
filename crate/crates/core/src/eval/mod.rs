//! Detection and SR quality metrics, timing, the five-variant ablation and rendering.

mod ablation;
mod latency;
mod metrics;
mod render;

pub use ablation::{run_ablation, AblationReport, AblationRow, REFERENCE_MAP};
pub use latency::{measure_latencies, measure_latency};
pub use metrics::{average_precision, evaluate_detections, evaluate_map, ApDetail, EvalResult, ScoredBox};
pub use render::{draw_detections, render_detections, GROUND_TRUTH_COLOR, PREDICTION_COLOR};

use crate::data::{psnr, Dataset};
use crate::error::Result;
use crate::nn::{resize_to, ParamStore};
use crate::pipeline::Model;
use crate::scalar::Scalar;

/// Mean PSNR of `I_SR` and of bicubic upsampling against HR, over `data`.
pub fn sr_psnr<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    let (mut sr, mut bic) = (0.0, 0.0);
    for s in &data.samples {
        let out = model.sr.run(store, &s.lr)?;
        sr += psnr(&out.sr_image, &s.hr, 1.0)?;
        bic += psnr(&resize_to(&s.lr, s.hr_size())?, &s.hr, 1.0)?;
    }
    let n = data.len().max(1) as f64;
    Ok((sr / n, bic / n))
}
