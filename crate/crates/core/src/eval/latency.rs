//! Wall-clock inference timing.

use std::time::Instant;

use crate::error::{invalid, Result};
use crate::nn::{resize_to, ParamStore};
use crate::pipeline::{Model, Variant};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

fn probe_image<T: Scalar>(size: usize) -> ImageTensor<T> {
    ImageTensor::from_fn_chw(3, size, size, |c, y, x| {
        let v = ((x * 7 + y * 13 + c * 29) % 97) as f64 / 96.0;
        T::from_f64_lossy(0.2 + 0.6 * v)
    })
}

/// Mean milliseconds per image for each `(variant, weights)` entry.
///
/// Entries are timed round-robin, one image each per round, so slow drift
/// of the machine affects all of them alike. Input preparation is not
/// timed; the bicubic upsampling inside `Bicubic+SSD` is.
pub fn measure_latencies<T: Scalar>(
    model: &Model,
    entries: &[(Variant, &ParamStore<T>)],
    lr_size: usize,
    warmup: usize,
    iterations: usize,
) -> Result<Vec<f64>> {
    if warmup < 3 || iterations < 10 {
        return Err(invalid!("latency needs at least 3 warmup and 10 timed iterations, got {warmup} and {iterations}"));
    }
    let lr = probe_image::<T>(lr_size);
    let hr = resize_to(&lr, (lr_size * model.config.alpha, lr_size * model.config.alpha))?;
    let mut total = vec![0f64; entries.len()];
    for round in 0..warmup + iterations {
        for (k, &(variant, store)) in entries.iter().enumerate() {
            let t = Instant::now();
            let dets = model.infer(store, variant, &lr, Some(&hr))?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(dets);
            if round >= warmup {
                total[k] += ms;
            }
        }
    }
    Ok(total.into_iter().map(|t| t / iterations as f64).collect())
}

/// Mean milliseconds per image of one pipeline on a `(3, lr_size, lr_size)` input.
pub fn measure_latency<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    variant: Variant,
    lr_size: usize,
    warmup: usize,
    iterations: usize,
) -> Result<f64> {
    Ok(measure_latencies(model, &[(variant, store)], lr_size, warmup, iterations)?[0])
}
