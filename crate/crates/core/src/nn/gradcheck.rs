//! Central finite-difference check of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::Error;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "max_rel_error={:.3e} tolerance={:.1e} epsilon={:.1e} {}\n",
            self.max_rel_error,
            self.tolerance,
            self.epsilon,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for e in &self.entries {
            s.push_str(&format!("  {:<40} n={:<5} {:.3e}\n", e.name, e.checked, e.max_rel_error));
        }
        s
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Elements probed per tensor; larger tensors are subsampled evenly.
    pub max_probes: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, max_probes: 64 }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| (i * len + len / (2 * max)) / max).collect()
    }
}

/// Compares the gradients of a scalar-valued function against central differences.
///
/// `f` receives a fresh graph and one differentiable leaf per entry of
/// `inputs`, and returns the scalar to differentiate. Every non-frozen
/// parameter of `store` and every input is probed.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let ins: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.leaf(v).cloned()).collect();
        (grads.params, ins)
    };

    let mut entries = Vec::new();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        let idx = probe_indices(p.value.len(), opts.max_probes);
        let mut worst = 0f64;
        for &i in &idx {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.epsilon;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.epsilon;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        entries.push(GradCheckEntry { name: p.name.clone(), checked: idx.len(), max_rel_error: worst });
    }

    let mut probe_inputs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let name = format!("input[{k}]");
        let analytic = analytic.clone().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let idx = probe_indices(inputs[k].len(), opts.max_probes);
        let mut worst = 0f64;
        for &i in &idx {
            let orig = inputs[k].data()[i];
            probe_inputs[k].data_mut()[i] = orig + opts.epsilon;
            let plus = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig - opts.epsilon;
            let minus = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        entries.push(GradCheckEntry { name, checked: idx.len(), max_rel_error: worst });
    }

    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    })
}
