//! SSD multibox loss with hard-negative mining.

use super::MatchResult;
use crate::detect::HeadVars;
use crate::error::{shape_err, Result};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negatives kept per positive.
pub const NEG_POS_RATIO: usize = 3;

/// Loss values and their gradients w.r.t. the raw head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiboxTerms {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub num_pos: usize,
    /// Mined negative priors, highest background loss first.
    pub negatives: Vec<usize>,
    pub loc_grad: Vec<f64>,
    pub conf_grad: Vec<f64>,
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Multibox loss on flat `(N, 4)` offsets and `(N, K)` logits.
///
/// Localization is smooth-L1 over positives; confidence is cross-entropy
/// over positives plus the `min(ratio * P, N - P)` negatives with the
/// highest background loss (ties to the lower index). Both are divided by
/// `P`. With no positives, the `min(ratio, N)` hardest negatives are used
/// and the divisor is 1.
pub fn multibox_terms(loc: &[f64], conf: &[f64], k: usize, m: &MatchResult, ratio: usize) -> Result<MultiboxTerms> {
    let n = m.num_priors();
    if loc.len() != n * 4 || conf.len() != n * k || k < 2 {
        return Err(shape_err!("loss inputs of {} and {} values for {n} priors and {k} classes", loc.len(), conf.len()));
    }
    let num_pos = m.num_positives();
    let norm = num_pos.max(1) as f64;
    let logp: Vec<Vec<f64>> = conf.chunks_exact(k).map(log_softmax).collect();

    let mut neg: Vec<(f64, usize)> = (0..n).filter(|&i| !m.positive[i]).map(|i| (-logp[i][0], i)).collect();
    neg.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = if num_pos == 0 { ratio.min(neg.len()) } else { (ratio * num_pos).min(neg.len()) };
    let negatives: Vec<usize> = neg[..keep].iter().map(|&(_, i)| i).collect();

    let mut loc_sum = 0.0;
    let mut loc_grad = vec![0.0; n * 4];
    let mut conf_sum = 0.0;
    let mut conf_grad = vec![0.0; n * k];
    let mut ce = |i: usize, label: usize, conf_sum: &mut f64| {
        *conf_sum -= logp[i][label];
        for c in 0..k {
            let p = logp[i][c].exp();
            conf_grad[i * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / norm;
        }
    };
    for i in 0..n {
        if !m.positive[i] {
            continue;
        }
        for d in 0..4 {
            let diff = loc[i * 4 + d] - m.targets[i][d];
            loc_sum += smooth_l1(diff);
            loc_grad[i * 4 + d] = diff.clamp(-1.0, 1.0) / norm;
        }
        ce(i, m.labels[i], &mut conf_sum);
    }
    for &i in &negatives {
        ce(i, 0, &mut conf_sum);
    }
    let (loc_l, conf_l) = (loc_sum / norm, conf_sum / norm);
    Ok(MultiboxTerms { total: loc_l + conf_l, loc: loc_l, conf: conf_l, num_pos, negatives, loc_grad, conf_grad })
}

/// Records the multibox loss of one image on the tape.
pub fn multibox_loss<T: Scalar>(g: &mut Graph<'_, T>, heads: HeadVars, m: &MatchResult, ratio: usize) -> Result<(Var, MultiboxTerms)> {
    let loc: Vec<f64> = g.value(heads.loc).data().iter().map(|v| v.as_f64()).collect();
    let conf_t = g.value(heads.conf);
    let k = conf_t.shape()[1];
    let conf: Vec<f64> = conf_t.data().iter().map(|v| v.as_f64()).collect();
    let terms = multibox_terms(&loc, &conf, k, m, ratio)?;
    let to_t = |v: &[f64], shape: &[usize]| Tensor::from_vec(shape, v.iter().map(|&x| T::from_f64_lossy(x)).collect());
    let lg = to_t(&terms.loc_grad, &[loc.len() / 4, 4])?;
    let cg = to_t(&terms.conf_grad, &[conf.len() / k, k])?;
    let var = g.custom_scalar(T::from_f64_lossy(terms.total), vec![(heads.loc, lg), (heads.conf, cg)])?;
    Ok((var, terms))
}
