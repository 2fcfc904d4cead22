//! Forward and backward kernels for the differentiable primitives.
//!
//! Everything here works on single `(C, H, W)` tensors; batching is a loop
//! one level up. The [`super::Graph`] tape calls into these kernels.

use num_rational::Ratio;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImageTensor, Tensor};

/// Upper bound on im2col buffer elements; larger convolutions are tiled by rows.
const COL_BUDGET: usize = 1 << 22;

/// Weights and geometry of one 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor<T>,
    /// `(out_ch)`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err!("conv input must be (C, H, W), got {input:?}")),
        };
        let (cout, wcin, k) = match *weight {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => return Err(shape_err!("conv weight must be (out, in, k, k), got {weight:?}")),
        };
        if wcin != cin {
            return Err(shape_err!("conv expects {wcin} input channels, got {cin}"));
        }
        if stride == 0 {
            return Err(invalid!("conv stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("{k}x{k} kernel does not fit {h}x{w} with padding {pad}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { cin, h, w, cout, k, stride, pad, ho, wo })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.kdim() * self.wo).max(1)).clamp(1, self.ho)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], y0: usize, y1: usize, col: &mut [T]) {
    let n = (y1 - y0) * g.wo;
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                for (ry, oy) in (y0..y1).enumerate() {
                    let out = &mut row[ry * g.wo..(ry + 1) * g.wo];
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let n = (y1 - y0) * g.wo;
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                for (ry, oy) in (y0..y1).enumerate() {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[ry * g.wo..(ry + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(shape_err!("conv bias must be ({}), got {:?}", g.cout, b.shape()));
        }
    }
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cout * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let kd = g.kdim();
    if g.is_pointwise() {
        T::gemm(
            g.cout, kd, plane, T::one(), weight.data(), kd as isize, 1, x.data(), plane as isize, 1,
            T::one(), &mut out, plane as isize, 1,
        );
    } else {
        let rows = g.rows_per_chunk();
        let mut col = vec![T::zero(); kd * rows * g.wo];
        let mut y0 = 0;
        while y0 < g.ho {
            let y1 = (y0 + rows).min(g.ho);
            let n = (y1 - y0) * g.wo;
            im2col(&g, x.data(), y0, y1, &mut col[..kd * n]);
            T::gemm(
                g.cout, kd, n, T::one(), weight.data(), kd as isize, 1, &col, n as isize, 1,
                T::one(), &mut out[y0 * g.wo..], plane as isize, 1,
            );
            y0 = y1;
        }
    }
    Tensor::from_vec(&[g.cout, g.ho, g.wo], out)
}

/// Gradients of a convolution; each is `None` when not requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let plane = g.ho * g.wo;
    if dout.shape() != [g.cout, g.ho, g.wo] {
        return Err(shape_err!("conv upstream gradient has shape {:?}", dout.shape()));
    }
    let kd = g.kdim();
    let (want_dx, want_dw, want_db) = want;
    let db = want_db.then(|| {
        let sums = dout.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
        Tensor::from_vec(&[g.cout], sums).expect("bias shape")
    });
    let mut dw = want_dw.then(|| vec![T::zero(); g.cout * kd]);
    let mut dx = want_dx.then(|| vec![T::zero(); g.cin * g.h * g.w]);
    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            T::gemm(
                g.cout, plane, kd, T::one(), dout.data(), plane as isize, 1, x.data(), 1,
                plane as isize, T::one(), dw, kd as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                kd, g.cout, plane, T::one(), weight.data(), 1, kd as isize, dout.data(),
                plane as isize, 1, T::one(), dx, plane as isize, 1,
            );
        }
    } else if want_dx || want_dw {
        let rows = g.rows_per_chunk();
        let mut col = vec![T::zero(); kd * rows * g.wo];
        let mut y0 = 0;
        while y0 < g.ho {
            let y1 = (y0 + rows).min(g.ho);
            let n = (y1 - y0) * g.wo;
            let d = &dout.data()[y0 * g.wo..];
            if let Some(dw) = dw.as_mut() {
                im2col(&g, x.data(), y0, y1, &mut col[..kd * n]);
                T::gemm(
                    g.cout, n, kd, T::one(), d, plane as isize, 1, &col, 1, n as isize, T::one(),
                    dw, kd as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    kd, g.cout, n, T::one(), weight.data(), 1, kd as isize, d, plane as isize, 1,
                    T::zero(), &mut col[..kd * n], n as isize, 1,
                );
                col2im(&g, &col[..kd * n], y0, y1, dx);
            }
            y0 = y1;
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|v| Tensor::from_vec(x.shape(), v).expect("dx shape")),
        dw: dw.map(|v| Tensor::from_vec(weight.shape(), v).expect("dw shape")),
        db,
    })
}

/// 2-D cross-correlation with zero padding.
///
/// Output shape is `(out, (H + 2p - k) / s + 1, (W + 2p - k) / s + 1)`.
pub fn conv2d<T: Scalar>(input: &FeatureMap<T>, params: &ConvParams<T>) -> Result<FeatureMap<T>> {
    params.weight.ensure_finite("conv weight")?;
    if let Some(b) = &params.bias {
        b.ensure_finite("conv bias")?;
    }
    conv2d_raw(input, &params.weight, params.bias.as_ref(), params.stride, params.padding)
}

/// Sub-pixel rearrangement: `out[c, r*h + i, r*w + j] = in[c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Scalar>(input: &FeatureMap<T>, r: usize) -> Result<FeatureMap<T>> {
    let (c, h, w) = input.chw()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(shape_err!("pixel shuffle by {r} needs channels divisible by {}, got {c}", r * r));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    let row = &src[(ic * h + y) * w..][..w];
                    let dst = &mut out[(oc * ho + y * r + i) * wo..][..wo];
                    for (x, &v) in row.iter().enumerate() {
                        dst[x * r + j] = v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, used for the backward pass.
pub fn pixel_unshuffle<T: Scalar>(input: &FeatureMap<T>, r: usize) -> Result<FeatureMap<T>> {
    let (co, ho, wo) = input.chw()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(shape_err!("pixel unshuffle by {r} needs spatial dims divisible by {r}"));
    }
    let (h, w) = (ho / r, wo / r);
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    let row = &src[(oc * ho + y * r + i) * wo..][..wo];
                    let dst = &mut out[(ic * h + y) * w..][..w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        *d = row[x * r + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co * r * r, h, w], out)
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap interpolation weights along one axis, edge-clamped.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub index: Vec<[usize; 4]>,
    pub weight: Vec<[f64; 4]>,
}

impl AxisTaps {
    fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let last = n_in as isize - 1;
        let mut index = Vec::with_capacity(n_out);
        let mut weight = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for (m, (i, wt)) in idx.iter_mut().zip(wts.iter_mut()).enumerate() {
                *i = (base as isize + m as isize - 1).clamp(0, last) as usize;
                *wt = cubic(t - (m as f64 - 1.0));
            }
            let total: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= total);
            index.push(idx);
            weight.push(wts);
        }
        Self { index, weight }
    }
}

/// Precomputed separable bicubic resampling between two spatial sizes.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl ResizePlan {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        if out_hw.0 == 0 || out_hw.1 == 0 || in_hw.0 == 0 || in_hw.1 == 0 {
            return Err(invalid!("degenerate resize {in_hw:?} -> {out_hw:?}"));
        }
        Ok(Self {
            in_hw,
            out_hw,
            rows: AxisTaps::new(in_hw.0, out_hw.0),
            cols: AxisTaps::new(in_hw.1, out_hw.1),
        })
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        if (h, w) != self.in_hw {
            return Err(shape_err!("resize plan expects {:?}, got {:?}", self.in_hw, (h, w)));
        }
        let (ho, wo) = self.out_hw;
        let mut tmp = vec![0f64; h * wo];
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for (ox, t) in tmp[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    let (idx, wt) = (&self.cols.index[ox], &self.cols.weight[ox]);
                    *t = (0..4).map(|m| wt[m] * row[idx[m]].as_f64()).sum();
                }
            }
            for oy in 0..ho {
                let (idx, wt) = (&self.rows.index[oy], &self.rows.weight[oy]);
                for ox in 0..wo {
                    let v: f64 = (0..4).map(|m| wt[m] * tmp[idx[m] * wo + ox]).sum();
                    out.push(T::from_f64_lossy(v));
                }
            }
        }
        Tensor::from_vec(&[c, ho, wo], out)
    }

    /// Adjoint of [`Self::apply`].
    pub fn backward<T: Scalar>(&self, dout: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, ho, wo) = dout.chw()?;
        if (ho, wo) != self.out_hw {
            return Err(shape_err!("resize gradient expects {:?}, got {:?}", self.out_hw, (ho, wo)));
        }
        let (h, w) = self.in_hw;
        let mut out = vec![T::zero(); c * h * w];
        let mut tmp = vec![0f64; h * wo];
        for ch in 0..c {
            tmp.fill(0.0);
            let d = &dout.data()[ch * ho * wo..(ch + 1) * ho * wo];
            for oy in 0..ho {
                let (idx, wt) = (&self.rows.index[oy], &self.rows.weight[oy]);
                for ox in 0..wo {
                    let g = d[oy * wo + ox].as_f64();
                    for m in 0..4 {
                        tmp[idx[m] * wo + ox] += wt[m] * g;
                    }
                }
            }
            let plane = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for ox in 0..wo {
                    let g = tmp[y * wo + ox];
                    let (idx, wt) = (&self.cols.index[ox], &self.cols.weight[ox]);
                    for m in 0..4 {
                        plane[y * w + idx[m]] += T::from_f64_lossy(wt[m] * g);
                    }
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }
}

/// Output size of a rational rescale: `round(scale * n)`, halves rounding up.
pub fn scaled_dim(n: usize, scale: Ratio<u32>) -> Result<usize> {
    if *scale.numer() == 0 {
        return Err(invalid!("resize scale must be > 0"));
    }
    let v = Ratio::new(n as u64 * *scale.numer() as u64, *scale.denom() as u64).round();
    let out = v.to_integer() as usize;
    if out == 0 {
        return Err(invalid!("resizing {n} px by {scale} collapses to zero"));
    }
    Ok(out)
}

/// Bicubic resampling by an exact rational factor.
///
/// Uses the Keys kernel with `a = -0.5`, clamps at the borders and maps
/// pixel centres (`src = (dst + 0.5) * in / out - 0.5`). No antialiasing
/// prefilter is applied when shrinking.
pub fn bicubic_resize<T: Scalar>(input: &ImageTensor<T>, scale: Ratio<u32>) -> Result<ImageTensor<T>> {
    let (_, h, w) = input.chw()?;
    let out = (scaled_dim(h, scale)?, scaled_dim(w, scale)?);
    resize_to(input, out)
}

/// Bicubic resampling to an explicit `(height, width)`.
pub fn resize_to<T: Scalar>(input: &ImageTensor<T>, out_hw: (usize, usize)) -> Result<ImageTensor<T>> {
    let (_, h, w) = input.chw()?;
    if (h, w) == out_hw {
        return Ok(input.clone());
    }
    ResizePlan::new((h, w), out_hw)?.apply(input)
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns form partial windows.
pub(crate) fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    let src = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y < h && xx < w {
                        let i = base + y * w + xx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, arg))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(shape_err!("l1 loss shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
    Ok(T::from_f64_lossy(total / a.len() as f64))
}

/// Gradient of [`l1_loss`] with respect to `a`: `sign(a - b) / N`.
pub fn l1_loss_grad<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<Tensor<T>> {
    let n = T::from_usize(a.len()).expect("len fits");
    a.zip_map(b, |x, y| {
        let d = x - y;
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    })
}

/// Channel-wise concatenation of `(C_i, H, W)` tensors.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| invalid!("concat of nothing"))?;
    let (_, h, w) = first.chw()?;
    let mut c = 0;
    let mut data = Vec::new();
    for x in xs {
        let (ci, hi, wi) = x.chw()?;
        if (hi, wi) != (h, w) {
            return Err(shape_err!("concat spatial mismatch {:?} vs {:?}", (h, w), (hi, wi)));
        }
        c += ci;
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&[c, h, w], data)
}
