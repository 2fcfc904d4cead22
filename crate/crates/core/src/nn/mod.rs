//! Differentiable tensor primitives, parameter storage and gradient checks.

mod gradcheck;
mod graph;
pub mod ops;
mod params;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{
    bicubic_resize, concat_channels, conv2d, l1_loss, l1_loss_grad, pixel_shuffle, pixel_unshuffle,
    resize_to, scaled_dim, ConvParams,
};
pub use params::{he_normal, Param, ParamId, ParamStore};

use crate::error::Result;
use crate::scalar::Scalar;
use rand::Rng;

/// A convolution layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers `{name}.weight` and `{name}.bias`; padding keeps size for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(&[out_ch, in_ch, kernel, kernel], gain, rng))?;
        let bias = store.add(format!("{name}.bias"), crate::Tensor::zeros(&[out_ch]))?;
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, pad: kernel / 2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    /// Snapshot of the layer's weights as [`ConvParams`].
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> ConvParams<T> {
        ConvParams {
            weight: store.value(self.weight).clone(),
            bias: Some(store.value(self.bias).clone()),
            stride: self.stride,
            padding: self.pad,
        }
    }
}
