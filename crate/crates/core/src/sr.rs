//! Residual-dense super-resolution network.
//!
//! `I_LR -> conv3x3 -> F_0 -> RDB x N -> concat -> 1x1 fusion -> F_LR_out`,
//! then `F_LR_out + F_0 -> conv3x3 (C -> C*a^2) -> pixel shuffle(a) -> F_HR_out
//! -> conv3x3 -> residual`, and `I_SR = residual + bicubic(I_LR, a)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImageTensor};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdbConfig {
    /// Dense 3x3 convolutions per block.
    pub num_layers: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
}

impl Default for RdbConfig {
    fn default() -> Self {
        Self { num_layers: 5, growth: 32 }
    }
}

impl RdbConfig {
    /// Width of the concatenation entering the 1x1 local fusion.
    pub fn fusion_width(&self, base_channels: usize) -> usize {
        base_channels + self.num_layers * self.growth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrNetConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub rdb: RdbConfig,
}

impl Default for SrNetConfig {
    fn default() -> Self {
        Self { num_blocks: 8, base_channels: 64, rdb: RdbConfig::default() }
    }
}

impl SrNetConfig {
    pub fn validate(&self, alpha: usize) -> Result<()> {
        if alpha == 0 {
            return Err(invalid!("upscale factor must be >= 1"));
        }
        if self.num_blocks == 0 || self.base_channels == 0 || self.rdb.num_layers == 0 || self.rdb.growth == 0 {
            return Err(invalid!("SR network sizes must all be positive: {self:?}"));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self, alpha: usize) -> usize {
        let c = self.base_channels;
        let g = self.rdb.growth;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let per_block: usize = (0..self.rdb.num_layers).map(|j| conv(c + j * g, g, 3)).sum::<usize>()
            + conv(self.rdb.fusion_width(c), c, 1);
        conv(3, c, 3)
            + self.num_blocks * per_block
            + conv(self.num_blocks * c, c, 1)
            + conv(c, c * alpha * alpha, 3)
            + conv(c, 3, 3)
    }
}

#[derive(Clone, Debug)]
struct Rdb {
    layers: Vec<Conv>,
    fusion: Conv,
}

/// Layer layout of the SR network; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SrNet {
    pub config: SrNetConfig,
    pub alpha: usize,
    head: Conv,
    blocks: Vec<Rdb>,
    global_fusion: Conv,
    upsample: Conv,
    tail: Conv,
}

/// Graph handles for the SR outputs.
#[derive(Clone, Copy, Debug)]
pub struct SrVars {
    pub f0: Var,
    pub f_lr_out: Var,
    pub f_hr_out: Var,
    pub sr_image: Var,
}

/// Materialized SR outputs.
#[derive(Clone, Debug)]
pub struct SrForwardTrace<T> {
    pub f0: FeatureMap<T>,
    pub f_lr_out: FeatureMap<T>,
    pub f_hr_out: FeatureMap<T>,
    pub sr_image: ImageTensor<T>,
}

const PREFIX: &str = "sr";

fn check_finite<T: Scalar>(g: &Graph<'_, T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of {layer}")))
    }
}

impl SrNet {
    /// Registers all SR parameters under `sr.` with seeded fan-in scaled weights.
    ///
    /// The residual tail starts near zero so an untrained network is close
    /// to plain bicubic upsampling.
    pub fn build<T: Scalar>(config: &SrNetConfig, alpha: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(alpha)?;
        let c = config.base_channels;
        let g = config.rdb.growth;
        let linear = std::f64::consts::FRAC_1_SQRT_2;
        let head = Conv::new(store, &format!("{PREFIX}.head"), 3, c, 3, 1, linear, rng)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let layers = (0..config.rdb.num_layers)
                .map(|j| Conv::new(store, &format!("{PREFIX}.rdb{b}.conv{j}"), c + j * g, g, 3, 1, 1.0, rng))
                .collect::<Result<Vec<_>>>()?;
            let fusion = Conv::new(store, &format!("{PREFIX}.rdb{b}.fusion"), config.rdb.fusion_width(c), c, 1, 1, 0.1 * linear, rng)?;
            blocks.push(Rdb { layers, fusion });
        }
        let global_fusion = Conv::new(store, &format!("{PREFIX}.fusion"), config.num_blocks * c, c, 1, 1, linear, rng)?;
        let upsample = Conv::new(store, &format!("{PREFIX}.upsample"), c, c * alpha * alpha, 3, 1, linear, rng)?;
        let tail = Conv::new(store, &format!("{PREFIX}.tail"), c, 3, 3, 1, 1e-3, rng)?;
        Ok(Self { config: config.clone(), alpha, head, blocks, global_fusion, upsample, tail })
    }

    /// Weight bias and weight names of the last convolution (residual prediction).
    pub fn tail_params(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.tail.weight, self.tail.bias)
    }

    pub fn head_params(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.head.weight, self.head.bias)
    }

    /// One residual dense block on a `(C, H, W)` feature.
    pub fn rdb_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, block: usize, x: Var) -> Result<Var> {
        let rdb = self.blocks.get(block).ok_or_else(|| invalid!("no RDB {block}"))?;
        let c = g.value(x).chw()?.0;
        if c != self.config.base_channels {
            return Err(shape_err!("RDB expects {} channels, got {c}", self.config.base_channels));
        }
        let mut feats = vec![x];
        for layer in &rdb.layers {
            let inp = if feats.len() == 1 { x } else { g.concat(&feats)? };
            let y = layer.forward(g, inp)?;
            feats.push(g.relu(y));
        }
        let all = g.concat(&feats)?;
        let fused = rdb.fusion.forward(g, all)?;
        g.add(fused, x)
    }

    /// Full SR forward on a `(3, H, W)` low-resolution image.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, i_lr: Var) -> Result<SrVars> {
        let (c, h, w) = g.value(i_lr).chw()?;
        if c != 3 {
            return Err(shape_err!("SR input must have 3 channels, got {c}"));
        }
        if h < 8 || w < 8 {
            return Err(invalid!("SR input must be at least 8x8, got {h}x{w}"));
        }
        let f0 = self.head.forward(g, i_lr)?;
        check_finite(g, f0, "sr.head")?;
        let mut x = f0;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            x = self.rdb_forward(g, b, x)?;
            check_finite(g, x, &format!("sr.rdb{b}"))?;
            outs.push(x);
        }
        let cat = g.concat(&outs)?;
        let f_lr_out = self.global_fusion.forward(g, cat)?;
        check_finite(g, f_lr_out, "sr.fusion")?;
        let skip = g.add(f_lr_out, f0)?;
        let expanded = self.upsample.forward(g, skip)?;
        let f_hr_out = g.pixel_shuffle(expanded, self.alpha)?;
        check_finite(g, f_hr_out, "sr.upsample")?;
        let residual = self.tail.forward(g, f_hr_out)?;
        let base = g.resize(i_lr, (h * self.alpha, w * self.alpha))?;
        let sr_image = g.add(residual, base)?;
        check_finite(g, sr_image, "sr.tail")?;
        Ok(SrVars { f0, f_lr_out, f_hr_out, sr_image })
    }

    /// Forward pass returning owned tensors.
    pub fn run<T: Scalar>(&self, store: &ParamStore<T>, i_lr: &ImageTensor<T>) -> Result<SrForwardTrace<T>> {
        let mut g = Graph::new(store);
        let x = g.input(i_lr.clone());
        let v = self.forward(&mut g, x)?;
        Ok(SrForwardTrace {
            f0: g.value(v.f0).clone(),
            f_lr_out: g.value(v.f_lr_out).clone(),
            f_hr_out: g.value(v.f_hr_out).clone(),
            sr_image: g.value(v.sr_image).clone(),
        })
    }
}

/// Builds a fresh SR network and its parameters from a seed.
pub fn init_sr_weights<T: Scalar>(config: &SrNetConfig, alpha: usize, seed: u64) -> Result<(SrNet, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SrNet::build(config, alpha, &mut store, &mut rng)?;
    Ok((net, store))
}
