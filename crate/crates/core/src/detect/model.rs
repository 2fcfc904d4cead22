//! VGG-pattern backbone with SR feature ports, extra encoder layers and
//! per-level detection heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::Detection;
use super::codec::decode_one;
use super::nms::fast_nms;
use super::priors::{generate_priors, AnchorSpec, PriorBox};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, ImageTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output channels of every 3x3 conv, grouped by stage; 2x2 pooling follows all stages but the last.
    pub stages: Vec<Vec<usize>>,
    /// Stage whose (pre-pool) output is the first pyramid map.
    pub source_stage: usize,
    /// Channels of the convs after the last stage (first 3x3, then 1x1); the last one is pyramid map 2.
    pub fc: Vec<usize>,
    /// `[reduce, out]` pairs: 1x1 reduction then 3x3 stride-2 conv emitting the next map.
    pub extras: Vec<[usize; 2]>,
    /// Number of pyramid maps fed to the heads.
    pub head_maps: usize,
    /// 1-based conv layer receiving the full-resolution SR feature.
    pub hr_port_layer: usize,
    /// 1-based conv layer receiving the low-resolution SR feature.
    pub lr_port_layer: usize,
    /// Add injected features before the port layer's ReLU instead of after.
    pub inject_before_activation: bool,
    pub anchors: AnchorSpec,
    pub variances: [f64; 2],
    pub nms_iou: f64,
    pub conf_threshold: f64,
    /// Per-class candidates kept before suppression.
    pub top_k: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            stages: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512], vec![512, 512, 512]],
            source_stage: 3,
            fc: vec![1024, 1024],
            extras: vec![[256, 512], [128, 256], [128, 256], [128, 256], [128, 256]],
            head_maps: 7,
            hr_port_layer: 2,
            lr_port_layer: 7,
            inject_before_activation: false,
            anchors: AnchorSpec {
                scales: vec![0.07, 0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.05],
                aspect_ratios: vec![
                    vec![2.0],
                    vec![2.0, 3.0],
                    vec![2.0, 3.0],
                    vec![2.0, 3.0],
                    vec![2.0, 3.0],
                    vec![2.0],
                    vec![2.0],
                ],
                extra_square: true,
            },
            variances: [0.1, 0.2],
            nms_iou: 0.45,
            conf_threshold: 0.01,
            top_k: 200,
            max_detections: 200,
        }
    }
}

/// Location of an injection port in the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Port {
    pub stage: usize,
    pub channels: usize,
}

impl DetectorConfig {
    /// Reduced plan for desk-scale runs: same stage layout and ports, narrow layers, 4 maps.
    pub fn tiny() -> Self {
        Self {
            stages: vec![vec![8, 8], vec![16, 16], vec![24, 24, 24], vec![32, 32, 32], vec![32, 32, 32]],
            fc: vec![48, 48],
            extras: vec![[16, 32], [16, 32]],
            head_maps: 4,
            anchors: AnchorSpec {
                scales: vec![0.15, 0.3, 0.5, 0.7, 0.9],
                aspect_ratios: vec![vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0], vec![2.0]],
                extra_square: true,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(invalid!("detector needs at least one class"));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(invalid!("backbone stages must be non-empty with positive widths"));
        }
        if self.source_stage >= self.stages.len() {
            return Err(invalid!("source stage {} out of {} stages", self.source_stage, self.stages.len()));
        }
        if self.head_maps == 0 {
            return Err(invalid!("head map count must be >= 1"));
        }
        if self.head_maps >= 2 && (self.fc.is_empty() || self.fc.contains(&0)) {
            return Err(invalid!("fc layers required for more than one map"));
        }
        if self.head_maps > 2 + self.extras.len() {
            return Err(invalid!("{} maps requested but only {} extra layers", self.head_maps, self.extras.len()));
        }
        for (name, t) in [("nms_iou", self.nms_iou), ("conf_threshold", self.conf_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid!("{name} must lie in (0, 1), got {t}"));
            }
        }
        if self.variances.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid!("decode variances must be positive"));
        }
        self.anchors.validate(self.head_maps)?;
        self.port(self.hr_port_layer)?;
        self.port(self.lr_port_layer)?;
        Ok(())
    }

    /// Stage and width of the 1-based conv layer `layer`.
    pub fn port(&self, layer: usize) -> Result<Port> {
        let mut seen = 0;
        for (stage, convs) in self.stages.iter().enumerate() {
            if layer <= seen + convs.len() && layer > seen {
                return Ok(Port { stage, channels: convs[layer - seen - 1] });
            }
            seen += convs.len();
        }
        Err(invalid!("port layer {layer} outside the {seen} backbone convs"))
    }

    /// Spatial size of each pyramid map for an input of `(h, w)`.
    pub fn map_sizes(&self, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = hw;
        let mut maps = Vec::new();
        for s in 0..self.stages.len() {
            if s == self.source_stage {
                maps.push((h, w));
            }
            if s + 1 < self.stages.len() {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        if self.head_maps >= 2 {
            maps.push((h, w));
        }
        for _ in 2..self.head_maps {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
            maps.push((h, w));
        }
        maps.truncate(self.head_maps);
        for pair in maps.windows(2) {
            if pair[1].0 >= pair[0].0 && pair[1].1 >= pair[0].1 {
                return Err(invalid!("input {hw:?} too small for {} strictly shrinking maps: {maps:?}", self.head_maps));
            }
        }
        Ok(maps)
    }

    /// Spatial size of a port's feature for an input of `(h, w)`.
    pub fn port_hw(&self, layer: usize, hw: (usize, usize)) -> Result<(usize, usize)> {
        let port = self.port(layer)?;
        let (mut h, mut w) = hw;
        for _ in 0..port.stage {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Ok((h, w))
    }

    pub fn priors(&self, hw: (usize, usize)) -> Result<Vec<PriorBox>> {
        generate_priors(&self.anchors, &self.map_sizes(hw)?)
    }
}

/// Adapted SR features added into the backbone ports.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub f_hr_ssd: Var,
    pub f_lr_ssd: Var,
}

/// Layer layout of the detector; weights live in a [`ParamStore`] under `det.`.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    stages: Vec<Vec<Conv>>,
    fc: Vec<Conv>,
    extras: Vec<(Conv, Conv)>,
    loc_heads: Vec<Conv>,
    conf_heads: Vec<Conv>,
}

/// Raw head outputs: `(N, 4)` offsets and `(N, classes + 1)` logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub loc: Var,
    pub conf: Var,
}

impl Detector {
    pub fn build<T: Scalar>(config: &DetectorConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 3;
        let mut stages = Vec::new();
        for (s, widths) in config.stages.iter().enumerate() {
            let mut convs = Vec::new();
            for (j, &c) in widths.iter().enumerate() {
                convs.push(Conv::new(store, &format!("det.conv{}_{}", s + 1, j + 1), in_ch, c, 3, 1, 1.0, rng)?);
                in_ch = c;
            }
            stages.push(convs);
        }
        let mut map_channels = vec![config.stages[config.source_stage].last().copied().expect("non-empty stage")];
        let mut fc = Vec::new();
        if config.head_maps >= 2 {
            for (j, &c) in config.fc.iter().enumerate() {
                let k = if j == 0 { 3 } else { 1 };
                fc.push(Conv::new(store, &format!("det.fc{}", j + 6), in_ch, c, k, 1, 1.0, rng)?);
                in_ch = c;
            }
            map_channels.push(in_ch);
        }
        let mut extras = Vec::new();
        for (j, &[reduce, out]) in config.extras.iter().take(config.head_maps.saturating_sub(2)).enumerate() {
            let a = Conv::new(store, &format!("det.extra{}_1", j + 1), in_ch, reduce, 1, 1, 1.0, rng)?;
            let b = Conv::new(store, &format!("det.extra{}_2", j + 1), reduce, out, 3, 2, 1.0, rng)?;
            extras.push((a, b));
            in_ch = out;
            map_channels.push(out);
        }
        let mut loc_heads = Vec::new();
        let mut conf_heads = Vec::new();
        let head_gain = 0.5;
        for (k, &c) in map_channels.iter().enumerate() {
            let a = config.anchors.anchors_per_cell(k);
            loc_heads.push(Conv::new(store, &format!("det.head{k}.loc"), c, a * 4, 3, 1, head_gain, rng)?);
            conf_heads.push(Conv::new(store, &format!("det.head{k}.conf"), c, a * (config.num_classes + 1), 3, 1, head_gain, rng)?);
        }
        Ok(Self { config: config.clone(), stages, fc, extras, loc_heads, conf_heads })
    }

    /// Backbone plus encoder; returns the pyramid maps, largest first.
    pub fn backbone_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var, inject: Option<Injection>) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 {
            return Err(shape_err!("detector input must have 3 channels, got {c}"));
        }
        let expected = cfg.map_sizes((h, w))?;
        let mut inject_at: Vec<(usize, Var, &'static str)> = Vec::new();
        if let Some(inj) = inject {
            for (layer, v, name) in [(cfg.hr_port_layer, inj.f_hr_ssd, "HR port"), (cfg.lr_port_layer, inj.f_lr_ssd, "LR port")] {
                let port = cfg.port(layer)?;
                let hw = cfg.port_hw(layer, (h, w))?;
                let (fc_, fh, fw) = g.value(v).chw()?;
                if fc_ != port.channels {
                    return Err(shape_err!("{name} (conv layer {layer}) expects {} channels, got {fc_}", port.channels));
                }
                let v = if (fh, fw) != hw {
                    if name == "HR port" {
                        return Err(shape_err!("{name} (conv layer {layer}) expects {hw:?} spatial size, got {:?}", (fh, fw)));
                    }
                    g.resize(v, hw)?
                } else {
                    v
                };
                inject_at.push((layer, v, name));
            }
        }

        let mut maps = Vec::new();
        let mut x = image;
        let mut layer = 0;
        let last_needed_stage = if cfg.head_maps == 1 { cfg.source_stage } else { self.stages.len() - 1 };
        for (s, convs) in self.stages.iter().enumerate().take(last_needed_stage + 1) {
            for conv in convs {
                layer += 1;
                let y = conv.forward(g, x)?;
                let port = inject_at.iter().find(|(l, _, _)| *l == layer).map(|(_, v, _)| *v);
                x = match port {
                    Some(f) if cfg.inject_before_activation => {
                        let z = g.add(y, f)?;
                        g.relu(z)
                    }
                    Some(f) => {
                        let z = g.relu(y);
                        g.add(z, f)?
                    }
                    None => g.relu(y),
                };
            }
            if s == cfg.source_stage {
                maps.push(x);
            }
            if s + 1 < self.stages.len() && s < last_needed_stage {
                x = g.max_pool2(x)?;
            }
        }
        if cfg.head_maps >= 2 {
            for conv in &self.fc {
                let y = conv.forward(g, x)?;
                x = g.relu(y);
            }
            maps.push(x);
        }
        for (a, b) in &self.extras {
            let y = a.forward(g, x)?;
            let y = g.relu(y);
            let y = b.forward(g, y)?;
            x = g.relu(y);
            maps.push(x);
        }
        for (m, want) in maps.iter().zip(&expected) {
            let (_, mh, mw) = g.value(*m).chw()?;
            debug_assert_eq!((mh, mw), *want);
        }
        Ok(maps)
    }

    /// Per-level 3x3 loc/conf heads, flattened into prior order.
    pub fn heads_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, maps: &[Var]) -> Result<HeadVars> {
        if maps.len() != self.loc_heads.len() {
            return Err(shape_err!("{} maps for {} heads", maps.len(), self.loc_heads.len()));
        }
        let mut locs = Vec::new();
        let mut confs = Vec::new();
        for ((m, lh), ch) in maps.iter().zip(&self.loc_heads).zip(&self.conf_heads) {
            locs.push(lh.forward(g, *m)?);
            confs.push(ch.forward(g, *m)?);
        }
        let loc = g.rows(&locs, 4)?;
        let conf = g.rows(&confs, self.config.num_classes + 1)?;
        Ok(HeadVars { loc, conf })
    }

    /// Backbone and heads, checking the head rows against the prior count.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var, inject: Option<Injection>) -> Result<(HeadVars, Vec<PriorBox>)> {
        let (_, h, w) = g.value(image).chw()?;
        let maps = self.backbone_forward(g, image, inject)?;
        let heads = self.heads_forward(g, &maps)?;
        let priors = self.config.priors((h, w))?;
        let rows = g.value(heads.loc).shape()[0];
        if rows != priors.len() {
            return Err(shape_err!("heads emit {rows} rows for {} priors", priors.len()));
        }
        Ok((heads, priors))
    }
}

/// Row-wise softmax of an `(N, K)` logit matrix, in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Softmax, confidence filter, decoding, clipping and suppression.
pub fn postprocess<T: Scalar>(
    config: &DetectorConfig,
    loc: &Tensor<T>,
    conf: &Tensor<T>,
    priors: &[PriorBox],
    image_hw: (usize, usize),
) -> Result<Vec<Detection>> {
    let k = config.num_classes + 1;
    if loc.shape() != [priors.len(), 4] || conf.shape() != [priors.len(), k] {
        return Err(shape_err!("head outputs {:?}/{:?} for {} priors", loc.shape(), conf.shape(), priors.len()));
    }
    loc.ensure_finite("box offsets")?;
    let probs = softmax_rows(conf);
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut cands = Vec::new();
    for (i, p) in priors.iter().enumerate() {
        for cls in 1..k {
            let score = probs[i * k + cls];
            if score <= config.conf_threshold {
                continue;
            }
            let t = &loc.data()[i * 4..i * 4 + 4];
            let t = [t[0].as_f64(), t[1].as_f64(), t[2].as_f64(), t[3].as_f64()];
            if let Some(bbox) = decode_one(t, p, config.variances, (iw, ih)).clip(iw, ih) {
                cands.push(Detection { bbox, class_id: cls - 1, score });
            }
        }
    }
    let mut dets = fast_nms(&cands, config.nms_iou, config.top_k);
    dets.truncate(config.max_detections);
    Ok(dets)
}

/// Two 3x3 transition convolutions mapping SR features onto the port widths.
#[derive(Clone, Debug)]
pub struct Adapters {
    lr: Conv,
    hr: Conv,
}

impl Adapters {
    /// Registers `adapt.lr` and `adapt.hr`; weights start small so injection begins near a no-op.
    pub fn build<T: Scalar>(sr_channels: usize, det: &DetectorConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let lr_port = det.port(det.lr_port_layer)?;
        let hr_port = det.port(det.hr_port_layer)?;
        Ok(Self {
            lr: Conv::new(store, "adapt.lr", sr_channels, lr_port.channels, 3, 1, 0.1, rng)?,
            hr: Conv::new(store, "adapt.hr", sr_channels, hr_port.channels, 3, 1, 0.1, rng)?,
        })
    }

    /// `(F_LR_out, F_HR_out) -> Injection { F_HR_SSD, F_LR_SSD }`, spatial sizes unchanged.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_lr_out: Var, f_hr_out: Var) -> Result<Injection> {
        for (v, conv, name) in [(f_lr_out, &self.lr, "F_LR_out"), (f_hr_out, &self.hr, "F_HR_out")] {
            let c = g.value(v).chw()?.0;
            if c != conv.in_ch {
                return Err(shape_err!("{name} has {c} channels, adapter expects {}", conv.in_ch));
            }
        }
        let f_lr_ssd = self.lr.forward(g, f_lr_out)?;
        let f_hr_ssd = self.hr.forward(g, f_hr_out)?;
        Ok(Injection { f_hr_ssd, f_lr_ssd })
    }

    /// Owned-tensor form returning `(F_LR_SSD, F_HR_SSD)`.
    pub fn adapt_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f_lr_out: &FeatureMap<T>,
        f_hr_out: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let mut g = Graph::new(store);
        let (a, b) = (g.input(f_lr_out.clone()), g.input(f_hr_out.clone()));
        let inj = self.forward(&mut g, a, b)?;
        Ok((g.value(inj.f_lr_ssd).clone(), g.value(inj.f_hr_ssd).clone()))
    }
}

/// Runs the detector on one image (optionally with injected features) and post-processes.
pub fn detect<T: Scalar>(
    det: &Detector,
    store: &ParamStore<T>,
    image: &ImageTensor<T>,
    injected: Option<(&FeatureMap<T>, &FeatureMap<T>)>,
) -> Result<Vec<Detection>> {
    let (_, h, w) = image.chw()?;
    let mut g = Graph::new(store);
    let x = g.input(image.clone());
    let inject = injected.map(|(hr, lr)| Injection { f_hr_ssd: g.input(hr.clone()), f_lr_ssd: g.input(lr.clone()) });
    let (heads, priors) = det.forward(&mut g, x, inject)?;
    postprocess(&det.config, g.value(heads.loc), g.value(heads.conf), &priors, (h, w))
}
