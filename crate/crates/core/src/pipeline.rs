//! The joint SR + detector model and the five detection pipelines built from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{postprocess, Adapters, Detection, Detector, DetectorConfig, HeadVars, PriorBox};
use crate::error::{invalid, Result};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::sr::{SrNet, SrNetConfig, SrVars};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub alpha: usize,
    pub sr: SrNetConfig,
    pub detector: DetectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { alpha: 4, sr: SrNetConfig::default(), detector: DetectorConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sr.validate(self.alpha)?;
        self.detector.validate()?;
        let hr = self.detector.port(self.detector.hr_port_layer)?;
        if hr.stage != 0 {
            return Err(invalid!(
                "HR port layer {} sits in stage {}, but F_HR_SSD is full resolution and needs stage 0",
                self.detector.hr_port_layer,
                hr.stage + 1
            ));
        }
        Ok(())
    }
}

/// How the detector input is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Bicubic+SSD")]
    BicubicSsd,
    #[serde(rename = "SRnet+SSD")]
    SrnetSsd,
    #[serde(rename = "(SRnet+SSD)_ft")]
    SrnetSsdFt,
    #[serde(rename = "ShipSRDet")]
    ShipSrDet,
    #[serde(rename = "HR+SSD")]
    HrSsd,
}

impl Variant {
    /// Table order.
    pub const ALL: [Variant; 5] = [Variant::BicubicSsd, Variant::SrnetSsd, Variant::SrnetSsdFt, Variant::ShipSrDet, Variant::HrSsd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BicubicSsd => "Bicubic+SSD",
            Variant::SrnetSsd => "SRnet+SSD",
            Variant::SrnetSsdFt => "(SRnet+SSD)_ft",
            Variant::ShipSrDet => "ShipSRDet",
            Variant::HrSsd => "HR+SSD",
        }
    }

    /// File-name form: `bicubic_ssd`, `srnet_ssd`, `srnet_ssd_ft`, `shipsrdet`, `hr_ssd`.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::BicubicSsd => "bicubic_ssd",
            Variant::SrnetSsd => "srnet_ssd",
            Variant::SrnetSsdFt => "srnet_ssd_ft",
            Variant::ShipSrDet => "shipsrdet",
            Variant::HrSsd => "hr_ssd",
        }
    }

    pub fn input(self) -> InputMode {
        match self {
            Variant::BicubicSsd => InputMode::Bicubic,
            Variant::HrSsd => InputMode::Hr,
            Variant::SrnetSsd | Variant::SrnetSsdFt => InputMode::Sr { integrate: false },
            Variant::ShipSrDet => InputMode::Sr { integrate: true },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['(', ')', '+', '_', '-', ' '], "");
        let v = match key.as_str() {
            "bicubicssd" | "bicubic" => Variant::BicubicSsd,
            "srnetssd" | "srnet" => Variant::SrnetSsd,
            "srnetssdft" | "srnetft" => Variant::SrnetSsdFt,
            "shipsrdet" => Variant::ShipSrDet,
            "hrssd" | "hr" => Variant::HrSsd,
            _ => {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                return Err(invalid!("unknown variant {s:?}; expected one of {}", names.join(", ")));
            }
        };
        Ok(v)
    }
}

/// End-to-end fine-tuning mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneVariant {
    /// SR output feeds a plain detector; adapters are zeroed and frozen.
    NoIntegration,
    /// SR features are injected into the detector through the adapters.
    #[default]
    FullIntegration,
}

impl FinetuneVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneVariant::NoIntegration => "no_integration",
            FinetuneVariant::FullIntegration => "full_integration",
        }
    }

    pub fn evaluated_as(self) -> Variant {
        match self {
            FinetuneVariant::NoIntegration => Variant::SrnetSsdFt,
            FinetuneVariant::FullIntegration => Variant::ShipSrDet,
        }
    }
}

impl std::str::FromStr for FinetuneVariant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_integration" => Ok(FinetuneVariant::NoIntegration),
            "full_integration" => Ok(FinetuneVariant::FullIntegration),
            other => Err(invalid!("unknown fine-tuning variant {other:?}; expected no_integration or full_integration")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Hr,
    Bicubic,
    Sr { integrate: bool },
}

/// Recorded forward pass of one image.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub heads: HeadVars,
    pub priors: Vec<PriorBox>,
    /// Image the detector saw.
    pub det_input: Var,
    pub sr: Option<SrVars>,
}

/// SR network, detector and adapters sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub sr: SrNet,
    pub det: Detector,
    pub adapters: Adapters,
}

impl Model {
    /// Each component draws from its own stream of `seed`, so its initial
    /// weights do not depend on the other components' sizes.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let sr = SrNet::build(&config.sr, config.alpha, &mut store, &mut stream(1))?;
        let det = Detector::build(&config.detector, &mut store, &mut stream(2))?;
        let adapters = Adapters::build(config.sr.base_channels, &config.detector, &mut store, &mut stream(3))?;
        Ok((Self { config: config.clone(), sr, det, adapters }, store))
    }

    /// Records the pipeline for `mode` on an LR image (and its HR counterpart for [`InputMode::Hr`]).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mode: InputMode, lr: Var, hr: Option<Var>) -> Result<ForwardVars> {
        let (_, h, w) = g.value(lr).chw()?;
        let hr_hw = (h * self.config.alpha, w * self.config.alpha);
        let (det_input, sr, inject) = match mode {
            InputMode::Hr => {
                let hr = hr.ok_or_else(|| invalid!("the HR pipeline needs the HR image"))?;
                (hr, None, None)
            }
            InputMode::Bicubic => (g.resize(lr, hr_hw)?, None, None),
            InputMode::Sr { integrate } => {
                let v = self.sr.forward(g, lr)?;
                let inject = if integrate { Some(self.adapters.forward(g, v.f_lr_out, v.f_hr_out)?) } else { None };
                (v.sr_image, Some(v), inject)
            }
        };
        let (heads, priors) = self.det.forward(g, det_input, inject)?;
        Ok(ForwardVars { heads, priors, det_input, sr })
    }

    /// Detections for one image, in HR pixel coordinates.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        variant: Variant,
        lr: &ImageTensor<T>,
        hr: Option<&ImageTensor<T>>,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new(store);
        let lv = g.input(lr.clone());
        let hv = hr.map(|t| g.input(t.clone()));
        let f = self.forward(&mut g, variant.input(), lv, hv)?;
        let (_, h, w) = g.value(f.det_input).chw()?;
        postprocess(&self.det.config, g.value(f.heads.loc), g.value(f.heads.conf), &f.priors, (h, w))
    }
}
