//! The five-variant comparison: shared training, per-variant evaluation, reports.

use std::fmt::Write as _;
use std::path::Path;

use super::{evaluate_map, measure_latencies};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::{FinetuneVariant, Model, Variant};
use crate::train::{finetune_e2e, train_detector, train_sr, TrainOptions};

/// Published full-scale mAP (%) and average time (ms) per variant, shown for context only.
pub const REFERENCE_MAP: [(Variant, f64, f64); 5] = [
    (Variant::BicubicSsd, 58.80, 81.0),
    (Variant::SrnetSsd, 60.10, 163.0),
    (Variant::SrnetSsdFt, 63.80, 163.0),
    (Variant::ShipSrDet, 64.50, 190.0),
    (Variant::HrSsd, 68.80, 81.0),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean over seeds.
    pub map: f64,
    pub map_per_seed: Vec<f64>,
    pub avg_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// In [`Variant::ALL`] order.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    /// mAP only, so identical seeds give identical bytes.
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,map");
        for seed in &self.seeds {
            let _ = write!(s, ",map_seed{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.variant.name(), r.map);
            for m in &r.map_per_seed {
                let _ = write!(s, ",{m}");
            }
            s.push('\n');
        }
        s
    }

    pub fn latency_csv(&self) -> String {
        let mut s = String::from("variant,avg_ms\n");
        for r in &self.rows {
            let ms = r.avg_ms.map(|m| format!("{m:.3}")).unwrap_or_default();
            let _ = writeln!(s, "{},{ms}", r.variant.name());
        }
        s
    }

    /// `mAP(HR+SSD) >= mAP(Bicubic+SSD)`.
    pub fn hr_beats_bicubic(&self) -> bool {
        self.row(Variant::HrSsd).map >= self.row(Variant::BicubicSsd).map
    }

    /// `ShipSRDet >= (SRnet+SSD)_ft >= SRnet+SSD` on seed means.
    pub fn sr_trend_holds(&self) -> bool {
        let m = |v| self.row(v).map;
        m(Variant::ShipSrDet) >= m(Variant::SrnetSsdFt) && m(Variant::SrnetSsdFt) >= m(Variant::SrnetSsd)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>9} {:>10} {:>10} {:>10}", "Variant", "mAP (%)", "Time (ms)", "Ref mAP", "Ref ms");
        for r in &self.rows {
            let (_, ref_map, ref_ms) = REFERENCE_MAP.iter().find(|(v, _, _)| *v == r.variant).copied().expect("reference row");
            let ms = r.avg_ms.map(|m| format!("{m:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<16} {:>9.2} {:>10} {:>10.2} {:>10.0}", r.variant.name(), 100.0 * r.map, ms, ref_map, ref_ms);
        }
        let verdict = |b: bool| if b { "holds" } else { "does not hold" };
        let _ = writeln!(s);
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        let _ = writeln!(s, "mAP(HR+SSD) >= mAP(Bicubic+SSD): {}", verdict(self.hr_beats_bicubic()));
        let _ = writeln!(s, "trend ShipSRDet >= (SRnet+SSD)_ft >= SRnet+SSD (seed means): {}", verdict(self.sr_trend_holds()));
        let _ = writeln!(s, "Ref columns: full-scale HRSC2016 results on a GPU, listed for context, not expected here.");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("ablation.csv", self.csv()), ("latency.csv", self.latency_csv()), ("ablation.txt", self.table())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Trains and scores all five variants for every seed in `cfg.eval.seeds`.
///
/// Per seed: SR pretraining, then one detector trained on HR images that
/// serves `HR+SSD`, `Bicubic+SSD` and `SRnet+SSD`; the two fine-tuned
/// variants start from those weights. Latency is measured on the first
/// seed's weights when `time_it` is set. Stage logs, checkpoints and
/// per-variant evaluations go under `out_dir/seed<k>/`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train: &Dataset<f32>,
    test: &Dataset<f32>,
    out_dir: Option<&Path>,
    time_it: bool,
) -> Result<AblationReport> {
    if cfg.eval.seeds.is_empty() {
        return Err(Error::Config("eval.seeds is empty; the ablation needs at least one seed".into()));
    }
    let mut per_seed: Vec<[f64; 5]> = Vec::new();
    let mut times: Option<Vec<f64>> = None;
    for &seed in &cfg.eval.seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let sub = out_dir.map(|d| d.join(format!("seed{seed}")));
        let opts = TrainOptions { out_dir: sub.as_deref(), ..TrainOptions::default() };
        let (model, mut base) = Model::build::<f32>(&c.model, seed)?;
        train_sr(&model, &mut base, train, &c, &opts)?;
        train_detector(&model, &mut base, train, &c, &opts)?;
        let mut stores: Vec<(Variant, ParamStore<f32>)> = Vec::new();
        for ft in [FinetuneVariant::NoIntegration, FinetuneVariant::FullIntegration] {
            let mut s = base.clone();
            finetune_e2e(&model, &mut s, train, &c, ft, &opts)?;
            stores.push((ft.evaluated_as(), s));
        }
        let weights = |v: Variant| stores.iter().find(|(k, _)| *k == v).map(|(_, s)| s).unwrap_or(&base);
        let mut maps = [0.0; 5];
        for (k, v) in Variant::ALL.into_iter().enumerate() {
            let (res, _) = evaluate_map(&model, weights(v), v, test, c.eval.iou_threshold, c.eval.eleven_point)
                .map_err(|e| Error::Validation(format!("evaluating {v} (seed {seed}): {e}")))?;
            log::info!("seed {seed} {v}: mAP {:.4}", res.map);
            if let Some(d) = &sub {
                let p = d.join(format!("eval_{}.csv", v.slug()));
                std::fs::write(&p, res.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
            maps[k] = res.map;
        }
        per_seed.push(maps);
        if time_it && times.is_none() {
            let entries: Vec<(Variant, &ParamStore<f32>)> = Variant::ALL.iter().map(|&v| (v, weights(v))).collect();
            times = Some(measure_latencies(&model, &entries, c.eval.latency_lr_size, c.eval.latency_warmup, c.eval.latency_iterations)?);
        }
    }
    let rows = Variant::ALL
        .into_iter()
        .enumerate()
        .map(|(k, variant)| {
            let map_per_seed: Vec<f64> = per_seed.iter().map(|m| m[k]).collect();
            AblationRow {
                variant,
                map: map_per_seed.iter().sum::<f64>() / map_per_seed.len() as f64,
                map_per_seed,
                avg_ms: times.as_ref().map(|t| t[k]),
            }
        })
        .collect();
    let report = AblationReport { seeds: cfg.eval.seeds.clone(), rows };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}
