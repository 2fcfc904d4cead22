//! Epoch loops shared by SR pretraining, detector pretraining and fine-tuning.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{match_priors, multibox_loss, Adam};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, StageConfig};
use crate::data::{augment, Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};
use crate::pipeline::{FinetuneVariant, InputMode, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sr,
    Detector,
    Finetune(FinetuneVariant),
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sr => "sr",
            Stage::Detector => "detector",
            Stage::Finetune(FinetuneVariant::NoIntegration) => "finetune_no_integration",
            Stage::Finetune(FinetuneVariant::FullIntegration) => "finetune_full_integration",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Sr => 1,
            Stage::Detector => 2,
            Stage::Finetune(FinetuneVariant::NoIntegration) => 3,
            Stage::Finetune(FinetuneVariant::FullIntegration) => 4,
        }
    }

    fn config(self, cfg: &ExperimentConfig) -> &StageConfig {
        match self {
            Stage::Sr => &cfg.train.sr,
            Stage::Detector => &cfg.train.detector,
            Stage::Finetune(_) => &cfg.train.finetune,
        }
    }

    /// Marks the parameters this stage optimizes; everything else is frozen.
    fn select<T: Scalar>(self, store: &mut ParamStore<T>, cfg: &ExperimentConfig) {
        store.set_frozen("", true);
        match self {
            Stage::Sr => {
                store.set_frozen("sr.", false);
            }
            Stage::Detector => {
                store.set_frozen("det.", false);
            }
            Stage::Finetune(v) => {
                let t = &cfg.train;
                store.set_frozen("sr.", t.freeze_sr);
                store.set_frozen("det.", t.freeze_detector);
                match v {
                    FinetuneVariant::FullIntegration => {
                        store.set_frozen("adapt.", t.freeze_adapters);
                    }
                    FinetuneVariant::NoIntegration => store.zero_values("adapt."),
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Directory for the CSV log and checkpoints; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<&'a Checkpoint>,
    /// Overrides the stage's epoch count.
    pub epochs: Option<usize>,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<usize>,
}

/// Per-image loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub l1: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.loc += o.loc;
        self.conf += o.conf;
        self.l1 += o.l1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means over the images seen in the epoch.
    pub loss: LossParts,
}

const LOG_HEADER: &str = "epoch,lr,steps,loss,loc,conf,l1";

impl EpochLog {
    fn csv(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.epoch, self.lr, self.steps, l.total, l.loc, l.conf, l.l1)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub checkpoint: Checkpoint,
    /// Final checkpoint path when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stage.tag());
    rng.set_stream(epoch as u64);
    rng
}

fn metrics(entry: Option<&EpochLog>) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if let Some(e) = entry {
        m.insert("loss".into(), e.loss.total);
        m.insert("loc".into(), e.loss.loc);
        m.insert("conf".into(), e.loss.conf);
        m.insert("l1".into(), e.loss.l1);
        m.insert("lr".into(), e.lr);
    }
    m
}

type GradFn<'f, T> = dyn FnMut(&ParamStore<T>, &Sample<T>) -> Result<(Vec<Option<Tensor<T>>>, LossParts)> + 'f;

fn run_stage<T: Scalar>(
    stage: Stage,
    cfg: &ExperimentConfig,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    grads_of: &mut GradFn<'_, T>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty; nothing to train on", data.split.as_str())));
    }
    let sc = stage.config(cfg);
    let schedule = sc.schedule();
    schedule.validate()?;
    let epochs = opts.epochs.unwrap_or(sc.epochs);
    let (mut adam, start) = match opts.resume {
        Some(ck) => {
            if ck.manifest.kind != stage.name() {
                return Err(Error::Checkpoint(format!("cannot resume {} from a {} checkpoint", stage.name(), ck.manifest.kind)));
            }
            ck.load_params(store, "")?;
            (ck.adam(store)?, ck.manifest.epoch)
        }
        None => (Adam::default(), 0),
    };
    stage.select(store, cfg);

    let name = stage.name();
    let mut csv = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{name}_log.csv"));
            let append = opts.resume.is_some() && path.is_file();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if !append {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let save = |ck: &Checkpoint, file: String| -> Result<Option<PathBuf>> {
        match opts.out_dir {
            Some(dir) => {
                let p = dir.join(file);
                ck.save(&p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };

    let mut log: Vec<EpochLog> = Vec::new();
    let mut steps = 0usize;
    let mut done = start;
    let inv = |n: usize| T::from_f64_lossy(1.0 / n as f64);
    'epochs: for epoch in start..epochs {
        let lr = schedule.lr_at(epoch);
        let mut rng = epoch_rng(cfg.train.seed, stage, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        let mut epoch_steps = 0usize;
        let mut complete = true;
        for batch in order.chunks(sc.batch_size) {
            if opts.max_steps.is_some_and(|m| steps >= m) {
                complete = false;
                break;
            }
            store.zero_grad();
            for &i in batch {
                let s: Cow<Sample<T>> = if cfg.dataset.augment {
                    Cow::Owned(augment(&data.samples[i], &mut rng))
                } else {
                    Cow::Borrowed(&data.samples[i])
                };
                let outcome = grads_of(store, &s);
                let reason = match &outcome {
                    Ok((_, p)) if !p.total.is_finite() => Some(format!("loss {} on {}", p.total, s.id)),
                    Ok((g, _)) if g.iter().flatten().any(|t| !t.is_finite()) => Some(format!("non-finite gradient on {}", s.id)),
                    Err(Error::NonFinite(what)) => Some(format!("non-finite {what} on {}", s.id)),
                    _ => None,
                };
                if let Some(reason) = reason {
                    let ck = Checkpoint::capture(name, cfg, epoch, metrics(log.last()), store, Some(&adam));
                    if let Some(p) = save(&ck, format!("{name}_last_good.ckpt"))? {
                        log::error!("{name} diverged; last good state saved to {}", p.display());
                    }
                    return Err(Error::Diverged { epoch, reason });
                }
                let (grads, parts) = outcome?;
                store.accumulate(&grads)?;
                sums += parts;
                seen += 1;
            }
            store.scale_grads(inv(batch.len()));
            adam.step(store, lr)?;
            steps += 1;
            epoch_steps += 1;
        }
        if seen > 0 {
            let n = seen as f64;
            let entry = EpochLog {
                epoch,
                lr,
                steps: epoch_steps,
                loss: LossParts { total: sums.total / n, loc: sums.loc / n, conf: sums.conf / n, l1: sums.l1 / n },
            };
            log::info!("{name} epoch {epoch} lr {lr:e} loss {:.6}", entry.loss.total);
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", entry.csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(entry);
        }
        if !complete {
            break 'epochs;
        }
        done = epoch + 1;
        if sc.checkpoint_every > 0 && done % sc.checkpoint_every == 0 && done < epochs {
            let ck = Checkpoint::capture(name, cfg, done, metrics(log.last()), store, Some(&adam));
            save(&ck, format!("{name}_epoch{done:04}.ckpt"))?;
        }
    }
    let checkpoint = Checkpoint::capture(name, cfg, done, metrics(log.last()), store, Some(&adam));
    let checkpoint_path = save(&checkpoint, format!("{name}.ckpt"))?;
    Ok(TrainOutcome { log, steps, checkpoint, checkpoint_path })
}

/// SR pretraining with the L1 loss between `I_SR` and the HR image.
pub fn train_sr<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    run_stage(Stage::Sr, cfg, store, data, opts, &mut |store, s| {
        let mut g = Graph::new(store);
        let lr = g.input(s.lr.clone());
        let hr = g.input(s.hr.clone());
        let v = model.sr.forward(&mut g, lr)?;
        let loss = g.l1_loss(v.sr_image, hr)?;
        let l1 = g.value(loss).data()[0].as_f64();
        let grads = g.backward(loss)?;
        Ok((grads.params, LossParts { total: l1, l1, ..LossParts::default() }))
    })
}

/// Detector training on HR images under the multibox loss.
pub fn train_detector<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    run_stage(Stage::Detector, cfg, store, data, opts, &mut |store, s| {
        let mut g = Graph::new(store);
        let lr = g.input(s.lr.clone());
        let hr = g.input(s.hr.clone());
        let f = model.forward(&mut g, InputMode::Hr, lr, Some(hr))?;
        let (_, h, w) = s.hr.chw()?;
        let m = match_priors(&s.boxes, &s.classes, &f.priors, (w as f64, h as f64), cfg.train.match_iou, model.det.config.variances)?;
        let (loss, terms) = multibox_loss(&mut g, f.heads, &m, cfg.train.neg_pos_ratio)?;
        let grads = g.backward(loss)?;
        Ok((grads.params, LossParts { total: terms.total, loc: terms.loc, conf: terms.conf, l1: 0.0 }))
    })
}

/// Gradients of the fine-tuning objective on one sample.
///
/// The objective is the multibox loss on the SR image (with adapter
/// injection for [`FinetuneVariant::FullIntegration`]) plus
/// `train.l1_weight` times the SR L1 loss.
pub fn finetune_grads<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    sample: &Sample<T>,
    variant: FinetuneVariant,
    cfg: &ExperimentConfig,
) -> Result<(crate::nn::Gradients<T>, LossParts)> {
    let mut g = Graph::new(store);
    let lr = g.input(sample.lr.clone());
    let integrate = variant == FinetuneVariant::FullIntegration;
    let f = model.forward(&mut g, InputMode::Sr { integrate }, lr, None)?;
    let (_, h, w) = g.value(f.det_input).chw()?;
    let m = match_priors(&sample.boxes, &sample.classes, &f.priors, (w as f64, h as f64), cfg.train.match_iou, model.det.config.variances)?;
    let (det_loss, terms) = multibox_loss(&mut g, f.heads, &m, cfg.train.neg_pos_ratio)?;
    let mut parts = LossParts { total: terms.total, loc: terms.loc, conf: terms.conf, l1: 0.0 };
    let loss = if cfg.train.l1_weight > 0.0 {
        let hr = g.input(sample.hr.clone());
        let sr = f.sr.expect("SR pipeline").sr_image;
        let l1 = g.l1_loss(sr, hr)?;
        parts.l1 = g.value(l1).data()[0].as_f64();
        parts.total += cfg.train.l1_weight * parts.l1;
        g.weighted_sum(&[(det_loss, T::one()), (l1, T::from_f64_lossy(cfg.train.l1_weight))])?
    } else {
        det_loss
    };
    Ok((g.backward(loss)?, parts))
}

/// Joint optimization of SR, adapters and detector.
///
/// `store` must already hold the pretrained SR and detector weights.
/// `NoIntegration` zeroes and freezes the adapters, which leaves a plain
/// detector on the SR output.
pub fn finetune_e2e<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &ExperimentConfig,
    variant: FinetuneVariant,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    run_stage(Stage::Finetune(variant), cfg, store, data, opts, &mut |store, s| {
        let (grads, parts) = finetune_grads(model, store, s, variant, cfg)?;
        Ok((grads.params, parts))
    })
}
