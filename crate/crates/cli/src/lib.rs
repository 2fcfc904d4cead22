//! `srdet` command-line driver.
//!
//! Every command writes into a fresh run directory
//! `<root>/<YYYYmmdd-HHMMSS>-s<seed>` holding a `config.toml` snapshot,
//! where `<root>` is `--out`, else `$SRDET_OUT`, else `eval.out_dir`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use srdet::checkpoint::Checkpoint;
use srdet::config::{parse_config, ExperimentConfig};
use srdet::data::{load_voc_dataset, synth_dataset, synth_scenes, write_voc, Dataset, Split};
use srdet::detect::format_detections;
use srdet::eval::{evaluate_map, render_detections, run_ablation, sr_psnr};
use srdet::gradsuite::gradient_suite;
use srdet::imageio::{read_image, write_image};
use srdet::nn::{resize_to, ParamStore};
use srdet::train::{finetune_e2e, train_detector, train_sr, TrainOptions};
use srdet::{FinetuneVariant, Model, Variant};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SRDET_OUT";

#[derive(Debug, Parser)]
#[command(name = "srdet", version, about = "Super-resolution assisted ship detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` (and `eval.seeds` for `ablate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root for the run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Pipeline variant, e.g. `ShipSRDet` or `full_integration`.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Checkpoint to load; repeatable.
    #[arg(long = "checkpoint", global = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Overrides the epoch count of every training stage.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Worker threads; only 1 is supported.
    #[arg(long, global = true, default_value_t = 1)]
    pub device_threads: usize,
    /// Fixed run directory name instead of timestamp and seed.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset in VOC layout.
    GenData,
    /// Pretrain the SR network with the L1 loss.
    TrainSr,
    /// Fine-tune SR and detector jointly.
    Finetune {
        /// Pretrained detector; trained on HR images first when absent.
        #[arg(long)]
        det_checkpoint: Option<PathBuf>,
    },
    /// Score one variant on the evaluation split.
    Eval,
    /// Train and score all five variants.
    Ablate {
        /// Skip latency measurement.
        #[arg(long)]
        no_timing: bool,
    },
    /// Detect ships in one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
    },
    /// Finite-difference gradient checks.
    GradCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSr => "train-sr",
            Command::Finetune { .. } => "finetune",
            Command::Eval => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Infer { .. } => "infer",
            Command::GradCheck => "grad-check",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] srdet::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(srdet::Error::Io { path: path.to_path_buf(), source: e })
}

/// What a successful command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub run_dir: PathBuf,
    /// Files written directly by the command, relative to `run_dir`.
    pub outputs: Vec<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(&cli) {
        Ok(o) => {
            println!("{}", o.run_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs an already parsed command.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let c = &cli.common;
    if c.device_threads != 1 {
        log::warn!("--device-threads {} ignored; computation is single-threaded", c.device_threads);
    }
    let checkpoints = c.checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<srdet::Result<Vec<_>>>()?;
    let cfg = resolve_config(cli, &checkpoints)?;
    let run_dir = make_run_dir(c, &cfg)?;
    let snapshot = run_dir.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| io_err(&snapshot, e))?;
    log::info!("{} -> {}", cli.command.name(), run_dir.display());
    let outputs = match &cli.command {
        Command::GenData => gen_data(&cfg, &run_dir)?,
        Command::TrainSr => cmd_train_sr(&cfg, &run_dir)?,
        Command::Finetune { det_checkpoint } => cmd_finetune(cli, &cfg, &checkpoints, det_checkpoint.as_deref(), &run_dir)?,
        Command::Eval => cmd_eval(cli, &cfg, &checkpoints, &run_dir)?,
        Command::Ablate { no_timing } => cmd_ablate(&cfg, !no_timing, &run_dir)?,
        Command::Infer { image } => cmd_infer(cli, &cfg, &checkpoints, image, &run_dir)?,
        Command::GradCheck => cmd_grad_check(&cfg, &run_dir)?,
    };
    Ok(Outcome { run_dir, outputs })
}

/// Config precedence: `--config`, else the first checkpoint's snapshot for
/// commands that consume checkpoints, else defaults; then flag overrides.
fn resolve_config(cli: &Cli, checkpoints: &[Checkpoint]) -> Result<ExperimentConfig> {
    let c = &cli.common;
    let mut cfg = match (&c.config, checkpoints.first()) {
        (Some(p), _) => parse_config(p)?,
        (None, Some(ck)) if matches!(cli.command, Command::Eval | Command::Infer { .. }) => ck.manifest.config.clone(),
        _ => ExperimentConfig::default(),
    };
    if let Some(ck) = checkpoints.first() {
        if ck.manifest.config.model != cfg.model {
            log::warn!("using the model architecture stored in the checkpoint");
            cfg.model = ck.manifest.config.model.clone();
        }
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
        cfg.eval.seeds = vec![s];
    }
    if let Some(e) = c.epochs {
        for st in [&mut cfg.train.sr, &mut cfg.train.detector, &mut cfg.train.finetune] {
            st.epochs = e;
        }
    }
    if matches!(cli.command, Command::Finetune { .. }) {
        cfg.variant = finetune_variant(cli, &cfg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_run_dir(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let root = c
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.eval.out_dir));
    std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let base = match &c.run_name {
        Some(n) => n.clone(),
        None => format!("{}-s{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), cfg.train.seed),
    };
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset<f32>> {
    let d = &cfg.dataset;
    if d.root.is_empty() {
        return Ok(synth_dataset(&d.synth, split, d.alpha)?);
    }
    let (data, report) = load_voc_dataset(Path::new(&d.root), split, d.alpha, d.hr_size, &d.class_names)?;
    if !report.missing_annotations.is_empty() || report.unknown_class > 0 || report.dropped_boxes > 0 {
        log::warn!(
            "{} split: {} images without annotation, {} objects of unknown class, {} degenerate boxes dropped",
            split.as_str(),
            report.missing_annotations.len(),
            report.unknown_class,
            report.dropped_boxes
        );
    }
    Ok(data)
}

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    Ok(PathBuf::from(name))
}

fn rel(dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if !cfg.dataset.root.is_empty() {
        return Err(CliError::Failed("gen-data renders the synthetic dataset; leave dataset.root empty".into()));
    }
    let root = dir.join("data");
    let mut summary = String::from("split,images,boxes,unplaced\n");
    for split in [Split::Train, Split::Test] {
        let scenes = synth_scenes(&cfg.dataset.synth, split)?;
        write_voc(&root, &scenes, split)?;
        let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
        let unplaced: usize = scenes.iter().map(|s| s.unplaced).sum();
        writeln!(summary, "{},{},{boxes},{unplaced}", split.as_str(), scenes.len()).unwrap();
    }
    Ok(vec![PathBuf::from("data"), write(dir, "data_summary.csv", summary)?])
}

fn cmd_train_sr(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    let out = train_sr(&model, &mut store, &train, cfg, &TrainOptions { out_dir: Some(dir), ..TrainOptions::default() })?;
    let (sr, bic) = sr_psnr(&model, &store, &test)?;
    log::info!("test PSNR: SR {sr:.3} dB, bicubic {bic:.3} dB");
    let csv = format!("psnr_sr,psnr_bicubic,gain\n{sr},{bic},{}\n", sr - bic);
    let mut outputs = vec![write(dir, "sr_eval.csv", csv)?, PathBuf::from("sr_log.csv")];
    outputs.extend(out.checkpoint_path.map(|p| rel(dir, &p)));
    Ok(outputs)
}

/// Parameter prefix a checkpoint of `kind` contributes.
fn trained_prefix(kind: &str) -> Option<&'static str> {
    match kind {
        "sr" => Some("sr."),
        "detector" => Some("det."),
        k if k.starts_with("finetune") => Some(""),
        _ => None,
    }
}

fn load_into(store: &mut ParamStore<f32>, ck: &Checkpoint) -> Result<()> {
    let kind = ck.manifest.kind.as_str();
    let prefix = trained_prefix(kind).ok_or_else(|| CliError::Failed(format!("checkpoint kind `{kind}` cannot be loaded")))?;
    let n = ck.load_params(store, prefix)?;
    log::info!("loaded {n} arrays from {kind} checkpoint");
    Ok(())
}

fn cmd_finetune(
    cli: &Cli,
    cfg: &ExperimentConfig,
    checkpoints: &[Checkpoint],
    det_checkpoint: Option<&Path>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let variant = finetune_variant(cli, cfg)?;
    let sr = checkpoints.iter().find(|c| c.manifest.kind == "sr").ok_or_else(|| {
        CliError::Failed("finetune needs the pretrained SR weights: pass --checkpoint <sr.ckpt> from `srdet train-sr`".into())
    })?;
    let train = load_split(cfg, Split::Train)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    sr.load_params(&mut store, "sr.")?;
    let opts = TrainOptions { out_dir: Some(dir), ..TrainOptions::default() };
    let mut outputs = Vec::new();
    match det_checkpoint {
        Some(p) => {
            let det = Checkpoint::load(p)?;
            if det.manifest.kind != "detector" {
                return Err(CliError::Failed(format!("{}: expected a detector checkpoint, found `{}`", p.display(), det.manifest.kind)));
            }
            det.load_params(&mut store, "det.")?;
        }
        None => {
            log::info!("no --det-checkpoint; training the detector on HR images first");
            let out = train_detector(&model, &mut store, &train, cfg, &opts)?;
            outputs.push(PathBuf::from("detector_log.csv"));
            outputs.extend(out.checkpoint_path.map(|p| rel(dir, &p)));
        }
    }
    let out = finetune_e2e(&model, &mut store, &train, cfg, variant, &opts)?;
    outputs.push(PathBuf::from(format!("finetune_{}_log.csv", variant.as_str())));
    outputs.extend(out.checkpoint_path.map(|p| rel(dir, &p)));
    let test = load_split(cfg, cfg.dataset.split)?;
    let v = variant.evaluated_as();
    let (res, _) = evaluate_map(&model, &store, v, &test, cfg.eval.iou_threshold, cfg.eval.eleven_point)?;
    log::info!("{v}: mAP {:.4}", res.map);
    outputs.push(write(dir, "eval.csv", res.to_csv())?);
    Ok(outputs)
}

/// Which checkpoint kinds a variant needs, as alternatives.
fn required_kinds(v: Variant) -> &'static [&'static [&'static str]] {
    match v {
        Variant::HrSsd | Variant::BicubicSsd => &[&["detector"]],
        Variant::SrnetSsd => &[&["sr", "detector"]],
        Variant::SrnetSsdFt => &[&["finetune_no_integration"]],
        Variant::ShipSrDet => &[&["finetune_full_integration"]],
    }
}

fn hint(kind: &str) -> &'static str {
    match kind {
        "sr" => "srdet train-sr",
        "detector" => "srdet finetune (it writes detector.ckpt)",
        "finetune_no_integration" => "srdet finetune --variant no_integration",
        _ => "srdet finetune --variant full_integration",
    }
}

fn variant_weights(variant: Variant, cfg: &ExperimentConfig, checkpoints: &[Checkpoint]) -> Result<(Model, ParamStore<f32>)> {
    if checkpoints.is_empty() {
        return Err(CliError::Failed(format!("variant {variant} needs trained weights: pass --checkpoint")));
    }
    let kinds: Vec<&str> = checkpoints.iter().map(|c| c.manifest.kind.as_str()).collect();
    let needed = required_kinds(variant)[0];
    if let Some(missing) = needed.iter().find(|k| !kinds.contains(k)) {
        return Err(CliError::Failed(format!(
            "variant {variant} needs a `{missing}` checkpoint (from `{}`); loaded: {}",
            hint(missing),
            kinds.join(", ")
        )));
    }
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    for ck in checkpoints.iter().filter(|c| needed.contains(&c.manifest.kind.as_str())) {
        load_into(&mut store, ck)?;
    }
    Ok((model, store))
}

fn eval_variant(cli: &Cli, cfg: &ExperimentConfig) -> Result<Variant> {
    match &cli.common.variant {
        Some(v) => match v.parse::<Variant>() {
            Ok(v) => Ok(v),
            Err(e) => Ok(v.parse::<FinetuneVariant>().map_err(|_| e)?.evaluated_as()),
        },
        None => Ok(cfg.variant.evaluated_as()),
    }
}

/// Accepts `no_integration`/`full_integration` or the evaluated variant's name.
fn finetune_variant(cli: &Cli, cfg: &ExperimentConfig) -> Result<FinetuneVariant> {
    let Some(v) = &cli.common.variant else { return Ok(cfg.variant) };
    if let Ok(f) = v.parse::<FinetuneVariant>() {
        return Ok(f);
    }
    match v.parse::<Variant>() {
        Ok(Variant::SrnetSsdFt) => Ok(FinetuneVariant::NoIntegration),
        Ok(Variant::ShipSrDet) => Ok(FinetuneVariant::FullIntegration),
        _ => Err(CliError::Usage(format!(
            "finetune --variant must be no_integration or full_integration (or (SRnet+SSD)_ft / ShipSRDet), got {v:?}"
        ))),
    }
}

fn cmd_eval(cli: &Cli, cfg: &ExperimentConfig, checkpoints: &[Checkpoint], dir: &Path) -> Result<Vec<PathBuf>> {
    let variant = eval_variant(cli, cfg)?;
    let (model, store) = variant_weights(variant, cfg, checkpoints)?;
    let data = load_split(cfg, cfg.dataset.split)?;
    let (res, dets) = evaluate_map(&model, &store, variant, &data, cfg.eval.iou_threshold, cfg.eval.eleven_point)?;
    println!("{variant}: mAP {:.4} over {} images", res.map, res.num_images);
    let mut txt = String::new();
    for (s, d) in data.samples.iter().zip(&dets) {
        txt.push_str(&format_detections(&s.id, d));
    }
    Ok(vec![write(dir, "eval.csv", res.to_csv())?, write(dir, "detections.txt", txt)?])
}

fn cmd_ablate(cfg: &ExperimentConfig, time_it: bool, dir: &Path) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, cfg.dataset.split)?;
    let report = run_ablation(cfg, &train, &test, Some(dir), time_it)?;
    println!("{}", report.table());
    if !report.hr_beats_bicubic() {
        log::warn!("mAP(HR+SSD) < mAP(Bicubic+SSD)");
    }
    Ok(["ablation.csv", "latency.csv", "ablation.txt"].map(PathBuf::from).to_vec())
}

/// `--image` is the low-resolution input, except for `HR+SSD` where it is
/// the HR frame and the LR input is its bicubic downsampling.
fn cmd_infer(cli: &Cli, cfg: &ExperimentConfig, checkpoints: &[Checkpoint], image: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let variant = eval_variant(cli, cfg)?;
    let (model, store) = variant_weights(variant, cfg, checkpoints)?;
    let input = read_image::<f32>(image)?;
    let (_, h, w) = input.chw()?;
    let a = cfg.model.alpha;
    let (lr, hr) = if variant == Variant::HrSsd {
        if h % a != 0 || w % a != 0 {
            return Err(CliError::Failed(format!("{}: HR image {w}x{h} is not divisible by alpha {a}", image.display())));
        }
        (resize_to(&input, (h / a, w / a))?, input)
    } else {
        (input.clone(), resize_to(&input, (h * a, w * a))?)
    };
    let dets = model.infer(&store, variant, &lr, Some(&hr))?;
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let mut outputs = vec![write(dir, "detections.txt", format_detections(&id, &dets))?];
    let canvas = match variant.input() {
        srdet::pipeline::InputMode::Sr { .. } => {
            let mut g = srdet::nn::Graph::new(&store);
            let l = g.input(lr.clone());
            let v = model.sr.forward(&mut g, l)?;
            let sr = g.value(v.sr_image).clone();
            write_image(&sr, &dir.join("sr.png"))?;
            outputs.push(PathBuf::from("sr.png"));
            sr
        }
        _ => hr,
    };
    render_detections(&canvas, &dets, &[], &dir.join("detections.png"))?;
    outputs.push(PathBuf::from("detections.png"));
    println!("{} detections", dets.len());
    Ok(outputs)
}

fn cmd_grad_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let results = gradient_suite(cfg.train.seed)?;
    let mut report = String::from("check,max_rel_error,tolerance,passed\n");
    let mut failed = Vec::new();
    for (name, r) in &results {
        writeln!(report, "{name},{:e},{:e},{}", r.max_rel_error, r.tolerance, r.passed).unwrap();
        if !r.passed {
            failed.push(name.as_str());
        }
    }
    let out = write(dir, "grad_check.csv", &report)?;
    print!("{report}");
    if failed.is_empty() {
        Ok(vec![out])
    } else {
        Err(CliError::Failed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}
