//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion, exit 1 if any fails.
//!
//! `cargo test -p srdet-cli --test acceptance -- 3 8` runs a subset.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use srdet::data::{synth_dataset, Split};
use srdet::detect::DetectorConfig;
use srdet::eval::{run_ablation, sr_psnr};
use srdet::gradsuite::{gradient_suite, COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE};
use srdet::sr::{RdbConfig, SrNetConfig};
use srdet::train::{finetune_grads, train_sr, TrainOptions};
use srdet::{ExperimentConfig, FinetuneVariant, Model, ModelConfig, Tensor, Variant};

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const E2E_GRAD_BUDGET: Duration = Duration::from_secs(30);
const SR_MAX_STEPS: usize = 2000;
const SR_MIN_GAIN_DB: f64 = 0.5;
const SR_BUDGET: Duration = Duration::from_secs(30 * 60);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_BUDGET: Duration = Duration::from_secs(2 * 60 * 60);
/// Wall-clock outputs that a rerun cannot reproduce.
const TIMING_FILES: [&str; 2] = ["latency.csv", "ablation.txt"];

type Verdict = Result<String, String>;

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn gradient_suite_check() -> Verdict {
    let t = Instant::now();
    let reports = gradient_suite(0).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    let mut parts = Vec::new();
    let mut ok = took < GRAD_SUITE_BUDGET;
    for (name, r) in &reports {
        let limit = if name == "sr_forward" { COMPOSITE_TOLERANCE } else { PRIMITIVE_TOLERANCE };
        ok &= r.passed && r.tolerance <= limit && r.max_rel_error < limit;
        parts.push(format!("{name} {:.1e}", r.max_rel_error));
    }
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    ok &= names == ["conv2d", "pixel_shuffle", "l1_loss", "multibox_loss", "sr_forward"];
    let msg = format!("max rel. error {} in {}", parts.join(", "), secs(took));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn oracle_check() -> Verdict {
    let cfg = ExperimentConfig::desk();
    let mut model = cfg.model.clone();
    model.sr = SrNetConfig { num_blocks: 1, base_channels: 8, rdb: RdbConfig { num_layers: 2, growth: 4 } };
    let mut synth = cfg.dataset.synth.clone();
    synth.test_count = 20;
    let test = synth_dataset::<f32>(&synth, Split::Test, 4).map_err(|e| e.to_string())?;
    let models: Vec<_> = (0..3).map(|s| Model::build::<f32>(&model, s).unwrap()).collect();
    let n = oracles::MIN_TRIALS;
    let checks: [(&str, oracles::Check); 5] = [
        ("iou", oracles::check_iou(n, 11)),
        ("fast_nms", oracles::check_nms(n, 12)),
        ("match_priors", oracles::check_matching(n, 13)),
        ("average_precision", oracles::check_ap(n, 14)),
        ("evaluate_map", oracles::check_evaluate_map(n, 15, &models, &test)),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, r) in checks {
        match r {
            Ok(dev) => {
                ok &= dev <= oracles::ORACLE_TOLERANCE;
                parts.push(format!("{name} {dev:.0e}"));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let msg = format!("{n} trials each, max deviation {} (limit {:.0e})", parts.join(", "), oracles::ORACLE_TOLERANCE);
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn shape_check() -> Verdict {
    let cfg = ModelConfig::default();
    let (model, store) = Model::build::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
    let lr = Tensor::from_fn_chw(3, 128, 128, |c, y, x| ((c * 31 + y * 7 + x * 3) % 50) as f32 / 50.0);
    let trace = model.sr.run(&store, &lr).map_err(|e| e.to_string())?;
    let (f_lr_ssd, f_hr_ssd) = model.adapters.adapt_features(&store, &trace.f_lr_out, &trace.f_hr_out).map_err(|e| e.to_string())?;
    let got = [
        ("I_SR", trace.sr_image.shape().to_vec(), vec![3, 512, 512]),
        ("F_LR_out", trace.f_lr_out.shape().to_vec(), vec![64, 128, 128]),
        ("F_HR_out", trace.f_hr_out.shape().to_vec(), vec![64, 512, 512]),
        ("F_LR_SSD", f_lr_ssd.shape().to_vec(), vec![256, 128, 128]),
        ("F_HR_SSD", f_hr_ssd.shape().to_vec(), vec![64, 512, 512]),
    ];
    let wrong: Vec<String> = got.iter().filter(|(_, g, w)| g != w).map(|(n, g, w)| format!("{n} {g:?} != {w:?}")).collect();
    let maps = DetectorConfig::default().map_sizes((512, 512)).map_err(|e| e.to_string())?.len();
    if cfg.alpha == 4 && wrong.is_empty() && maps == 7 {
        Ok("(3,128,128) -> I_SR (3,512,512), F_LR_out (64,128,128), F_HR_out (64,512,512), F_LR_SSD (256,128,128), F_HR_SSD (64,512,512); 7 pyramid maps".into())
    } else {
        Err(format!("{} (maps {maps})", wrong.join("; ")))
    }
}

fn e2e_gradient_check() -> Verdict {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.model.sr = SrNetConfig { num_blocks: 1, base_channels: 8, rdb: RdbConfig { num_layers: 2, growth: 4 } };
    cfg.dataset.synth.train_count = 1;
    let data = synth_dataset::<f32>(&cfg.dataset.synth, Split::Train, 4).map_err(|e| e.to_string())?;
    let (model, store) = Model::build::<f32>(&cfg.model, 0).map_err(|e| e.to_string())?;
    let (grads, parts) =
        finetune_grads(&model, &store, &data.samples[0], FinetuneVariant::FullIntegration, &cfg).map_err(|e| e.to_string())?;
    let (w, _) = model.sr.head_params();
    let norm = grads.param(w).map(|g| g.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()).unwrap_or(0.0);
    let took = t.elapsed();
    let msg = format!("detection loss {:.4}, |dL/dW| of {} = {norm:.3e}, {}", parts.total, store.get(w).name, secs(took));
    if parts.total > 0.0 && norm > 0.0 && took < E2E_GRAD_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sr_benefit_check() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig::desk();
    let train = synth_dataset::<f32>(&cfg.dataset.synth, Split::Train, 4).map_err(|e| e.to_string())?;
    let test = synth_dataset::<f32>(&cfg.dataset.synth, Split::Test, 4).map_err(|e| e.to_string())?;
    if (train.len(), test.len()) != (200, 50) {
        return Err(format!("dataset sizes {} / {}", train.len(), test.len()));
    }
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed).map_err(|e| e.to_string())?;
    let out = train_sr(&model, &mut store, &train, &cfg, &TrainOptions { max_steps: Some(SR_MAX_STEPS), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let (sr, bic) = sr_psnr(&model, &store, &test).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    let gain = sr - bic;
    let msg = format!("{} steps: PSNR SR {sr:.3} dB vs bicubic {bic:.3} dB, gain {gain:+.3} dB (need {SR_MIN_GAIN_DB}), {}", out.steps, secs(took));
    if out.steps <= SR_MAX_STEPS && gain >= SR_MIN_GAIN_DB && took < SR_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Runs the 3-seed desk ablation once; criteria 6 and 7 both read it.
fn ablation() -> Result<(srdet::eval::AblationReport, Duration), String> {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.eval.seeds = ABLATION_SEEDS.to_vec();
    let train = synth_dataset::<f32>(&cfg.dataset.synth, Split::Train, 4).map_err(|e| e.to_string())?;
    let test = synth_dataset::<f32>(&cfg.dataset.synth, Split::Test, 4).map_err(|e| e.to_string())?;
    let report = run_ablation(&cfg, &train, &test, None, true).map_err(|e| e.to_string())?;
    Ok((report, t.elapsed()))
}

fn ablation_check(a: &Result<(srdet::eval::AblationReport, Duration), String>) -> Verdict {
    let (report, took) = a.as_ref().map_err(Clone::clone)?;
    let csv = report.csv();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|l| l.split(',').next().unwrap_or("")).collect();
    let expected: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    let maps: Vec<String> = report.rows.iter().map(|r| format!("{} {:.2}%", r.variant, 100.0 * r.map)).collect();
    let trend = if report.sr_trend_holds() { "holds" } else { "does not hold" };
    let msg = format!(
        "{} rows; seed-mean mAP {}; HR >= Bicubic hard check; SR trend (reported only) {trend}; {}",
        rows.len(),
        maps.join(", "),
        secs(*took)
    );
    if rows.len() == 5 && names == expected && report.hr_beats_bicubic() && *took < ABLATION_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn latency_check(a: &Result<(srdet::eval::AblationReport, Duration), String>) -> Verdict {
    let (report, _) = a.as_ref().map_err(Clone::clone)?;
    let ms = |v| report.row(v).avg_ms.unwrap_or(f64::NAN);
    let (ship, srnet, bic) = (ms(Variant::ShipSrDet), ms(Variant::SrnetSsd), ms(Variant::BicubicSsd));
    let msg = format!("interleaved mean ms/image: ShipSRDet {ship:.1} > SRnet+SSD {srnet:.1} > Bicubic+SSD {bic:.1}");
    if ship > srnet && srnet > bic {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every command of the CLI, chained as a user would, into `out/<tag>-<cmd>`.
fn cli_session(out: &Path, tag: &str) -> Result<(), String> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let out_s = out.to_str().unwrap();
    let run = |cmd: &str, args: &[&str]| -> Result<PathBuf, String> {
        let name = format!("{tag}-{cmd}");
        let mut v = vec!["srdet", cmd, "--out", out_s, "--run-name", &name];
        v.extend_from_slice(args);
        match srdet_cli::dispatch(v) {
            0 => Ok(out.join(&name)),
            c => Err(format!("{cmd} exited {c}")),
        }
    };
    let gd = run("gen-data", &["--config", cfg])?;
    let sr = run("train-sr", &["--config", cfg])?;
    let sr_ck = sr.join("sr.ckpt");
    let ft = run("finetune", &["--config", cfg, "--checkpoint", sr_ck.to_str().unwrap()])?;
    let ft_ck = ft.join("finetune_full_integration.ckpt");
    run("eval", &["--checkpoint", ft_ck.to_str().unwrap()])?;
    let img = gd.join("data/images/test_00001.png");
    run("infer", &["--checkpoint", ft_ck.to_str().unwrap(), "--image", img.to_str().unwrap()])?;
    run("ablate", &["--config", cfg])?;
    run("grad-check", &["--config", cfg])?;
    Ok(())
}

fn determinism_check() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_session(dir.path(), "a")?;
    cli_session(dir.path(), "b")?;
    let all = files_under(dir.path());
    let (mut same, mut differ, mut skipped) = (0, Vec::new(), 0);
    let (mut csv, mut ckpt) = (0, 0);
    for (path, bytes) in &all {
        let s = path.to_string_lossy();
        let Some(rest) = s.strip_prefix("a-") else { continue };
        let fname = path.file_name().unwrap().to_string_lossy();
        if TIMING_FILES.contains(&fname.as_ref()) {
            skipped += 1;
            continue;
        }
        match all.get(&PathBuf::from(format!("b-{rest}"))) {
            Some(other) if other == bytes => {
                same += 1;
                csv += usize::from(fname.ends_with(".csv"));
                ckpt += usize::from(fname.ends_with(".ckpt"));
            }
            _ => differ.push(rest.to_string()),
        }
    }
    let msg = format!(
        "7 commands run twice: {same} files identical ({csv} CSV, {ckpt} checkpoints), {} differ, {skipped} wall-clock timing files not compared",
        differ.len()
    );
    if differ.is_empty() && csv > 0 && ckpt > 0 {
        Ok(msg)
    } else {
        Err(format!("{msg}: {}", differ.join(", ")))
    }
}

fn main() {
    let _ = env_logger_free_quiet();
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut failed = 0;
    let mut report = |k: usize, title: &str, v: Verdict| {
        match v {
            Ok(m) => println!("[PASS] {k}. {title}: {m}"),
            Err(m) => {
                failed += 1;
                println!("[FAIL] {k}. {title}: {m}");
            }
        }
    };
    if on(1) {
        report(1, "gradient suite", gradient_suite_check());
    }
    if on(2) {
        report(2, "oracle equivalence", oracle_check());
    }
    if on(3) {
        report(3, "shape contract", shape_check());
    }
    if on(4) {
        report(4, "end-to-end gradient", e2e_gradient_check());
    }
    if on(5) {
        report(5, "SR benefit", sr_benefit_check());
    }
    if on(6) || on(7) {
        let a = ablation();
        if on(6) {
            report(6, "ablation harness", ablation_check(&a));
        }
        if on(7) {
            report(7, "latency ordering", latency_check(&a));
        }
    }
    if on(8) {
        report(8, "determinism", determinism_check());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Keeps the CLI's logger quiet unless `RUST_LOG` asks otherwise.
fn env_logger_free_quiet() -> Option<()> {
    if std::env::var_os("RUST_LOG").is_none() {
        std::env::set_var("RUST_LOG", "warn");
    }
    Some(())
}
