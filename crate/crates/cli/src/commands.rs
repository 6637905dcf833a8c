use std::fs;
use std::path::{Path, PathBuf};

use rcdet::checkpoint::{load_checkpoint, load_checkpoint_for};
use rcdet::config::RunConfig;
use rcdet::data::{
    format_detections, list_images, load_dataset, load_image, read_split, save_overlay,
    split_dataset, synth_generate, AnnotatedImage, DatasetSplit, SynthConfig, SPLIT_FILE,
};
use rcdet::detector::{count_params_flops, measure_fps, Model, ModelConfig, Variant, CLASS_NAMES};
use rcdet::metrics::report::{evaluate, EvalReport};
use rcdet::params::ParamStore;
use rcdet::training::{detect_samples, train as run_training, VAL_CONF, VAL_NMS_IOU};
use rcdet::{Error, Result};
use serde::Serialize;

use crate::manifest::Run;
use crate::{AblateArgs, BenchArgs, DetectArgs, EvalArgs, GenArgs, TrainArgs, TrainOpts};

pub const SEED_ENV: &str = "RCDET_SEED";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const CONFIG_TXT: &str = "config.txt";
pub const BENCH_JSON: &str = "bench.json";
pub const DETECTIONS_DIR: &str = "detections";
pub const OVERLAYS_DIR: &str = "overlays";
const EVAL_BATCH: usize = 16;

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Argument(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn config_sets_seed(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split('#').next().and_then(|l| l.split_once('=')))
        .any(|(k, _)| k.trim() == "seed"))
}

/// Config file (or the desk preset) with command-line overrides applied.
fn resolve_config(opts: &TrainOpts, variant: Option<Variant>) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = variant {
        cfg.model = cfg.model.with_variant(v);
    }
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    let file_seed = match &opts.config {
        Some(p) => config_sets_seed(p)?,
        None => false,
    };
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    } else if !file_seed {
        if let Some(s) = env_seed()? {
            cfg.train.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Samples in file order and the split from `split.txt`, or a seeded 7:2:1 split.
fn load_split(
    data: &Path,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<AnnotatedImage>, DatasetSplit)> {
    let ds = load_dataset(data, num_classes)?;
    if ds.samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images under {}",
            data.display()
        )));
    }
    let split_path = data.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let stems: Vec<String> = ds.samples.iter().map(|s| s.source_id.clone()).collect();
        read_split(&split_path, &stems)?
    } else {
        split_dataset(ds.samples.len(), seed)?
    };
    Ok((ds.samples, split))
}

fn pick(samples: &[AnnotatedImage], idx: &[usize]) -> Vec<AnnotatedImage> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            CLASS_NAMES
                .get(i)
                .map_or_else(|| format!("class_{i}"), |s| s.to_string())
        })
        .collect()
}

fn evaluate_store(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[AnnotatedImage],
    conf: f64,
    iou: f64,
) -> Result<EvalReport> {
    let dets = detect_samples(model, store, samples, VAL_CONF, VAL_NMS_IOU, EVAL_BATCH)?;
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    let names = class_names(model.cfg.num_classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    evaluate(&dets, &gts, &names, conf, iou)
}

pub fn gen(a: &GenArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("gen", argv);
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let cfg = SynthConfig {
        n: a.n,
        seed,
        size: a.size,
        max_objects: a.max_objects,
    };
    let files = synth_generate(&cfg, &a.out)?;
    println!("wrote {} images to {}", a.n, a.out.display());
    let config =
        serde_json::json!({ "n": a.n, "seed": seed, "size": a.size, "max_objects": a.max_objects });
    run.finish(&a.out, config, Some(seed), files)?;
    Ok(())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("train", argv);
    let cfg = resolve_config(&a.opts, a.variant)?;
    let (samples, split) = load_split(&a.opts.data, cfg.model.num_classes, cfg.train.seed)?;
    let out = &a.opts.out;
    mkdir(out)?;
    let cfg_path = out.join(CONFIG_TXT);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let (model, store) = Model::new::<f32>(&cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} on {} images ({} val) for {} epochs",
        cfg.model.variant(),
        split.train.len(),
        split.val.len(),
        cfg.train.epochs
    );
    let outcome = run_training(
        &model,
        store,
        &pick(&samples, &split.train),
        &pick(&samples, &split.val),
        &cfg.train,
        Some(out),
    )?;
    let best = &outcome.log.rows[outcome.best_epoch - 1];
    println!(
        "best epoch {} val mAP@50 {:.4} mAP@50-95 {:.4}",
        best.epoch, best.val_map50, best.val_map5095
    );
    let mut files = outcome.files;
    files.push(cfg_path);
    run.finish(out, to_json(&cfg), Some(cfg.train.seed), files)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("eval", argv);
    let (model, store) = match &a.config {
        Some(p) => load_checkpoint_for(&a.ckpt, &RunConfig::from_file(p)?.model)?,
        None => load_checkpoint(&a.ckpt)?,
    };
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let (samples, split) = load_split(&a.data, model.cfg.num_classes, seed)?;
    let idx: Vec<usize> = match a.split.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        "all" => (0..samples.len()).collect(),
        s => {
            return Err(Error::Argument(format!(
                "unknown split '{s}' (expected train, val, test or all)"
            )))
        }
    };
    if idx.is_empty() {
        return Err(Error::Dataset(format!("the {} split is empty", a.split)));
    }
    let report = evaluate_store(&model, &store, &pick(&samples, &idx), a.conf, a.iou)?;
    mkdir(&a.out)?;
    let files = report.write_all(&a.out)?;
    println!(
        "{} images: P {:.4} R {:.4} mAP@50 {:.4} mAP@50-95 {:.4}",
        report.images, report.precision, report.recall, report.map50, report.map50_95
    );
    let config =
        serde_json::json!({ "model": model.cfg, "split": a.split, "conf": a.conf, "iou": a.iou });
    run.finish(&a.out, config, Some(seed), files)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    precision: f64,
    recall: f64,
    map50: f64,
    map50_95: f64,
    params: usize,
    gflops: f64,
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("ablate", argv);
    let cfg = resolve_config(&a.opts, None)?;
    let (samples, split) = load_split(&a.opts.data, cfg.model.num_classes, cfg.train.seed)?;
    let (train_set, val_set) = (pick(&samples, &split.train), pick(&samples, &split.val));
    let held_out = if split.test.is_empty() {
        val_set.clone()
    } else {
        pick(&samples, &split.test)
    };
    let out = &a.opts.out;
    mkdir(out)?;
    let csv_path = out.join(ABLATION_CSV);
    let mut rows = Vec::new();
    let mut files = vec![csv_path.clone()];
    let mut failures = Vec::new();
    for v in Variant::ALL {
        let dir = out.join(v.name());
        let mut vcfg = cfg.clone();
        vcfg.model = vcfg.model.with_variant(v);
        let result = (|| -> Result<(AblationRow, Vec<PathBuf>)> {
            mkdir(&dir)?;
            let cfg_path = dir.join(CONFIG_TXT);
            fs::write(&cfg_path, vcfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            let (model, store) = Model::new::<f32>(&vcfg.model, vcfg.train.seed)?;
            let (params, gflops) = count_params_flops(&model, &store, vcfg.model.input_size)?;
            log::info!("ablation: training {v} ({params} params)");
            let outcome =
                run_training(&model, store, &train_set, &val_set, &vcfg.train, Some(&dir))?;
            let report = evaluate_store(&model, &outcome.best_store, &held_out, 0.25, 0.5)?;
            let mut written = report.write_all(&dir)?;
            written.extend(outcome.files);
            written.push(cfg_path);
            let row = AblationRow {
                variant: v.name().to_string(),
                precision: report.precision,
                recall: report.recall,
                map50: report.map50,
                map50_95: report.map50_95,
                params,
                gflops,
            };
            Ok((row, written))
        })();
        match result {
            Ok((row, written)) => {
                println!(
                    "{:<5} P {:.4} R {:.4} mAP@50 {:.4} mAP@50-95 {:.4} params {} GFLOPs {:.4}",
                    row.variant,
                    row.precision,
                    row.recall,
                    row.map50,
                    row.map50_95,
                    row.params,
                    row.gflops
                );
                rows.push(row);
                files.extend(written);
            }
            Err(e) => {
                log::error!("variant {v} failed: {e}");
                failures.push(format!("{v}: {e}"));
            }
        }
        write_ablation(&csv_path, &rows)?;
    }
    run.finish(out, to_json(&cfg), Some(cfg.train.seed), files)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{} of 4 variants failed: {}",
            failures.len(),
            failures.join("; ")
        )))
    }
}

#[derive(Debug, Serialize)]
struct BenchResult {
    variant: String,
    input_size: usize,
    params: usize,
    gflops: f64,
    fps: f64,
}

pub fn bench(a: &BenchArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("bench", argv);
    let (model, store) = match &a.ckpt {
        Some(p) => load_checkpoint(p)?,
        None => Model::new::<f32>(
            &ModelConfig::for_variant(a.variant.unwrap_or(Variant::Cr)),
            0,
        )?,
    };
    let size = a.input_size.unwrap_or(model.cfg.input_size);
    let mut cfg = model.cfg.clone();
    cfg.input_size = size;
    cfg.validate().map_err(|e| Error::Argument(e.to_string()))?;
    let (params, gflops) = count_params_flops(&model, &store, size)?;
    let fps = measure_fps(&model, &store, size, a.warmup, a.iters)?;
    let res = BenchResult {
        variant: model.cfg.variant().to_string(),
        input_size: size,
        params,
        gflops,
        fps,
    };
    println!(
        "{} @{}: params {} GFLOPs {:.4} FPS {:.1}",
        res.variant, size, params, gflops, fps
    );
    if let Some(out) = &a.out {
        mkdir(out)?;
        let path = out.join(BENCH_JSON);
        fs::write(&path, serde_json::to_string_pretty(&res)?).map_err(|e| Error::io(&path, e))?;
        run.finish(out, to_json(&model.cfg), None, vec![path])?;
    }
    Ok(())
}

pub fn detect(a: &DetectArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("detect", argv);
    if !(0.0..=1.0).contains(&a.conf) {
        return Err(Error::Argument(format!(
            "--conf must lie in [0, 1], got {}",
            a.conf
        )));
    }
    let (model, store) = load_checkpoint(&a.ckpt)?;
    let paths = list_images(&a.images)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found at {}",
            a.images.display()
        )));
    }
    let samples = paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>>>()?;
    let dets = detect_samples(&model, &store, &samples, a.conf, a.nms_iou, EVAL_BATCH)?;
    let det_dir = a.out.join(DETECTIONS_DIR);
    mkdir(&det_dir)?;
    if a.render {
        mkdir(&a.out.join(OVERLAYS_DIR))?;
    }
    let mut files = Vec::new();
    for (s, d) in samples.iter().zip(&dets) {
        let p = det_dir.join(format!("{}.txt", s.source_id));
        fs::write(&p, format_detections(d)).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        if a.render {
            let p = a
                .out
                .join(OVERLAYS_DIR)
                .join(format!("{}.png", s.source_id));
            save_overlay(&p, s, d)?;
            files.push(p);
        }
    }
    let total: usize = dets.iter().map(Vec::len).sum();
    println!("{total} detections in {} images", samples.len());
    let config = serde_json::json!({ "model": model.cfg, "conf": a.conf, "nms_iou": a.nms_iou });
    run.finish(&a.out, config, None, files)?;
    Ok(())
}
