use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use muse_core::autodiff::{Precision, Real};
use muse_core::diagnostics::{LossKind, SubspaceTag};
use muse_core::encoder::{read_checkpoint, EncoderParams, Subspace};
use muse_core::eval::{evaluate, psnr_json, EvalConfig};
use muse_core::scenes::{generate_dataset, read_dataset, write_dataset, DatasetHeader, SceneConfig, SceneSample};
use muse_core::trainer::{conflict_probe, train_run, violin_rows, PreparedData, Preset, TrainConfig};
use muse_core::{MuseError, Result};
use serde_json::{json, Value};

use crate::manifest::{beside, config_hash, RunManifest};
use crate::{DiagnoseArgs, EvalArgs, GenDataArgs, TrainArgs};

const PRECISION_ENV: &str = "MUSE_PRECISION";

fn to_value<S: serde::Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("config serialises")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MuseError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))
}

fn env_precision() -> Result<Option<Precision>> {
    match std::env::var(PRECISION_ENV) {
        Ok(s) => s
            .parse()
            .map(Some)
            .map_err(|_| MuseError::Config(format!("{PRECISION_ENV} must be f32 or f64, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    s.parse().map_err(|_| MuseError::Config(format!("--precision must be f32 or f64, got '{s}'")))
}

fn load_data(path: &Path) -> Result<(SceneConfig, Vec<SceneSample>)> {
    let (header, samples) = read_dataset(path)?;
    Ok((header.scene_config(), samples))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let scene = SceneConfig {
        image_size: args.image_size,
        patch: args.patch,
        classes: args.classes,
        objects: args.objects,
    };
    scene.validate()?;
    let config = json!({
        "out": args.out,
        "count": args.count,
        "seed": args.seed,
        "scene": to_value(&scene),
    });
    let manifest_path = beside(&args.out);
    let mut manifest = RunManifest::start("gen-data", config, args.seed);
    manifest.write(&manifest_path)?;
    let samples = generate_dataset(args.count, args.seed, &scene)?;
    write_dataset(&args.out, &DatasetHeader::new(args.count, args.seed, &scene), &samples)?;
    info!("wrote {} scenes to {}", samples.len(), args.out.display());
    manifest.finish(&manifest_path, vec![args.out.clone()])
}

/// Defaults, then the environment precision, then the config file, then flags.
fn resolve_train_config(args: &TrainArgs, scene: &SceneConfig) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut merged = to_value(&config);
    let mut file_scene = None;
    let mut file_sets_precision = false;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| MuseError::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| MuseError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(fields) = &file else {
            return Err(MuseError::Config(format!("{}: expected a JSON object", path.display())));
        };
        file_sets_precision = fields.contains_key("precision");
        file_scene = file.pointer("/model/scene").cloned();
        merge(&mut merged, &file);
        config = serde_json::from_value(merged)
            .map_err(|e| MuseError::Config(format!("{}: {e}", path.display())))?;
    }
    if !file_sets_precision {
        if let Some(p) = env_precision()? {
            config.precision = p;
        }
    }
    if let Some(explicit) = file_scene {
        let explicit: SceneConfig =
            serde_json::from_value(explicit).map_err(|e| MuseError::Config(format!("model.scene: {e}")))?;
        if explicit != *scene {
            return Err(MuseError::Config(format!(
                "config scene {explicit:?} does not match the dataset scene {scene:?}"
            )));
        }
    }
    config.model.scene = *scene;
    if let Some(name) = &args.preset {
        config.preset = name.parse::<Preset>()?;
    }
    if let Some(steps) = &args.steps_per_stage {
        config.stage_steps = [steps[0], steps[1], steps[2]];
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(p) = &args.precision {
        config.precision = parse_precision(p)?;
    }
    if let Some(k) = args.probe_interval {
        config.probe_interval = k;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    let routing = config.effective_routing()?;
    config.routing = Some(routing);
    config.model.routing = routing;
    config.validate()?;
    Ok(config)
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (scene, samples) = load_data(&args.data)?;
    let config = resolve_train_config(args, &scene)?;
    create_dir(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::start("train", to_value(&config), config.seed);
    manifest.write(&manifest_path)?;
    info!("training preset {} with {:?} routing", config.preset, config.model.routing);
    match config.precision {
        Precision::F32 => drop(train_run::<f32>(&config, &samples, Some(&args.out))?),
        Precision::F64 => drop(train_run::<f64>(&config, &samples, Some(&args.out))?),
    }
    let mut outputs: Vec<PathBuf> = ["metrics.csv", "violin.csv", "ckpt_stage1.bin", "ckpt_stage2.bin", "ckpt_stage3.bin", "final.bin"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    outputs.retain(|p| p.exists());
    manifest.finish(&manifest_path, outputs)
}

fn read_checked<T: Real>(checkpoint: &Path, scene: &SceneConfig) -> Result<EncoderParams<T>> {
    let (header, params) = read_checkpoint::<T>(checkpoint)?;
    if header.config.scene != *scene {
        return Err(MuseError::Config(format!(
            "checkpoint {} was built for scene {:?}, dataset has {:?}",
            checkpoint.display(),
            header.config.scene,
            scene
        )));
    }
    Ok(params)
}

fn eval_with<T: Real>(args: &EvalArgs, scene: &SceneConfig, samples: &[SceneSample]) -> Result<Value> {
    let params = read_checked::<T>(&args.checkpoint, scene)?;
    let config = EvalConfig { seed: args.seed, ..EvalConfig::default() };
    let data = PreparedData::new(samples, scene, None, config.teacher_smoothing)?;
    let report = evaluate(&params, &data, &config)?;
    Ok(json!({
        "config_hash": config_hash(&to_value(&params.config)),
        "checkpoint": args.checkpoint,
        "seg_pair_acc": report.seg_pair_acc,
        "seg_iou": report.seg_iou,
        "probe_acc": report.probe_acc,
        "retrieval_top1": report.retrieval_top1,
        "psnr_db": psnr_json(report.psnr_db),
        "recon_mse": report.recon_mse,
        "topo_kl": report.topo_kl,
        "n": report.n,
    }))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (scene, samples) = load_data(&args.data)?;
    let manifest_path = beside(&args.out);
    let config = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "eval": to_value(&EvalConfig { seed: args.seed, ..EvalConfig::default() }),
    });
    let mut manifest = RunManifest::start("eval", config, args.seed);
    manifest.write(&manifest_path)?;
    let report = match env_precision()?.unwrap_or(Precision::F64) {
        Precision::F32 => eval_with::<f32>(args, &scene, &samples)?,
        Precision::F64 => eval_with::<f64>(args, &scene, &samples)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_file(&args.out, text.as_bytes())?;
    manifest.finish(&manifest_path, vec![args.out.clone()])
}

fn parse_pairs(list: &str) -> Result<Vec<(LossKind, LossKind)>> {
    let mut pairs = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((a, b)) = item.split_once(':') else {
            return Err(MuseError::Argument(format!("pair '{item}' must look like a:b")));
        };
        let (a, b) = (a.parse::<LossKind>()?, b.parse::<LossKind>()?);
        if a == b {
            return Err(MuseError::Argument(format!("pair '{item}' repeats a loss")));
        }
        pairs.push((a, b));
    }
    if pairs.is_empty() {
        return Err(MuseError::Argument("--pairs is empty".into()));
    }
    Ok(pairs)
}

const GRAD_REPORT_HEADER: &str = "step,loss_a,loss_b,subspace,layer,cosine,undefined";

fn diagnose_with<T: Real>(args: &DiagnoseArgs, scene: &SceneConfig, samples: &[SceneSample]) -> Result<(String, String)> {
    let pairs = parse_pairs(&args.pairs)?;
    let params = read_checked::<T>(&args.checkpoint, scene)?;
    let mut losses: Vec<LossKind> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    losses.sort();
    losses.dedup();
    let mut tags = vec![SubspaceTag::ALL];
    tags.extend(Subspace::ALL.into_iter().map(SubspaceTag::of));
    for layer in 0..params.config.layers {
        tags.push(SubspaceTag::of(Subspace::Topology).in_layer(layer));
        tags.push(SubspaceTag::of(Subspace::Semantic).in_layer(layer));
    }
    let data = PreparedData::new(samples, scene, None, 0.0)?;
    let mut csv = String::from(GRAD_REPORT_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    for step in 0..args.batches {
        let batch = data.batch::<T>(&data.sample_indices(args.seed, step, args.batch_size))?;
        let (report, _) = conflict_probe(&params, &batch, &losses, &tags, step, true)?;
        for &(a, b) in &pairs {
            for &tag in &tags {
                let cosine = report.cosine(a, b, tag).flatten();
                let subspace = tag.subspace.map_or("ALL", Subspace::as_str);
                let layer = tag.layer.map_or(String::new(), |l| l.to_string());
                let (value, undefined) = match cosine {
                    Some(c) => (format!("{c}"), 0),
                    None => (String::new(), 1),
                };
                csv.push_str(&format!("{step},{a},{b},{subspace},{layer},{value},{undefined}\n"));
            }
        }
        reports.push(report);
    }
    Ok((csv, violin_rows(&reports)))
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    if args.batch_size < 2 || args.batches == 0 {
        return Err(MuseError::Config("diagnose needs --batch-size >= 2 and --batches >= 1".into()));
    }
    parse_pairs(&args.pairs)?;
    let (scene, samples) = load_data(&args.data)?;
    create_dir(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let config = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "pairs": args.pairs,
        "batch_size": args.batch_size,
        "batches": args.batches,
    });
    let mut manifest = RunManifest::start("diagnose", config, args.seed);
    manifest.write(&manifest_path)?;
    let (grad_csv, violin) = match env_precision()?.unwrap_or(Precision::F64) {
        Precision::F32 => diagnose_with::<f32>(args, &scene, &samples)?,
        Precision::F64 => diagnose_with::<f64>(args, &scene, &samples)?,
    };
    let grad_path = args.out.join("grad_report.csv");
    let violin_path = args.out.join("violin.csv");
    write_file(&grad_path, grad_csv.as_bytes())?;
    write_file(&violin_path, violin.as_bytes())?;
    manifest.finish(&manifest_path, vec![grad_path, violin_path])
}
