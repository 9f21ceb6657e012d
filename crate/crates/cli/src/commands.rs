use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma};
use serde::{Deserialize, Serialize};
use tpnet::backbone::import_pretrained;
use tpnet::data::synth::write_pattern_sources;
use tpnet::data::{
    load_manifest, load_rgb, split_manifest, synthesize_dataset, DegradationKind, Manifest, Split, SynthGrid,
};
use tpnet::metrics::{evaluate_by, psnr, ssim, MetricsReport, Psnr, ScoredPair};
use tpnet::model::extract_attention;
use tpnet::trainer::{load_checkpoint, load_samples, prepare_eval_image, Checkpoint, TrainState, Trainer};
use tpnet::{Error, ErrorClass, Result, TpNet};

use crate::config::{write_snapshot, RunConfig};

pub const SCORES_FILE: &str = "scores.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SPLITS_FILE: &str = "splits.csv";
pub const TEST_SCORES_FILE: &str = "test_scores.csv";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const BASELINE_SUMMARY_FILE: &str = "baseline_summary.json";
pub const ATTENTION_RANGES_FILE: &str = "attention_ranges.json";

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Prefix an error with `what` without changing its class.
pub fn context(what: impl std::fmt::Display, e: Error) -> Error {
    let msg = format!("{what}: {e}");
    match e.class() {
        ErrorClass::Config => Error::Config(msg),
        ErrorClass::Numeric => Error::Numeric(msg),
        ErrorClass::Data => Error::Data(msg),
        ErrorClass::Io => e,
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run_config_of(ck: &Checkpoint) -> RunConfig {
    RunConfig {
        model: ck.header.model.clone(),
        backbone: ck.header.backbone.clone(),
        train: ck.header.train.clone(),
        seed: Some(ck.header.seed),
        ..Default::default()
    }
}

fn score_one(net: &TpNet<f32>, path: &Path) -> Result<f64> {
    let img = load_rgb(path).map_err(|e| context(path.display(), e))?;
    let x = prepare_eval_image(&img, net).map_err(|e| context(path.display(), e))?;
    let s = net.score(&x).map_err(|e| context(path.display(), e))?;
    Ok(s[0] as f64)
}

fn write_scores(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "predicted"])?;
    for (id, v) in rows {
        w.write_record([id.as_str(), &format!("{v:?}")])?;
    }
    w.flush()?;
    Ok(())
}

fn report(m: &Manifest, predicted: &HashMap<String, f64>) -> Result<MetricsReport> {
    let mut methods = HashMap::new();
    let pairs: Vec<ScoredPair> = m
        .records
        .iter()
        .filter_map(|r| {
            if let Some(t) = &r.method_tag {
                methods.insert(r.id.clone(), t.clone());
            }
            predicted.get(&r.id).map(|&p| ScoredPair {
                id: r.id.clone(),
                predicted: p,
                mos: r.mos,
            })
        })
        .collect();
    evaluate_by(&pairs, |p| methods.get(&p.id).cloned())
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config)?.resolve(args.seed, args.out, args.manifest)?;
    let out = cfg.out_dir()?.to_path_buf();
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest (pass --manifest or set data.manifest)".into()))?;
    let mut inputs = BTreeMap::from([("manifest".to_string(), manifest_path.display().to_string())]);
    if let Some(c) = args.checkpoint {
        inputs.insert("resume".into(), c.display().to_string());
    }
    let hash = write_snapshot(&out, "train", &cfg, &inputs)?;
    log::info!("config hash {hash}");

    let manifest = load_manifest(&manifest_path)?;
    let manifest = match manifest.splits {
        Some(_) => manifest,
        None => split_manifest(
            &manifest,
            cfg.data.split_seed.unwrap_or(cfg.seed()),
            cfg.data.group_aware,
        )?,
    };
    let mut w = csv::Writer::from_path(out.join(SPLITS_FILE))?;
    w.write_record(["id", "split"])?;
    for (i, r) in manifest.records.iter().enumerate() {
        let split = manifest.split_of(i).expect("manifest is split");
        w.write_record([r.id.clone(), split.to_string()])?;
    }
    w.flush()?;
    let (train, val) = (manifest.subset(Split::Train)?, manifest.subset(Split::Val)?);
    log::info!("{} training and {} validation images", train.len(), val.len());

    let (net, state) = match args.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (ck.network(&cfg.model, &cfg.backbone)?, ck.train_state(&cfg.train)?)
        }
        None => {
            let mut net = TpNet::init(cfg.model.clone(), cfg.backbone.clone(), cfg.seed())?;
            match (&cfg.backbone_weights, cfg.model.use_perceptual) {
                (Some(path), true) => {
                    for (name, p) in import_pretrained(path, &cfg.backbone)?.iter() {
                        net.params.set(name, p.tensor.as_ref().clone(), p.role);
                    }
                }
                (None, true) => log::warn!("no backbone weights given; the backbone keeps its random initialization"),
                _ => {}
            }
            (net, TrainState::new(&cfg.train))
        }
    };
    let mut trainer = Trainer::new(
        net,
        cfg.train.clone(),
        state,
        load_samples(&train)?,
        load_samples(&val)?,
    )?;
    let outcome = trainer.fit(Some(&out))?;
    log::info!(
        "best epoch {:?}, validation plcc {:?}",
        outcome.best_epoch,
        outcome.best_val_plcc
    );

    if let Ok(test) = manifest.subset(Split::Test) {
        let best = TpNet::new(cfg.model.clone(), cfg.backbone.clone(), outcome.best)?;
        let rows = test
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), score_one(&best, &r.image_path)?)))
            .collect::<Result<Vec<_>>>()?;
        write_scores(&out.join(TEST_SCORES_FILE), &rows)?;
        match report(&test, &rows.into_iter().collect()) {
            Ok(r) => {
                log::info!("test plcc {:.4} srcc {:.4} (n = {})", r.plcc, r.srcc, r.n);
                write_json(&out.join(TEST_METRICS_FILE), &r)?;
            }
            Err(e) => log::warn!("test correlation undefined: {e}"),
        }
    }
    Ok(())
}

pub fn score(checkpoint: &Path, manifest: Option<&Path>, images: &[PathBuf], out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.stored_network()?;
    let mut cfg = run_config_of(&ck);
    cfg.data.manifest = manifest.map(Path::to_path_buf);
    let mut inputs = BTreeMap::from([("checkpoint".to_string(), checkpoint.display().to_string())]);
    let targets: Vec<(String, PathBuf)> = match manifest {
        Some(m) => load_manifest(m)?
            .records
            .into_iter()
            .map(|r| (r.id, r.image_path))
            .collect(),
        None if !images.is_empty() => images.iter().map(|p| (p.display().to_string(), p.clone())).collect(),
        None => {
            return Err(Error::Config(
                "nothing to score (pass --manifest or image paths)".into(),
            ))
        }
    };
    inputs.insert("images".into(), targets.len().to_string());
    write_snapshot(out, "score", &cfg, &inputs)?;
    let rows = targets
        .iter()
        .map(|(id, path)| Ok((id.clone(), score_one(&net, path)?)))
        .collect::<Result<Vec<_>>>()?;
    write_scores(&out.join(SCORES_FILE), &rows)?;
    log::info!("scored {} images", rows.len());
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    id: String,
    predicted: f64,
}

pub fn eval(scores: &Path, manifest: &Path, out: &Path) -> Result<MetricsReport> {
    let m = load_manifest(manifest)?;
    let mut reader = csv::Reader::from_path(scores).map_err(|e| context(scores.display(), e.into()))?;
    let mut predicted = HashMap::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::Row {
            row: i + 1,
            message: format!("{}: {e}", scores.display()),
        })?;
        if predicted.insert(row.id.clone(), row.predicted).is_some() {
            return Err(Error::Data(format!(
                "duplicate id {:?} in {}",
                row.id,
                scores.display()
            )));
        }
    }
    let known: std::collections::HashSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    let mut unmatched: Vec<&str> = predicted
        .keys()
        .map(String::as_str)
        .filter(|id| !known.contains(id))
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::Data(format!(
            "{} scored id(s) not in the manifest: {}",
            unmatched.len(),
            unmatched.join(", ")
        )));
    }
    let unscored = m.records.iter().filter(|r| !predicted.contains_key(&r.id)).count();
    if unscored > 0 {
        log::warn!("{unscored} manifest record(s) have no score and are left out");
    }
    let report = report(&m, &predicted)?;
    let cfg = RunConfig {
        data: crate::config::DataConfig {
            manifest: Some(manifest.to_path_buf()),
            ..Default::default()
        },
        ..Default::default()
    };
    let inputs = BTreeMap::from([("scores".to_string(), scores.display().to_string())]);
    write_snapshot(out, "eval", &cfg, &inputs)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    log::info!("plcc {:.4} srcc {:.4} (n = {})", report.plcc, report.srcc, report.n);
    Ok(report)
}

pub fn attention(checkpoint: &Path, image: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.stored_network()?;
    let img = load_rgb(image).map_err(|e| context(image.display(), e))?;
    let x = prepare_eval_image(&img, &net).map_err(|e| context(image.display(), e))?;
    let maps = extract_attention(&x, &net.params, &net.model, &net.backbone)?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), checkpoint.display().to_string()),
        ("image".to_string(), image.display().to_string()),
    ]);
    write_snapshot(out, "attention", &run_config_of(&ck), &inputs)?;
    let (_, _, h, w) = x.nchw()?;
    let mut written = Vec::new();
    for (stage, map) in &maps.maps {
        let (_, _, mh, mw) = map.nchw()?;
        let small = GrayImage::from_fn(mw as u32, mh as u32, |x, y| {
            let v = map.data()[y as usize * mw + x as usize];
            Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let full = imageops::resize(&small, w as u32, h as u32, imageops::FilterType::Nearest);
        let path = out.join(format!("attention_stage{stage}.png"));
        full.save(&path)?;
        written.push(path);
    }
    let ranges: BTreeMap<String, [f32; 2]> = maps
        .ranges
        .iter()
        .map(|(s, &(lo, hi))| (format!("stage{s}"), [lo, hi]))
        .collect();
    write_json(&out.join(ATTENTION_RANGES_FILE), &ranges)?;
    log::info!("wrote {} attention maps", written.len());
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct BaselineSummary {
    pub pairs: usize,
    pub errors: usize,
    pub identical: usize,
    /// Mean over pairs with a finite PSNR.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn baseline(reference: &Path, test: &Path, out: &Path) -> Result<BaselineSummary> {
    let refs = image_files(reference)?;
    let tests = image_files(test)?;
    let ref_names: Vec<String> = refs.iter().map(|p| file_name(p)).collect();
    let test_names: Vec<String> = tests.iter().map(|p| file_name(p)).collect();
    let mut unpaired: Vec<String> = ref_names
        .iter()
        .filter(|n| !test_names.contains(n))
        .map(|n| format!("{n} (reference only)"))
        .collect();
    unpaired.extend(
        test_names
            .iter()
            .filter(|n| !ref_names.contains(n))
            .map(|n| format!("{n} (test only)")),
    );
    if !unpaired.is_empty() {
        return Err(Error::Data(format!("unpaired files: {}", unpaired.join(", "))));
    }
    if refs.is_empty() {
        return Err(Error::Data(format!("no images in {}", reference.display())));
    }
    let inputs = BTreeMap::from([
        ("reference".to_string(), reference.display().to_string()),
        ("test".to_string(), test.display().to_string()),
    ]);
    write_snapshot(out, "baseline", &RunConfig::default(), &inputs)?;

    let mut w = csv::Writer::from_path(out.join(BASELINE_FILE))?;
    w.write_record(["file", "psnr", "ssim", "error"])?;
    let (mut psnrs, mut ssims, mut errors, mut identical) = (Vec::new(), Vec::new(), 0, 0);
    for (name, (r, t)) in ref_names.iter().zip(refs.iter().zip(&tests)) {
        let pair = load_rgb(r)
            .and_then(|a| load_rgb(t).map(|b| (a, b)))
            .and_then(|(a, b)| {
                let p = psnr(&a, &b, 255.0)?;
                Ok((p, ssim(&a, &b)?))
            });
        match pair {
            Ok((p, s)) => {
                match p {
                    Psnr::Finite(db) => psnrs.push(db),
                    Psnr::Infinite => identical += 1,
                }
                ssims.push(s);
                w.write_record([name.clone(), p.to_string(), format!("{s:?}"), String::new()])?;
            }
            Err(e) => {
                errors += 1;
                log::warn!("{name}: {e}");
                w.write_record([name.clone(), String::new(), String::new(), e.to_string()])?;
            }
        }
    }
    w.flush()?;
    let summary = BaselineSummary {
        pairs: refs.len(),
        errors,
        identical,
        mean_psnr: mean(&psnrs),
        mean_ssim: mean(&ssims),
    };
    write_json(&out.join(BASELINE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Degradation grid as written by users; kinds are parsed by name.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    kinds: Vec<String>,
    severities: Vec<f64>,
}

pub fn load_grid(path: &Path) -> Result<SynthGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let raw: GridFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let grid = SynthGrid {
        kinds: raw
            .kinds
            .iter()
            .map(|k| k.parse::<DegradationKind>())
            .collect::<Result<_>>()?,
        severities: raw.severities,
    };
    grid.validate()?;
    Ok(grid)
}

pub enum Sources<'a> {
    Dir(&'a Path),
    Patterns { count: usize, size: u32 },
}

pub fn synth(sources: Sources, grid_path: &Path, seed: u64, out: &Path) -> Result<Manifest> {
    let grid = load_grid(grid_path)?;
    let mut inputs = BTreeMap::from([("grid".to_string(), serde_json::to_string(&grid)?)]);
    let files = match sources {
        Sources::Dir(dir) => {
            inputs.insert("sources".into(), dir.display().to_string());
            let files = image_files(dir)?;
            if files.is_empty() {
                return Err(Error::Data(format!("no source images in {}", dir.display())));
            }
            files
        }
        Sources::Patterns { count, size } => {
            inputs.insert("patterns".into(), format!("{count} x {size}px"));
            write_pattern_sources(&out.join("sources"), count, size, seed)?
        }
    };
    let cfg = RunConfig {
        seed: Some(seed),
        ..Default::default()
    };
    write_snapshot(out, "synth", &cfg, &inputs)?;
    let m = synthesize_dataset(&files, &grid, seed, out)?;
    log::info!("wrote {} degraded images to {}", m.len(), out.display());
    Ok(m)
}
