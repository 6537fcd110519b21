use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use tmf_core::classify::{train_logreg, train_mlp, LabeledVector, TrainConfig};
use tmf_core::dataset::{
    build_splits, export_features, materialize_frames, prepare_images, FeatureFormat, FeatureRow,
    FrameIndex, FramePlan, ImageCache, Manifest, ManifestEntry, Split, SplitSpec, CACHE_DIR_ENV,
};
use tmf_core::eval::{
    frame_length_sweep, patient_reports, patient_reports_csv, scored_frames_csv, sweep_csv,
    sweep_lengths, ti_tc_counts, FrameMetrics, MetricsReport, ScoredFrame, DEFAULT_THRESHOLD,
};
use tmf_core::extractor::{
    cnn_forward, gap, import_feature_map_expecting, BlockConfig, CnnConfig, CnnParams, FeatureVector,
};
use tmf_core::gradcam::{explain_frame, write_cam_csv, write_cam_image, CamTarget};
use tmf_core::model::{
    extract_features, meta_path, model_from_joint, read_checkpoint, train_end_to_end, write_checkpoint,
    Extractor, Head, LabeledImage,
};
use tmf_core::signal::{load_time_series, write_time_series, NormMode, SignalFormat};
use tmf_core::synth::{cohort, CohortSpec};
use tmf_core::tmf::{export_png, ScaleMode};
use tmf_core::{ClassLabel, Preprocess, TimeSeries, TmfError, TmfModel};

use crate::config::{pick, FileConfig};
use crate::record::RunRecord;
use crate::{
    Command, DataArgs, EncodeArgs, EvaluateArgs, ExplainArgs, ExportArgs, OutArgs, PreprocessArgs,
    SplitArgs, SweepArgs, SynthArgs, TrainArgs,
};

const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    TmfError::Config(msg.into()).into()
}

pub fn dispatch(command: Command, file: &FileConfig, threads: usize) -> anyhow::Result<()> {
    let name = match &command {
        Command::Synth(_) => "synth",
        Command::Split(_) => "split",
        Command::Encode(_) => "encode",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Explain(_) => "explain",
        Command::Sweep(_) => "sweep",
        Command::ExportFeatures(_) => "export-features",
    };
    let mut rec = RunRecord::new(name);
    rec.set("jobs", threads);
    let out = match &command {
        Command::Synth(a) => out_dir(&a.out, file)?,
        Command::Split(a) => out_dir(&a.out, file)?,
        Command::Encode(a) => out_dir(&a.out, file)?,
        Command::Train(a) => out_dir(&a.out, file)?,
        Command::Evaluate(a) => out_dir(&a.out, file)?,
        Command::Explain(a) => out_dir(&a.out, file)?,
        Command::Sweep(a) => out_dir(&a.out, file)?,
        Command::ExportFeatures(a) => out_dir(&a.out, file)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    rec.set("out", out.display());
    match command {
        Command::Synth(a) => synth(a, &out, &mut rec),
        Command::Split(a) => split(a, file, &out, &mut rec),
        Command::Encode(a) => encode(a, file, &out, &mut rec),
        Command::Train(a) => train(a, file, &out, &mut rec),
        Command::Evaluate(a) => evaluate(a, file, &out, &mut rec),
        Command::Explain(a) => explain(a, &out, &mut rec),
        Command::Sweep(a) => sweep(a, &out, &mut rec),
        Command::ExportFeatures(a) => export(a, file, &out, &mut rec),
    }?;
    rec.finish(&out)
}

fn out_dir(args: &OutArgs, file: &FileConfig) -> anyhow::Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| config_err("an output directory is required (--out)"))
}

fn manifest_path(flag: &Option<PathBuf>, file: &FileConfig) -> anyhow::Result<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| file.manifest.clone())
        .ok_or_else(|| config_err("a manifest is required (--manifest)"))?;
    if !p.exists() {
        return Err(TmfError::FileNotFound(p).into());
    }
    Ok(p)
}

fn parse_or_config<T: std::str::FromStr<Err = TmfError>>(what: &str, s: &str) -> anyhow::Result<T> {
    s.parse::<T>()
        .map_err(|e| config_err(format!("invalid {what} {s:?}: {e}")))
}

fn frame_plan(data: &DataArgs, file: &FileConfig, default_length: usize) -> anyhow::Result<FramePlan> {
    let d = FramePlan::default();
    let plan = FramePlan {
        length: pick(data.frame_length, file.frame_length, default_length),
        stride_af: pick(data.stride_af, file.stride_af, d.stride_af),
        stride_nonaf: pick(data.stride_nonaf, file.stride_nonaf, d.stride_nonaf),
    };
    plan.validate()?;
    Ok(plan)
}

fn preprocess(pre: &PreprocessArgs, file: &FileConfig, frame_len: usize) -> anyhow::Result<Preprocess> {
    let d = Preprocess::default();
    let norm = pick(pre.norm.clone(), file.norm.clone(), d.normalize.as_str().to_string());
    let scale = pick(pre.scale.clone(), file.scale.clone(), d.scale.as_str().to_string());
    let p = Preprocess {
        normalize: parse_or_config::<NormMode>("normalization", &norm)?,
        frame_len,
        rows: pick(pre.rows, file.rows, d.rows),
        cols: pick(pre.cols, file.cols, d.cols),
        scale: parse_or_config::<ScaleMode>("scale mode", &scale)?,
    };
    if (p.rows == 0) != (p.cols == 0) {
        return Err(config_err("--rows and --cols must both be zero or both positive"));
    }
    p.target_dims(frame_len)
        .map_err(|e| config_err(format!("frame length {frame_len}: {e}")))?;
    Ok(p)
}

/// Flag, then `TMF_CACHE_DIR`, then config file, then `<out>/cache`.
fn image_cache(data: &DataArgs, file: &FileConfig, out: &Path) -> Option<ImageCache> {
    if data.no_cache {
        return None;
    }
    if let Some(d) = &data.cache_dir {
        return Some(ImageCache::new(d));
    }
    let fallback = file.cache_dir.clone().unwrap_or_else(|| out.join("cache"));
    Some(ImageCache::from_env(fallback))
}

fn record_data(rec: &mut RunRecord, manifest: &Path, plan: &FramePlan, pre: &Preprocess, cache: Option<&ImageCache>) {
    rec.set("manifest", manifest.display());
    rec.set("frame_length", plan.length);
    rec.set("stride_af", plan.stride_af);
    rec.set("stride_nonaf", plan.stride_nonaf);
    rec.set("norm", pre.normalize.as_str());
    rec.set("rows", pre.rows);
    rec.set("cols", pre.cols);
    rec.set("scale", pre.scale.as_str());
    rec.set("cache_dir", cache.map_or("none".to_string(), |c| c.dir.display().to_string()));
    if std::env::var_os(CACHE_DIR_ENV).is_some() {
        rec.set("env.TMF_CACHE_DIR", std::env::var(CACHE_DIR_ENV).unwrap_or_default());
    }
}

fn synth(a: SynthArgs, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    if a.per_class == 0 || a.length < 3 {
        return Err(config_err("--per-class must be positive and --length at least 3"));
    }
    let spec = CohortSpec {
        per_class: a.per_class,
        len: a.length,
        jitter: a.jitter,
        seed: a.seed,
        ..CohortSpec::default()
    };
    rec.set("per_class", spec.per_class);
    rec.set("length", spec.len);
    rec.set("jitter", spec.jitter);
    rec.set("seed", spec.seed);
    let dir = out.join("signals");
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for ts in cohort(&spec) {
        let path = dir.join(format!("{}.csv", ts.recording_id));
        write_time_series(&path, &ts, SignalFormat::Csv)?;
        rec.artifact(path.clone());
        entries.push(ManifestEntry {
            recording_id: ts.recording_id.clone(),
            path: PathBuf::from("signals").join(format!("{}.csv", ts.recording_id)),
            label: ts.label,
            split: None,
        });
    }
    let path = out.join("manifest.csv");
    Manifest::new(entries)?.save(&path)?;
    rec.artifact(path);
    Ok(())
}

fn split_spec(
    seed: Option<u64>,
    fractions: [Option<f64>; 3],
    no_stratify: bool,
    file: &FileConfig,
) -> anyhow::Result<SplitSpec> {
    let d = SplitSpec::default();
    let spec = SplitSpec {
        train: pick(fractions[0], file.train_fraction, d.train),
        validation: pick(fractions[1], file.validation_fraction, d.validation),
        test: pick(fractions[2], file.test_fraction, d.test),
        seed: pick(seed, file.split_seed, d.seed),
        stratify: if no_stratify { false } else { file.stratify.unwrap_or(d.stratify) },
    };
    spec.validate()?;
    Ok(spec)
}

fn record_split(rec: &mut RunRecord, spec: &SplitSpec) {
    rec.set("split_seed", spec.seed);
    rec.set("train_fraction", spec.train);
    rec.set("validation_fraction", spec.validation);
    rec.set("test_fraction", spec.test);
    rec.set("stratify", spec.stratify);
}

fn split(a: SplitArgs, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let path = manifest_path(&a.manifest, file)?;
    let spec = split_spec(
        a.split_seed,
        [a.train_fraction, a.validation_fraction, a.test_fraction],
        a.no_stratify,
        file,
    )?;
    record_split(rec, &spec);
    rec.set("manifest", path.display());
    let manifest = build_splits(Manifest::load(&path)?.entries, &spec)?;
    let dest = out.join("manifest.csv");
    manifest.save(&dest)?;
    rec.artifact(dest);
    Ok(())
}

/// The manifest with splits; assigns them when none are present.
fn split_manifest(path: &Path, seed: Option<u64>, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<Manifest> {
    let manifest = Manifest::load(path)?;
    if manifest.entries.iter().any(|e| e.split.is_some()) {
        return Ok(manifest);
    }
    let spec = split_spec(seed, [None; 3], false, file)?;
    record_split(rec, &spec);
    log::info!("manifest has no splits; assigning them with seed {}", spec.seed);
    let manifest = build_splits(manifest.entries, &spec)?;
    let dest = out.join("manifest_split.csv");
    manifest.save(&dest)?;
    rec.artifact(dest);
    Ok(manifest)
}

fn encode(a: EncodeArgs, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let path = manifest_path(&a.data.manifest, file)?;
    let plan = frame_plan(&a.data, file, FramePlan::default().length)?;
    let pre = preprocess(&a.pre, file, plan.length)?;
    let cache = image_cache(&a.data, file, out)
        .ok_or_else(|| config_err("encode writes to the image cache; drop --no-cache"))?;
    record_data(rec, &path, &plan, &pre, Some(&cache));
    let mut manifest = Manifest::load(&path)?;
    // Encoding does not depend on splits, so unsplit recordings are encoded too.
    for e in &mut manifest.entries {
        e.split.get_or_insert(Split::Train);
    }
    let index = materialize_frames(&manifest, &plan, &pre)?;
    let frames: Vec<_> = index.frames.iter().map(|f| &f.frame).collect();
    let written: Vec<PathBuf> = frames
        .par_iter()
        .map(|f| -> anyhow::Result<Vec<PathBuf>> {
            let pooled = cache.pooled(f, &pre)?;
            let mut paths = vec![cache.path_for(f, &pre)?];
            if a.png {
                let png = out.join("png").join(format!("{}_{}.png", f.recording_id, f.start));
                fs::create_dir_all(png.parent().expect("has parent"))?;
                export_png(&png, &pooled)?;
                paths.push(png);
            }
            Ok(paths)
        })
        .collect::<anyhow::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rec.set("frames", frames.len());
    for p in written {
        rec.artifact(p);
    }
    Ok(())
}

fn parse_blocks(spec: &[String]) -> anyhow::Result<Vec<BlockConfig>> {
    spec.iter()
        .map(|s| {
            let s = s.trim();
            let (digits, pool) = match s.strip_suffix('n') {
                Some(d) => (d, false),
                None => (s, true),
            };
            let out_channels = digits
                .parse::<usize>()
                .map_err(|_| config_err(format!("invalid block width {s:?}")))?;
            Ok(BlockConfig { out_channels, pool })
        })
        .collect()
}

fn blocks_label(blocks: &[BlockConfig]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}{}", b.out_channels, if b.pool { "" } else { "n" }))
        .collect::<Vec<_>>()
        .join(",")
}

/// GAP vectors of imported maps named `{id}_{start}_{length}.tmfa`.
fn imported_rows(
    entries: &[&ManifestEntry],
    dir: &Path,
    length: usize,
    channels: Option<usize>,
) -> anyhow::Result<Vec<FeatureRow>> {
    let listing = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow::Error::from(TmfError::FileNotFound(dir.to_path_buf())),
        _ => anyhow::Error::from(e),
    })?;
    let by_id: BTreeMap<&str, ClassLabel> = entries.iter().map(|e| (e.recording_id.as_str(), e.label)).collect();
    let mut found = Vec::new();
    for item in listing {
        let path = item?.path();
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".tmfa"))
        else {
            continue;
        };
        let mut parts = stem.rsplitn(3, '_');
        let (Some(len), Some(start), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let (Ok(len), Ok(start)) = (len.parse::<usize>(), start.parse::<usize>()) else {
            continue;
        };
        if len != length {
            continue;
        }
        if let Some(&label) = by_id.get(id) {
            found.push((id.to_string(), start, label, path));
        }
    }
    found.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    if found.is_empty() {
        return Err(TmfError::EmptyDataset.into());
    }
    found
        .into_par_iter()
        .map(|(recording_id, start, label, path)| {
            let a = import_feature_map_expecting(&path, channels)?;
            Ok(FeatureRow {
                recording_id,
                start,
                label,
                h: gap(&a),
            })
        })
        .collect()
}

fn labeled(rows: &[FeatureRow]) -> Vec<LabeledVector> {
    rows.iter()
        .map(|r| LabeledVector {
            h: r.h.clone(),
            label: r.label,
        })
        .collect()
}

fn train_config(a: &TrainArgs, file: &FileConfig, seed: u64) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let c = TrainConfig {
        learning_rate: pick(a.learning_rate, file.learning_rate, d.learning_rate),
        batch_size: pick(a.batch_size, file.batch_size, d.batch_size),
        max_epochs: pick(a.max_epochs, file.max_epochs, d.max_epochs),
        early_stop_patience: pick(a.patience, file.patience, d.early_stop_patience),
        seed,
        ..d
    };
    c.validate()?;
    Ok(c)
}

enum Features {
    Images {
        train: Vec<LabeledImage>,
        val: Vec<LabeledImage>,
    },
    Imported {
        train: Vec<LabeledVector>,
        val: Vec<LabeledVector>,
        channels: usize,
    },
}

fn train(a: TrainArgs, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let path = manifest_path(&a.data.manifest, file)?;
    let head_kind = pick(a.head.clone(), file.head.clone(), "mlp".to_string());
    let extractor_kind = pick(a.extractor.clone(), file.extractor.clone(), "builtin".to_string());
    let freeze = a.freeze || file.freeze.unwrap_or(false);
    let seeds = pick(a.seeds.clone(), file.seeds.clone(), DEFAULT_SEEDS.to_vec());
    if seeds.is_empty() {
        return Err(config_err("the seed list is empty"));
    }
    let search_budget = pick(a.search_budget, file.search_budget, 20);
    if !matches!(head_kind.as_str(), "mlp" | "logreg") {
        return Err(config_err(format!("unknown head {head_kind:?} (expected mlp or logreg)")));
    }
    let imported = match extractor_kind.as_str() {
        "builtin" => false,
        "imported" => true,
        other => return Err(config_err(format!("unknown extractor {other:?} (expected builtin or imported)"))),
    };
    if !imported && head_kind == "logreg" && !freeze {
        return Err(config_err(
            "the logreg head cannot be trained through the built-in extractor; add --freeze or use imported features",
        ));
    }
    let blocks = match (&a.blocks, &file.blocks) {
        (Some(spec), _) => parse_blocks(spec)?,
        (None, Some(widths)) => widths.iter().map(|&w| BlockConfig { out_channels: w, pool: true }).collect(),
        (None, None) => CnnConfig::small(0).blocks,
    };
    let plan = frame_plan(&a.data, file, FramePlan::default().length)?;
    let pre = preprocess(&a.pre, file, plan.length)?;
    let cache = image_cache(&a.data, file, out);
    record_data(rec, &path, &plan, &pre, cache.as_ref());
    rec.set("head", &head_kind);
    rec.set("extractor", &extractor_kind);
    rec.set("freeze", freeze);
    rec.set("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    if head_kind == "logreg" {
        rec.set("search_budget", search_budget);
    }
    let manifest = split_manifest(&path, a.split_seed, file, out, rec)?;

    let features = if imported {
        let dir = a
            .features_dir
            .clone()
            .or_else(|| file.features_dir.clone())
            .ok_or_else(|| config_err("--extractor imported needs --features-dir"))?;
        rec.set("features_dir", dir.display());
        let rows_for = |split: Split| -> anyhow::Result<Vec<FeatureRow>> {
            let entries: Vec<&ManifestEntry> = manifest.in_split(split).collect();
            imported_rows(&entries, &dir, plan.length, None)
        };
        let train = rows_for(Split::Train)?;
        let val = rows_for(Split::Validation)?;
        let channels = train[0].h.len();
        if val.iter().chain(&train).any(|r| r.h.len() != channels) {
            return Err(TmfError::ShapeMismatch("imported feature maps differ in channel count".into()).into());
        }
        rec.set("train_frames", train.len());
        rec.set("validation_frames", val.len());
        Features::Imported {
            train: labeled(&train),
            val: labeled(&val),
            channels,
        }
    } else {
        rec.set("blocks", blocks_label(&blocks));
        let index = materialize_frames(&manifest, &plan, &pre)?;
        let train = prepare_images(index.split(Split::Train), &pre, cache.as_ref())?;
        let val = prepare_images(index.split(Split::Validation), &pre, cache.as_ref())?;
        rec.set("train_frames", train.len());
        rec.set("validation_frames", val.len());
        Features::Images { train, val }
    };

    for &seed in &seeds {
        let config = train_config(&a, file, seed)?;
        rec.set("learning_rate", config.learning_rate);
        rec.set("batch_size", config.batch_size);
        rec.set("max_epochs", config.max_epochs);
        rec.set("patience", config.early_stop_patience);
        let (model, log_csv) = match &features {
            Features::Images { train, val } if !freeze => {
                let cnn = CnnConfig::new(blocks.clone(), seed);
                let (params, log) = train_end_to_end(train, val, &cnn, &config)?;
                (model_from_joint(pre, params), log.to_csv())
            }
            Features::Images { train, val } => {
                let cnn = CnnParams::init(&CnnConfig::new(blocks.clone(), seed))?;
                let t = extract_features(&cnn, train)?;
                let v = extract_features(&cnn, val)?;
                train_head(&head_kind, Extractor::Builtin(cnn), &t, &v, &config, search_budget, pre)?
            }
            Features::Imported { train, val, channels } => {
                let extractor = Extractor::Imported { channels: *channels };
                train_head(&head_kind, extractor, train, val, &config, search_budget, pre)?
            }
        };
        let ckpt = out.join(format!("model_seed{seed}.tmfm"));
        let meta = vec![
            ("seed".to_string(), seed.to_string()),
            ("extractor".to_string(), extractor_kind.clone()),
            ("freeze".to_string(), freeze.to_string()),
        ];
        write_checkpoint(&ckpt, &model, &meta)?;
        rec.artifact(ckpt.clone());
        rec.artifact(meta_path(&ckpt));
        rec.write_text(out.join(format!("train_log_seed{seed}.csv")), &log_csv)?;
        log::info!("seed {seed}: wrote {}", ckpt.display());
    }
    Ok(())
}

/// Trains the requested head on fixed feature vectors.
fn train_head(
    kind: &str,
    extractor: Extractor,
    train: &[LabeledVector],
    val: &[LabeledVector],
    config: &TrainConfig,
    search_budget: usize,
    preprocess: Preprocess,
) -> anyhow::Result<(TmfModel, String)> {
    let (head, log) = if kind == "mlp" {
        let (mlp, log) = train_mlp(train, val, config)?;
        (Head::Mlp(mlp), log.to_csv())
    } else {
        let (params, trace) = train_logreg(train, val, search_budget, config.seed)?;
        let mut csv = String::from("candidate,penalty,strength,val_roc_auc,selected\n");
        for (i, (c, score)) in trace.evaluations.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                i,
                c.penalty.as_str(),
                c.strength,
                score,
                u8::from(i == trace.best)
            );
        }
        (Head::LogReg(params), csv)
    };
    let model = TmfModel {
        preprocess,
        extractor,
        head,
    };
    Ok((model, log))
}

fn checkpoint_seed(path: &Path, fallback: u64) -> u64 {
    fs::read_to_string(meta_path(path))
        .ok()
        .and_then(|text| {
            text.lines()
                .find_map(|l| l.strip_prefix("seed="))
                .and_then(|v| v.trim().parse().ok())
        })
        .unwrap_or(fallback)
}

fn scored(rows: &[(String, usize, ClassLabel)], y1: Vec<f64>) -> Vec<ScoredFrame> {
    rows.iter()
        .zip(y1)
        .map(|((id, start, label), y1)| ScoredFrame {
            recording_id: id.clone(),
            start: *start,
            y1,
            label: *label,
        })
        .collect()
}

fn score_checkpoint(
    model: &TmfModel,
    manifest: &Manifest,
    split: Split,
    plan: &FramePlan,
    cache: Option<&ImageCache>,
    features_dir: Option<&Path>,
) -> anyhow::Result<Vec<ScoredFrame>> {
    match &model.extractor {
        Extractor::Builtin(_) => {
            let index: FrameIndex = materialize_frames(manifest, plan, &model.preprocess)?;
            let frames: Vec<_> = index.split(split).collect();
            if frames.is_empty() {
                return Err(TmfError::EmptySplit(split.as_str()).into());
            }
            let images = prepare_images(frames.iter().copied(), &model.preprocess, cache)?;
            let y1 = images
                .par_iter()
                .map(|s| model.predict_image(&s.image).map(|p| p.af()))
                .collect::<tmf_core::Result<Vec<f64>>>()?;
            let keys: Vec<_> = frames.iter().map(|f| (f.recording_id.clone(), f.start, f.label)).collect();
            Ok(scored(&keys, y1))
        }
        Extractor::Imported { channels } => {
            let dir = features_dir.ok_or_else(|| config_err("this checkpoint uses imported features; pass --features-dir"))?;
            let entries: Vec<&ManifestEntry> = manifest.in_split(split).collect();
            let rows = imported_rows(&entries, dir, plan.length, Some(*channels))?;
            let y1 = rows
                .par_iter()
                .map(|r| model.head.predict(r.h.as_slice()).map(|p| p.af()))
                .collect::<tmf_core::Result<Vec<f64>>>()?;
            let keys: Vec<_> = rows.iter().map(|r| (r.recording_id.clone(), r.start, r.label)).collect();
            Ok(scored(&keys, y1))
        }
    }
}

fn evaluate(a: EvaluateArgs, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let path = manifest_path(&a.data.manifest, file)?;
    let split: Split = parse_or_config("split", &a.split)?;
    let threshold = pick(a.threshold, file.threshold, DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(config_err(format!("threshold {threshold} is outside [0, 1]")));
    }
    let features_dir = a.features_dir.clone().or_else(|| file.features_dir.clone());
    let manifest = Manifest::load(&path)?;
    if manifest.entries.iter().all(|e| e.split.is_none()) {
        return Err(TmfError::MalformedInput(format!(
            "{} has no split column values; run `tmf split` first",
            path.display()
        ))
        .into());
    }
    let cache = image_cache(&a.data, file, out);
    rec.set("split", split);
    rec.set("threshold", threshold);

    let mut per_seed = Vec::new();
    let mut summary = String::new();
    let (mut ti_all, mut tc_all) = (Vec::new(), Vec::new());
    for (i, ckpt) in a.checkpoints.iter().enumerate() {
        let model = read_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let seed = checkpoint_seed(ckpt, i as u64);
        let plan = frame_plan(&a.data, file, model.preprocess.frame_len)?;
        if i == 0 {
            record_data(rec, &path, &plan, &model.preprocess, cache.as_ref());
        }
        rec.set(&format!("checkpoint.{i}"), ckpt.display());
        rec.set(&format!("checkpoint.{i}.seed"), seed);
        let frames = score_checkpoint(&model, &manifest, split, &plan, cache.as_ref(), features_dir.as_deref())?;
        let metrics = FrameMetrics::compute(&frames, threshold)?;
        let reports = patient_reports(&frames, threshold)?;
        let (ti, tc) = ti_tc_counts(&reports);
        let _ = writeln!(summary, "seed.{seed}.ti={ti}");
        let _ = writeln!(summary, "seed.{seed}.tc={tc}");
        let _ = writeln!(summary, "seed.{seed}.patients={}", reports.len());
        ti_all.push(ti as f64);
        tc_all.push(tc as f64);
        per_seed.push((seed, metrics));
        rec.write_text(out.join(format!("frames_seed{seed}.csv")), &scored_frames_csv(&frames))?;
        rec.write_text(out.join(format!("patients_seed{seed}.csv")), &patient_reports_csv(&reports))?;
    }
    let report = MetricsReport { threshold, per_seed };
    let mut text = report.to_key_values();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let _ = writeln!(text, "ti={}", mean(&ti_all));
    let _ = writeln!(text, "tc={}", mean(&tc_all));
    text.push_str(&summary);
    rec.write_text(out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_class(s: &str) -> anyhow::Result<ClassLabel> {
    match s {
        "1" => Ok(ClassLabel::Af),
        "2" => Ok(ClassLabel::NonAf),
        other => parse_or_config("class", other),
    }
}

fn recording_id(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("recording")
        .to_string()
}

fn load_signal(path: &Path) -> anyhow::Result<TimeSeries> {
    if !path.exists() {
        return Err(TmfError::FileNotFound(path.to_path_buf()).into());
    }
    let mut ts = load_time_series(path, SignalFormat::from_path(path))?;
    ts.recording_id = recording_id(path);
    Ok(ts)
}

fn explain(a: ExplainArgs, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let class = parse_class(&a.class)?;
    let target: CamTarget = parse_or_config("target", &a.target)?;
    let model = read_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ts = load_signal(&a.signal)?;
    let length = a.frame_length.unwrap_or(model.preprocess.frame_len);
    rec.set("checkpoint", a.checkpoint.display());
    rec.set("signal", a.signal.display());
    rec.set("class", class);
    rec.set("target", target.as_str());
    rec.set("frame_length", length);
    rec.set("starts", a.starts.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    if a.starts.is_empty() {
        return Err(config_err("--starts is empty"));
    }
    for &start in &a.starts {
        if start == 0 {
            return Err(config_err("frame starts are 1-based"));
        }
        if start - 1 + length > ts.len() {
            return Err(TmfError::FrameTooLong {
                length: start - 1 + length,
                available: ts.len(),
            }
            .into());
        }
    }
    let normalized = model.preprocess.normalize_recording(&ts);
    let written: Vec<Vec<PathBuf>> = a
        .starts
        .par_iter()
        .map(|&start| -> anyhow::Result<Vec<PathBuf>> {
            let values = &normalized.values[start - 1..start - 1 + length];
            let e = explain_frame(&model, values, class, target)?;
            let stem = format!("cam_{}_{}_{}", ts.recording_id, start, class);
            let csv = out.join(format!("{stem}.csv"));
            write_cam_csv(&csv, &e.symmetric)?;
            let mut paths = vec![csv];
            if a.image {
                let img = out.join(format!("{stem}.tmfi"));
                write_cam_image(&img, &e.symmetric)?;
                paths.push(img);
            }
            Ok(paths)
        })
        .collect::<anyhow::Result<_>>()?;
    for p in written.into_iter().flatten() {
        rec.artifact(p);
    }
    Ok(())
}

fn sweep(a: SweepArgs, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let lengths = sweep_lengths(a.min, a.max, a.step)?;
    let model = read_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ts = load_signal(&a.signal)?;
    rec.set("checkpoint", a.checkpoint.display());
    rec.set("signal", a.signal.display());
    rec.set("min", a.min);
    rec.set("max", a.max);
    rec.set("step", a.step);
    let points = frame_length_sweep(&model, &ts, &lengths)?;
    rec.write_text(out.join("sweep.csv"), &sweep_csv(&points))
}

fn export(a: ExportArgs, file: &FileConfig, out: &Path, rec: &mut RunRecord) -> anyhow::Result<()> {
    let path = manifest_path(&a.data.manifest, file)?;
    let format = match a.format.as_str() {
        "csv" => FeatureFormat::Csv,
        "binary" => FeatureFormat::Binary,
        other => return Err(config_err(format!("unknown feature format {other:?} (expected csv or binary)"))),
    };
    let split = a.split.as_deref().map(|s| parse_or_config::<Split>("split", s)).transpose()?;
    let model = read_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let Extractor::Builtin(cnn) = &model.extractor else {
        return Err(TmfError::UnsupportedModel("checkpoint has no built-in extractor to export features from".into()).into());
    };
    let plan = frame_plan(&a.data, file, model.preprocess.frame_len)?;
    let cache = image_cache(&a.data, file, out);
    record_data(rec, &path, &plan, &model.preprocess, cache.as_ref());
    rec.set("checkpoint", a.checkpoint.display());
    rec.set("format", &a.format);
    let mut manifest = Manifest::load(&path)?;
    match split {
        Some(s) => {
            rec.set("split", s);
            manifest.entries.retain(|e| e.split == Some(s));
        }
        None => {
            for e in &mut manifest.entries {
                e.split.get_or_insert(Split::Train);
            }
        }
    }
    let index = materialize_frames(&manifest, &plan, &model.preprocess)?;
    let frames: Vec<_> = index.frames.iter().map(|f| &f.frame).collect();
    let images = prepare_images(frames.iter().copied(), &model.preprocess, cache.as_ref())?;
    let h: Vec<FeatureVector> = images
        .par_iter()
        .map(|s| cnn_forward(cnn, &s.image).map(|a| gap(&a)))
        .collect::<tmf_core::Result<_>>()?;
    let rows: Vec<FeatureRow> = frames
        .iter()
        .zip(h)
        .map(|(f, h)| FeatureRow {
            recording_id: f.recording_id.clone(),
            start: f.start,
            label: f.label,
            h,
        })
        .collect();
    let dest = out.join(match format {
        FeatureFormat::Csv => "features.csv",
        FeatureFormat::Binary => "features.tmfa",
    });
    export_features(&dest, &rows, format, Some(cnn.output_channels()))?;
    if format == FeatureFormat::Binary {
        let mut idx = dest.as_os_str().to_owned();
        idx.push(".index.csv");
        rec.artifact(PathBuf::from(idx));
    }
    rec.artifact(dest);
    rec.set("frames", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_specs_parse() {
        let b = parse_blocks(&["8".into(), "16n".into()]).unwrap();
        assert_eq!(b[0], BlockConfig { out_channels: 8, pool: true });
        assert_eq!(b[1], BlockConfig { out_channels: 16, pool: false });
        assert_eq!(blocks_label(&b), "8,16n");
        assert!(parse_blocks(&["x".into()]).is_err());
    }

    #[test]
    fn class_accepts_index_and_name() {
        assert_eq!(parse_class("1").unwrap(), ClassLabel::Af);
        assert_eq!(parse_class("NonAF").unwrap(), ClassLabel::NonAf);
        assert!(parse_class("3").is_err());
    }
}
