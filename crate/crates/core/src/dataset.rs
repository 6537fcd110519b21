//! Recording manifests, recording-level splits, framing and caching.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Writer};
use crate::error::{Result, TmfError};
use crate::extractor::{FeatureVector, FEATURE_MAP_MAGIC};
use crate::model::{LabeledImage, Preprocess};
use crate::signal::{load_time_series, slice_frames, ClassLabel, Frame, SignalFormat, TimeSeries};
use crate::tmf::{read_image, write_image};

/// Environment variable overriding the image cache directory.
pub const CACHE_DIR_ENV: &str = "TMF_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = TmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(TmfError::MalformedInput(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub recording_id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.recording_id.as_str()) {
                return Err(TmfError::MalformedInput(format!(
                    "duplicate recording id {:?}",
                    e.recording_id
                )));
            }
        }
        Ok(Manifest { entries })
    }

    /// Parses `recording_id,path,label,split`. Relative paths are resolved
    /// against `base`.
    pub fn parse_csv(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| TmfError::MalformedInput("empty manifest".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["recording_id", "path", "label", "split"] {
            return Err(TmfError::MalformedInput(format!(
                "manifest header must be recording_id,path,label,split (got {header:?})"
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(TmfError::MalformedInput(format!(
                    "manifest line {}: expected 4 fields, found {}",
                    i + 1,
                    f.len()
                )));
            }
            let path = PathBuf::from(f[1]);
            entries.push(ManifestEntry {
                recording_id: f[0].to_string(),
                path: if path.is_absolute() { path } else { base.join(path) },
                label: f[2].parse()?,
                split: if f[3].is_empty() { None } else { Some(f[3].parse()?) },
            });
        }
        Manifest::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => TmfError::FileNotFound(path.to_path_buf()),
            _ => TmfError::Io(e),
        })?;
        Manifest::parse_csv(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("recording_id,path,label,split\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.recording_id,
                e.path.display(),
                e.label,
                e.split.map_or("", Split::as_str)
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.75,
            validation: 0.10,
            test: 0.15,
            seed: 0,
            stratify: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TmfError::Config(format!(
                "split fractions {f:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Splits `n` items by `fractions`, giving leftover units to the largest
/// fractional parts (earlier splits win ties).
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns every recording to one split.
///
/// Split sizes follow [`largest_remainder`] over all recordings. With
/// stratification each class is shuffled separately and recordings are
/// interleaved by their relative rank within the class before cutting, so
/// each split receives the classes in close to their overall ratio.
pub fn build_splits(entries: Vec<ManifestEntry>, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    if entries.is_empty() {
        return Err(TmfError::EmptyDataset);
    }
    let mut manifest = Manifest::new(entries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // (relative rank, class, shuffled position, entry index)
    let mut keyed: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(manifest.entries.len());
    let groups: Vec<Option<ClassLabel>> = if spec.stratify {
        vec![Some(ClassLabel::Af), Some(ClassLabel::NonAf)]
    } else {
        vec![None]
    };
    for (gi, g) in groups.iter().enumerate() {
        let mut idx: Vec<usize> = (0..manifest.entries.len())
            .filter(|&i| g.is_none_or(|l| manifest.entries[i].label == l))
            .collect();
        idx.shuffle(&mut rng);
        let m = idx.len() as f64;
        for (pos, i) in idx.into_iter().enumerate() {
            keyed.push(((pos as f64 + 0.5) / m, gi, pos, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let counts = largest_remainder(keyed.len(), [spec.train, spec.validation, spec.test]);
    let mut k = keyed.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for (_, _, _, i) in k.by_ref().take(count) {
            manifest.entries[i].split = Some(split);
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePlan {
    pub length: usize,
    pub stride_af: usize,
    pub stride_nonaf: usize,
}

impl Default for FramePlan {
    fn default() -> Self {
        FramePlan {
            length: 3000,
            stride_af: 50,
            stride_nonaf: 500,
        }
    }
}

impl FramePlan {
    pub fn validate(&self) -> Result<()> {
        if self.length < 3 || self.stride_af == 0 || self.stride_nonaf == 0 {
            return Err(TmfError::Config(format!(
                "frame length must be ≥ 3 and strides ≥ 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn stride(&self, label: ClassLabel) -> usize {
        match label {
            ClassLabel::Af => self.stride_af,
            ClassLabel::NonAf => self.stride_nonaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFrame {
    pub frame: Frame,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameIndex {
    pub frames: Vec<SplitFrame>,
    /// Recordings shorter than the frame length, which were left out.
    pub skipped: Vec<String>,
}

impl FrameIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split).map(|f| &f.frame)
    }

    /// (AF, non-AF) frame counts per split.
    pub fn counts(&self) -> BTreeMap<Split, (usize, usize)> {
        let mut m: BTreeMap<Split, (usize, usize)> = Split::ALL.iter().map(|&s| (s, (0, 0))).collect();
        for f in &self.frames {
            let c = m.get_mut(&f.split).expect("all splits present");
            match f.frame.label {
                ClassLabel::Af => c.0 += 1,
                ClassLabel::NonAf => c.1 += 1,
            }
        }
        m
    }
}

/// Frames one in-memory, already-normalized recording.
pub fn frames_for_recording(ts: &TimeSeries, plan: &FramePlan) -> Result<Vec<Frame>> {
    slice_frames(ts, plan.length, plan.stride(ts.label))
}

/// Loads, normalizes and frames every recording that has a split.
///
/// Recordings shorter than the frame length are skipped with a warning.
pub fn materialize_frames(
    manifest: &Manifest,
    plan: &FramePlan,
    preprocess: &Preprocess,
) -> Result<FrameIndex> {
    plan.validate()?;
    let per: Vec<Result<(Vec<SplitFrame>, Option<String>)>> = manifest
        .entries
        .par_iter()
        .filter_map(|e| e.split.map(|s| (e, s)))
        .map(|(e, split)| {
            let mut ts = load_time_series(&e.path, SignalFormat::from_path(&e.path))?;
            ts.recording_id = e.recording_id.clone();
            ts.label = e.label;
            if ts.len() < plan.length {
                return Ok((Vec::new(), Some(e.recording_id.clone())));
            }
            let ts = preprocess.normalize_recording(&ts);
            let frames = frames_for_recording(&ts, plan)?;
            Ok((frames.into_iter().map(|frame| SplitFrame { frame, split }).collect(), None))
        })
        .collect();
    let mut index = FrameIndex::default();
    for r in per {
        let (frames, skipped) = r?;
        index.frames.extend(frames);
        index.skipped.extend(skipped);
    }
    if !index.skipped.is_empty() {
        log::warn!(
            "skipped {} recording(s) shorter than {} samples: {}",
            index.skipped.len(),
            plan.length,
            index.skipped.join(", ")
        );
    }
    for (split, (af, non)) in index.counts() {
        log::info!("{split}: {af} AF frames, {non} non-AF frames");
    }
    Ok(index)
}

/// On-disk cache of pooled TMF images.
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub dir: PathBuf,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ImageCache { dir: dir.into() }
    }

    /// `TMF_CACHE_DIR` if set, else `default`.
    pub fn from_env(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => ImageCache::new(d),
            _ => ImageCache::new(default),
        }
    }

    pub fn path_for(&self, frame: &Frame, preprocess: &Preprocess) -> Result<PathBuf> {
        let (r, c) = preprocess.target_dims(frame.len())?;
        Ok(self.dir.join(format!(
            "{}_{}_{}_{}_{}x{}.tmfi",
            sanitize(&frame.recording_id),
            frame.start,
            frame.len(),
            preprocess.normalize.as_str(),
            r,
            c
        )))
    }

    /// Pooled image for a frame, read from the cache or computed and stored.
    pub fn pooled(&self, frame: &Frame, preprocess: &Preprocess) -> Result<Array3<f64>> {
        let path = self.path_for(frame, preprocess)?;
        match read_image(&path) {
            Ok(img) => return Ok(img),
            Err(TmfError::FileNotFound(_)) => {}
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
        let img = preprocess.pooled_tmf(&frame.values)?;
        write_image(&path, &img)?;
        Ok(img)
    }
}

/// Extractor inputs for a set of frames, computed in parallel.
pub fn prepare_images<'a, I>(frames: I, preprocess: &Preprocess, cache: Option<&ImageCache>) -> Result<Vec<LabeledImage>>
where
    I: IntoIterator<Item = &'a Frame>,
{
    let frames: Vec<&Frame> = frames.into_iter().collect();
    frames
        .par_iter()
        .map(|f| {
            let pooled = match cache {
                Some(c) => c.pooled(f, preprocess)?,
                None => preprocess.pooled_tmf(&f.values)?,
            };
            Ok(LabeledImage {
                image: preprocess.finish(&pooled),
                label: f.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub recording_id: String,
    pub start: usize,
    pub label: ClassLabel,
    pub h: FeatureVector,
}

fn feature_width(rows: &[FeatureRow]) -> Result<usize> {
    let s = rows.first().map_or(0, |r| r.h.len());
    if rows.iter().any(|r| r.h.len() != s) {
        return Err(TmfError::ShapeMismatch("feature rows differ in length".into()));
    }
    Ok(s)
}

/// `recording_id,start,label,f1..fS`. With no rows the header lists no
/// feature columns unless `channels` is given.
pub fn features_csv(rows: &[FeatureRow], channels: Option<usize>) -> Result<String> {
    let s = if rows.is_empty() { channels.unwrap_or(0) } else { feature_width(rows)? };
    let mut out = String::from("recording_id,start,label");
    for k in 1..=s {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.recording_id, r.start, r.label);
        for v in r.h.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Feature table as a `TMFA` tensor with W = frames, H = 1, S = channels.
pub fn features_binary(rows: &[FeatureRow], channels: Option<usize>) -> Result<Vec<u8>> {
    let s = if rows.is_empty() { channels.unwrap_or(0) } else { feature_width(rows)? };
    let mut w = Writer::default();
    w.magic(FEATURE_MAP_MAGIC)
        .u32(binio::dim_u32(rows.len(), "W")?)
        .u32(1)
        .u32(binio::dim_u32(s, "S")?);
    for r in rows {
        for &v in r.h.as_slice() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

/// Sidecar naming the rows of a binary feature table.
pub fn features_index_csv(rows: &[FeatureRow]) -> String {
    let mut out = String::from("row,recording_id,start,label\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i, r.recording_id, r.start, r.label);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

/// Writes the feature table; the binary variant also writes
/// `<path>.index.csv`.
pub fn export_features(path: &Path, rows: &[FeatureRow], format: FeatureFormat, channels: Option<usize>) -> Result<()> {
    match format {
        FeatureFormat::Csv => binio::write_atomic(path, features_csv(rows, channels)?.as_bytes()),
        FeatureFormat::Binary => {
            binio::write_atomic(path, &features_binary(rows, channels)?)?;
            let mut idx = path.as_os_str().to_owned();
            idx.push(".index.csv");
            binio::write_atomic(Path::new(&idx), features_index_csv(rows).as_bytes())
        }
    }
}
