//! Raw signal ingestion, per-recording normalization and frame slicing.
//!
//! Indices exposed through [`Frame::start`] and every file format are
//! 1-based; the sample vectors themselves are ordinary Rust slices.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{self, Reader, Writer};
use crate::error::{Result, TmfError};

pub const SIGNAL_MAGIC: &[u8; 4] = b"TMFS";

/// Binary classification target. `Af` is the positive class (index 0 of a
/// prediction, `y1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Af,
    NonAf,
}

impl ClassLabel {
    pub const COUNT: usize = 2;

    /// 0 for AF, 1 for non-AF, matching the order of `[y1, y2]`.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Af => 0,
            ClassLabel::NonAf => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Af),
            1 => Some(ClassLabel::NonAf),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == ClassLabel::Af
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Af => "AF",
            ClassLabel::NonAf => "NonAF",
        })
    }
}

impl FromStr for ClassLabel {
    type Err = TmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "AF" => Ok(ClassLabel::Af),
            "NonAF" => Ok(ClassLabel::NonAf),
            other => Err(TmfError::MalformedInput(format!(
                "unknown label {other:?} (expected AF or NonAF)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub recording_id: String,
    pub values: Vec<f64>,
    pub sample_rate_hz: f64,
    pub label: ClassLabel,
}

impl TimeSeries {
    pub fn new(recording_id: impl Into<String>, values: Vec<f64>, label: ClassLabel) -> Self {
        TimeSeries {
            recording_id: recording_id.into(),
            values,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            label,
        }
    }

    pub fn with_sample_rate(mut self, hz: f64) -> Self {
        self.sample_rate_hz = hz;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Position (1-based) of the first NaN/Inf sample, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite()).map(|i| i + 1)
    }
}

/// Sampling rate of the single-lead recordings the pipeline was designed for.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub recording_id: String,
    /// 1-based offset of the first sample in the parent series.
    pub start: usize,
    pub values: Vec<f64>,
    pub label: ClassLabel,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_series(&self, sample_rate_hz: f64) -> TimeSeries {
        TimeSeries {
            recording_id: self.recording_id.clone(),
            values: self.values.clone(),
            sample_rate_hz,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SignalFormat {
    #[default]
    Csv,
    F32Binary,
}

impl SignalFormat {
    /// `.csv`/`.txt` are text, anything else is treated as the binary layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => SignalFormat::Csv,
            _ => SignalFormat::F32Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormMode {
    #[default]
    ZScore,
    MinMax,
    None,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::ZScore => "zscore",
            NormMode::MinMax => "minmax",
            NormMode::None => "none",
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            NormMode::ZScore => 0,
            NormMode::MinMax => 1,
            NormMode::None => 2,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(NormMode::ZScore),
            1 => Ok(NormMode::MinMax),
            2 => Ok(NormMode::None),
            t => Err(TmfError::MalformedInput(format!("unknown normalization tag {t}"))),
        }
    }
}

impl FromStr for NormMode {
    type Err = TmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormMode::ZScore),
            "minmax" => Ok(NormMode::MinMax),
            "none" => Ok(NormMode::None),
            other => Err(TmfError::Config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

/// Loads a single-lead signal. The recording id defaults to the file stem
/// and the label to non-AF; callers with a manifest overwrite both.
pub fn load_time_series(path: &Path, format: SignalFormat) -> Result<TimeSeries> {
    let bytes = binio::read_file(path)?;
    let values = match format {
        SignalFormat::Csv => parse_csv_signal(&bytes)?,
        SignalFormat::F32Binary => parse_binary_signal(&bytes)?,
    };
    let recording_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TimeSeries::new(recording_id, values, ClassLabel::NonAf))
}

fn parse_csv_signal(bytes: &[u8]) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| TmfError::MalformedInput("signal file is not UTF-8".into()))?;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('#')) {
            continue;
        }
        // Rust's float parser accepts "NaN"/"inf", so non-finite tokens parse
        // and are rejected below with their position.
        let v: f64 = line.parse().map_err(|_| {
            TmfError::MalformedInput(format!("line {}: not a number: {line:?}", lineno + 1))
        })?;
        if !v.is_finite() {
            return Err(TmfError::NonFiniteSample {
                position: values.len() + 1,
            });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(TmfError::MalformedInput("signal file contains no samples".into()));
    }
    Ok(values)
}

fn parse_binary_signal(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut r = Reader::new(bytes, "signal");
    r.expect_magic(SIGNAL_MAGIC)?;
    let n = r.u32()? as usize;
    let raw = r.f32s(n)?;
    r.finish()?;
    if raw.is_empty() {
        return Err(TmfError::MalformedInput("signal file contains no samples".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(TmfError::NonFiniteSample { position: i + 1 });
    }
    Ok(raw.into_iter().map(f64::from).collect())
}

pub fn write_time_series(path: &Path, ts: &TimeSeries, format: SignalFormat) -> Result<()> {
    let bytes = match format {
        SignalFormat::Csv => {
            let mut s = String::with_capacity(ts.len() * 12);
            for v in &ts.values {
                s.push_str(&format!("{v}\n"));
            }
            s.into_bytes()
        }
        SignalFormat::F32Binary => {
            let mut w = Writer::default();
            w.magic(SIGNAL_MAGIC).u32(binio::dim_u32(ts.len(), "length")?);
            for &v in &ts.values {
                w.f32(v as f32);
            }
            w.buf
        }
    };
    binio::write_atomic(path, &bytes)
}

pub fn normalize(ts: &TimeSeries, mode: NormMode) -> TimeSeries {
    let values = normalize_values(&ts.values, mode);
    TimeSeries {
        values,
        ..ts.clone()
    }
}

pub fn normalize_values(values: &[f64], mode: NormMode) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    match mode {
        NormMode::None => values.to_vec(),
        NormMode::ZScore => {
            let (lo, hi) = min_max(values);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            // The mean of a constant series need not round back to the value,
            // so constancy is decided on the raw extremes.
            if hi == lo || !std.is_normal() {
                vec![0.0; values.len()]
            } else {
                values.iter().map(|v| (v - mean) / std).collect()
            }
        }
        NormMode::MinMax => {
            let (lo, hi) = min_max(values);
            if hi == lo {
                vec![0.5; values.len()]
            } else {
                let span = hi - lo;
                values.iter().map(|v| (v - lo) / span).collect()
            }
        }
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Closed-form number of frames `slice_frames` yields.
pub fn frame_count(n: usize, length: usize, stride: usize) -> usize {
    if length == 0 || stride == 0 || length > n {
        0
    } else {
        (n - length) / stride + 1
    }
}

pub fn slice_frames(ts: &TimeSeries, length: usize, stride: usize) -> Result<Vec<Frame>> {
    if length == 0 || stride == 0 {
        return Err(TmfError::Config(format!(
            "frame length ({length}) and stride ({stride}) must be positive"
        )));
    }
    if length > ts.len() {
        return Err(TmfError::FrameTooLong {
            length,
            available: ts.len(),
        });
    }
    Ok(ts
        .values
        .windows(length)
        .step_by(stride)
        .enumerate()
        .map(|(k, w)| Frame {
            recording_id: ts.recording_id.clone(),
            start: k * stride + 1,
            values: w.to_vec(),
            label: ts.label,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn series(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new("r", values, ClassLabel::Af)
    }

    fn write_tmp(contents: &[u8], suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents).unwrap();
        f
    }

    #[test]
    fn csv_reads_in_order() {
        let f = write_tmp(b"1.0\n2.0\n3.0", ".csv");
        let ts = load_time_series(f.path(), SignalFormat::Csv).unwrap();
        assert_eq!(ts.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_header_is_skipped() {
        let f = write_tmp(b"# mV\n4\n5\n", ".csv");
        let ts = load_time_series(f.path(), SignalFormat::Csv).unwrap();
        assert_eq!(ts.values, vec![4.0, 5.0]);
    }

    #[test]
    fn csv_rejections() {
        let empty = write_tmp(b"", ".csv");
        assert!(matches!(
            load_time_series(empty.path(), SignalFormat::Csv),
            Err(TmfError::MalformedInput(_))
        ));
        let nan = write_tmp(b"1\nNaN\n", ".csv");
        assert!(matches!(
            load_time_series(nan.path(), SignalFormat::Csv),
            Err(TmfError::NonFiniteSample { position: 2 })
        ));
        let junk = write_tmp(b"1\nabc\n", ".csv");
        assert!(matches!(
            load_time_series(junk.path(), SignalFormat::Csv),
            Err(TmfError::MalformedInput(_))
        ));
        assert!(matches!(
            load_time_series(Path::new("/nonexistent/x.csv"), SignalFormat::Csv),
            Err(TmfError::FileNotFound(_))
        ));
    }

    #[test]
    fn binary_layout() {
        let mut bytes = b"TMFS".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let f = write_tmp(&bytes, ".bin");
        let ts = load_time_series(f.path(), SignalFormat::F32Binary).unwrap();
        assert_eq!(ts.values, vec![1.5, -2.0]);

        let truncated = write_tmp(&bytes[..bytes.len() - 1], ".bin");
        assert!(matches!(
            load_time_series(truncated.path(), SignalFormat::F32Binary),
            Err(TmfError::MalformedInput(_))
        ));

        let mut inf = b"TMFS".to_vec();
        inf.extend_from_slice(&1u32.to_le_bytes());
        inf.extend_from_slice(&f32::INFINITY.to_le_bytes());
        let f = write_tmp(&inf, ".bin");
        assert!(matches!(
            load_time_series(f.path(), SignalFormat::F32Binary),
            Err(TmfError::NonFiniteSample { position: 1 })
        ));
    }

    #[test]
    fn binary_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let ts = series(vec![0.25, -1.0, 3.5]);
        write_time_series(&path, &ts, SignalFormat::F32Binary).unwrap();
        let back = load_time_series(&path, SignalFormat::F32Binary).unwrap();
        assert_eq!(back.values, ts.values);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize(&series(vec![1.0, 2.0, 3.0]), NormMode::MinMax).values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            normalize(&series(vec![5.0, 5.0, 5.0]), NormMode::ZScore).values,
            vec![0.0, 0.0, 0.0]
        );
        assert_eq!(
            normalize(&series(vec![5.0, 5.0]), NormMode::MinMax).values,
            vec![0.5, 0.5]
        );
        assert_eq!(
            normalize(&series(vec![0.0, 2.0]), NormMode::ZScore).values,
            vec![-1.0, 1.0]
        );
        let raw = vec![3.0, -1.0];
        assert_eq!(normalize(&series(raw.clone()), NormMode::None).values, raw);
    }

    #[test]
    fn slice_examples() {
        let ts = series(vec![0.0; 9000]);
        assert_eq!(slice_frames(&ts, 3000, 500).unwrap().len(), 13);
        let ts = series(vec![0.0; 3000]);
        assert_eq!(slice_frames(&ts, 3000, 50).unwrap().len(), 1);
        let ts = series(vec![0.0; 2999]);
        assert!(matches!(
            slice_frames(&ts, 3000, 50),
            Err(TmfError::FrameTooLong { .. })
        ));
    }

    proptest! {
        #[test]
        fn frame_count_and_contents(
            n in 1usize..400,
            length in 1usize..400,
            stride in 1usize..60,
            seed in 0u64..1000,
        ) {
            prop_assume!(length <= n);
            let values: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 97) as f64).collect();
            let ts = series(values.clone());
            let frames = slice_frames(&ts, length, stride).unwrap();
            prop_assert_eq!(frames.len(), (n - length) / stride + 1);
            prop_assert_eq!(frames.len(), frame_count(n, length, stride));
            for (k, f) in frames.iter().enumerate() {
                prop_assert_eq!(f.start, 1 + k * stride);
                prop_assert!(f.start + f.len() - 1 <= n);
                prop_assert_eq!(&f.values[..], &values[f.start - 1..f.start - 1 + length]);
                prop_assert_eq!(f.label, ts.label);
            }
        }

        #[test]
        fn zscore_is_idempotent(values in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let once = normalize_values(&values, NormMode::ZScore);
            let twice = normalize_values(&once, NormMode::ZScore);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}
