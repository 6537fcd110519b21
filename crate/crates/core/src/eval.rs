//! Frame-wise metrics, patient-wise accuracy and the frame-length sweep.
//!
//! The positive class throughout is AF; a frame is predicted AF when its
//! AF probability `y1` is strictly greater than the threshold (0.5 by
//! default).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Result, TmfError};
use crate::model::TmfModel;
use crate::signal::{ClassLabel, TimeSeries};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn sorted_desc(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(TmfError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(TmfError::MalformedInput(format!("score {s} is not a number")));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}

/// Groups of tied scores in descending order, as (positives, negatives).
fn tie_groups(sorted: &[(f64, bool)]) -> Vec<(usize, usize)> {
    sorted
        .chunk_by(|a, b| a.0 == b.0)
        .map(|g| {
            let pos = g.iter().filter(|p| p.1).count();
            (pos, g.len() - pos)
        })
        .collect()
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// threshold; tied positive/negative pairs contribute one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sorted = sorted_desc(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(TmfError::DegenerateLabels("ROC-AUC needs both classes"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (gp, gn) in tie_groups(&sorted) {
        // trapezoid between (fp, tp) and (fp + gn, tp + gp), in counts
        area += gn as f64 * (tp as f64 + gp as f64 / 2.0);
        tp += gp;
        fp += gn;
    }
    debug_assert_eq!((tp, fp), (p, n));
    Ok(area / (p as f64 * n as f64))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `a/b + c/d` reduced, or `None` on overflow.
fn add_ratio((a, b): (u128, u128), (c, d): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(b, d);
    let num = a.checked_mul(d / g)?.checked_add(c.checked_mul(b / g)?)?;
    let den = (b / g).checked_mul(d)?;
    let r = gcd(num, den).max(1);
    Some((num / r, den / r))
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over descending distinct
/// thresholds, without interpolation.
///
/// The sum is kept as an exact fraction while it fits, so that the
/// result is correctly rounded; long inputs fall back to floating point.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sorted = sorted_desc(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return Err(TmfError::DegenerateLabels("PR-AUC needs at least one positive"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (gp, gn) in tie_groups(&sorted) {
        tp += gp;
        seen += gp + gn;
        if gp > 0 {
            ap += gp as f64 * (tp as f64 / seen as f64);
            exact = exact.and_then(|acc| add_ratio(acc, ((gp * tp) as u128, seen as u128)));
        }
    }
    const EXACT_F64: u128 = 1 << 53;
    if let Some((num, Some(den))) = exact.map(|(n, d)| (n, d.checked_mul(p as u128))) {
        if num <= EXACT_F64 && den <= EXACT_F64 {
            return Ok(num as f64 / den as f64);
        }
    }
    Ok(ap / p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
        let denom = 2 * tp + fp + fn_;
        if tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    /// F1 of the positive (AF) class.
    pub fn f1(&self) -> f64 {
        Confusion::f1_from(self.tp, self.fp, self.fn_)
    }

    /// Unweighted mean of the per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        (self.f1() + Confusion::f1_from(self.tn, self.fn_, self.fp)) / 2.0
    }
}

/// AF-class F1 at `threshold`; 0 when precision + recall = 0.
pub fn f1_score(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at_threshold(scores, labels, threshold).f1()
}

pub fn f1_macro(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at_threshold(scores, labels, threshold).macro_f1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFrame {
    pub recording_id: String,
    pub start: usize,
    /// AF probability `y1`.
    pub y1: f64,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatientGroup {
    /// Totally incorrect: no frame predicted AF.
    Ti,
    /// Totally correct: every frame predicted AF.
    Tc,
    Partial,
}

impl PatientGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            PatientGroup::Ti => "TI",
            PatientGroup::Tc => "TC",
            PatientGroup::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientReport {
    pub recording_id: String,
    pub label: ClassLabel,
    /// Frames with `y1 > threshold`.
    pub predicted_af: usize,
    pub total_frames: usize,
    /// `predicted_af / total_frames × 100`.
    pub accuracy: f64,
    pub group: PatientGroup,
}

/// Share of one recording's frames predicted AF, in percent.
pub fn patient_accuracy(frames: &[ScoredFrame], threshold: f64) -> Result<PatientReport> {
    let first = frames
        .first()
        .ok_or_else(|| TmfError::EmptyPatient("<unnamed>".into()))?;
    let m = frames.iter().filter(|f| f.y1 > threshold).count();
    let total = frames.len();
    let group = if m == 0 {
        PatientGroup::Ti
    } else if m == total {
        PatientGroup::Tc
    } else {
        PatientGroup::Partial
    };
    Ok(PatientReport {
        recording_id: first.recording_id.clone(),
        label: first.label,
        predicted_af: m,
        total_frames: total,
        accuracy: m as f64 / total as f64 * 100.0,
        group,
    })
}

/// One report per recording, ordered by recording id.
pub fn patient_reports(frames: &[ScoredFrame], threshold: f64) -> Result<Vec<PatientReport>> {
    let mut by_id: BTreeMap<&str, Vec<ScoredFrame>> = BTreeMap::new();
    for f in frames {
        by_id.entry(&f.recording_id).or_default().push(f.clone());
    }
    by_id
        .values()
        .map(|fs| patient_accuracy(fs, threshold))
        .collect()
}

/// `(TI, TC)` counts: patients at exactly 0% and exactly 100%.
pub fn ti_tc_counts(reports: &[PatientReport]) -> (usize, usize) {
    reports.iter().fold((0, 0), |(ti, tc), r| match r.group {
        PatientGroup::Ti => (ti + 1, tc),
        PatientGroup::Tc => (ti, tc + 1),
        PatientGroup::Partial => (ti, tc),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    /// Percentages in `[0, 100]`.
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub f1: f64,
}

impl FrameMetrics {
    pub fn compute(frames: &[ScoredFrame], threshold: f64) -> Result<Self> {
        let scores: Vec<f64> = frames.iter().map(|f| f.y1).collect();
        let labels: Vec<bool> = frames.iter().map(|f| f.label.is_positive()).collect();
        Ok(FrameMetrics {
            roc_auc: roc_auc(&scores, &labels)? * 100.0,
            pr_auc: pr_auc(&scores, &labels)? * 100.0,
            f1: f1_score(&scores, &labels, threshold) * 100.0,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub per_seed: Vec<(u64, FrameMetrics)>,
}

impl MetricsReport {
    fn column(&self, f: impl Fn(&FrameMetrics) -> f64) -> Vec<f64> {
        self.per_seed.iter().map(|(_, m)| f(m)).collect()
    }

    pub fn roc_auc(&self) -> (f64, f64) {
        mean_std(&self.column(|m| m.roc_auc))
    }

    pub fn pr_auc(&self) -> (f64, f64) {
        mean_std(&self.column(|m| m.pr_auc))
    }

    pub fn f1(&self) -> (f64, f64) {
        mean_std(&self.column(|m| m.f1))
    }

    /// `key=value` lines; the unsuffixed keys are the across-seed means.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let (roc, roc_sd) = self.roc_auc();
        let (pr, pr_sd) = self.pr_auc();
        let (f1, f1_sd) = self.f1();
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "seeds={}", self.per_seed.len());
        let _ = writeln!(s, "roc_auc={roc}");
        let _ = writeln!(s, "roc_auc_std={roc_sd}");
        let _ = writeln!(s, "pr_auc={pr}");
        let _ = writeln!(s, "pr_auc_std={pr_sd}");
        let _ = writeln!(s, "f1={f1}");
        let _ = writeln!(s, "f1_std={f1_sd}");
        for (seed, m) in &self.per_seed {
            let _ = writeln!(s, "seed.{seed}.roc_auc={}", m.roc_auc);
            let _ = writeln!(s, "seed.{seed}.pr_auc={}", m.pr_auc);
            let _ = writeln!(s, "seed.{seed}.f1={}", m.f1);
        }
        s
    }
}

pub fn scored_frames_csv(frames: &[ScoredFrame]) -> String {
    let mut s = String::from("recording_id,start,label,y1\n");
    for f in frames {
        let _ = writeln!(s, "{},{},{},{}", f.recording_id, f.start, f.label, f.y1);
    }
    s
}

pub fn patient_reports_csv(reports: &[PatientReport]) -> String {
    let mut s = String::from("recording_id,label,predicted_af,total_frames,accuracy,group\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.recording_id,
            r.label,
            r.predicted_af,
            r.total_frames,
            r.accuracy,
            r.group.as_str()
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub length: usize,
    pub y1: f64,
    pub seconds: f64,
}

/// Frame lengths `min, min+step, …` up to and including `max`.
pub fn sweep_lengths(min: usize, max: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 || min == 0 || min > max {
        return Err(TmfError::Config(format!(
            "invalid sweep range {min}..={max} step {step}"
        )));
    }
    Ok((min..=max).step_by(step).collect())
}

/// Predicts `y1` on the leading frame of each length, timing each
/// prediction (encoding included) separately.
pub fn frame_length_sweep(
    model: &TmfModel,
    recording: &TimeSeries,
    lengths: &[usize],
) -> Result<Vec<SweepPoint>> {
    if let Some(&too_long) = lengths.iter().find(|&&l| l > recording.len()) {
        return Err(TmfError::FrameTooLong {
            length: too_long,
            available: recording.len(),
        });
    }
    let normalized = model.preprocess.normalize_recording(recording);
    lengths
        .iter()
        .map(|&length| {
            let t0 = Instant::now();
            let y1 = model.predict_values(&normalized.values[..length])?.af();
            Ok(SweepPoint {
                length,
                y1,
                seconds: t0.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("length,y1,seconds\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.length, p.y1, p.seconds);
    }
    s
}
