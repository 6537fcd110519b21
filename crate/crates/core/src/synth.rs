//! Synthetic ECG-like pulse trains for tests, demos and benchmarks.
//!
//! Regular trains have a fixed inter-pulse interval and a small bump
//! before every pulse, loosely mimicking P-wave + QRS. Irregular trains
//! have randomly jittered intervals and no leading bump.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::signal::{ClassLabel, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseShape {
    pub pulse_width: f64,
    pub pulse_height: f64,
    /// Samples between the leading bump and the pulse peak.
    pub lead_offset: f64,
    pub lead_width: f64,
    pub lead_height: f64,
    pub noise_std: f64,
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape {
            pulse_width: 3.0,
            pulse_height: 1.0,
            lead_offset: 30.0,
            lead_width: 6.0,
            lead_height: 0.2,
            noise_std: 0.02,
        }
    }
}

fn render(len: usize, peaks: &[f64], shape: &PulseShape, lead: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, shape.noise_std.max(0.0)).expect("finite std");
    let bump = |t: f64, centre: f64, width: f64| (-0.5 * ((t - centre) / width).powi(2)).exp();
    (0..len)
        .map(|i| {
            let t = i as f64;
            let mut v = noise.sample(rng);
            for &p in peaks {
                if (t - p).abs() < 6.0 * shape.pulse_width {
                    v += shape.pulse_height * bump(t, p, shape.pulse_width);
                }
                let lp = p - shape.lead_offset;
                if lead && (t - lp).abs() < 6.0 * shape.lead_width {
                    v += shape.lead_height * bump(t, lp, shape.lead_width);
                }
            }
            v
        })
        .collect()
}

/// Peaks every `interval` samples from a random phase.
fn regular_peaks(len: usize, interval: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = rng.random_range(0.0..interval);
    let mut peaks = Vec::new();
    while t < len as f64 + interval {
        peaks.push(t);
        t += interval;
    }
    peaks
}

/// Fixed-interval train with leading bumps.
pub fn regular_train(id: &str, len: usize, interval: f64, shape: &PulseShape, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peaks = regular_peaks(len, interval, &mut rng);
    TimeSeries::new(id, render(len, &peaks, shape, true, &mut rng), ClassLabel::NonAf)
}

/// Train whose intervals are drawn uniformly from
/// `mean_interval · [1 − jitter, 1 + jitter]`, without leading bumps.
pub fn jittered_train(
    id: &str,
    len: usize,
    mean_interval: f64,
    jitter: f64,
    shape: &PulseShape,
    seed: u64,
) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (mean_interval * (1.0 - jitter), mean_interval * (1.0 + jitter));
    let mut t = rng.random_range(0.0..mean_interval);
    let mut peaks = Vec::new();
    while t < len as f64 + hi {
        peaks.push(t);
        t += rng.random_range(lo..=hi);
    }
    TimeSeries::new(id, render(len, &peaks, shape, false, &mut rng), ClassLabel::Af)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleJitter {
    pub series: TimeSeries,
    /// Sample span `[start, end)` between the two pulses bounding the
    /// irregular interval.
    pub span: (usize, usize),
}

/// Regular train with leading bumps except for one interval stretched by
/// `stretch`, which starts at the first pulse at or after `at`.
pub fn single_jitter_train(
    id: &str,
    len: usize,
    interval: f64,
    at: f64,
    stretch: f64,
    shape: &PulseShape,
    seed: u64,
) -> SingleJitter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut peaks = Vec::new();
    let mut t = rng.random_range(0.0..interval);
    let mut span = None;
    while t < len as f64 + interval * stretch {
        peaks.push(t);
        let step = if span.is_none() && t >= at {
            span = Some((t, t + interval * stretch));
            interval * stretch
        } else {
            interval
        };
        t += step;
    }
    let (a, b) = span.expect("jitter position lies inside the recording");
    let series = TimeSeries::new(id, render(len, &peaks, shape, true, &mut rng), ClassLabel::Af);
    SingleJitter {
        series,
        span: (a.round() as usize, (b.round() as usize).min(len)),
    }
}

/// Parameters of a two-class synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortSpec {
    pub per_class: usize,
    pub len: usize,
    /// Per-recording intervals are drawn uniformly from this range.
    pub interval_range: (f64, f64),
    pub jitter: f64,
    pub shape: PulseShape,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            per_class: 60,
            len: 2000,
            interval_range: (150.0, 250.0),
            jitter: 0.4,
            shape: PulseShape::default(),
            seed: 0,
        }
    }
}

/// `per_class` regular (non-AF) and `per_class` jittered (AF)
/// recordings, interleaved by class.
pub fn cohort(spec: &CohortSpec) -> Vec<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.interval_range;
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for i in 0..spec.per_class {
        let (ia, sa) = (rng.random_range(lo..=hi), rng.random());
        let (ib, sb) = (rng.random_range(lo..=hi), rng.random());
        out.push(jittered_train(&format!("af{i:03}"), spec.len, ia, spec.jitter, &spec.shape, sa));
        out.push(regular_train(&format!("nonaf{i:03}"), spec.len, ib, &spec.shape, sb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peak_positions(x: &[f64]) -> Vec<usize> {
        (1..x.len() - 1)
            .filter(|&i| x[i] > 0.6 && x[i] >= x[i - 1] && x[i] > x[i + 1])
            .collect()
    }

    #[test]
    fn regular_train_has_fixed_intervals() {
        let shape = PulseShape { noise_std: 0.0, ..PulseShape::default() };
        let ts = regular_train("r", 2000, 200.0, &shape, 1);
        assert_eq!(ts.label, ClassLabel::NonAf);
        let p = peak_positions(&ts.values);
        assert!(p.len() >= 9);
        for w in p.windows(2) {
            assert!((w[1] - w[0]).abs_diff(200) <= 1);
        }
    }

    #[test]
    fn jittered_train_is_irregular() {
        let shape = PulseShape { noise_std: 0.0, ..PulseShape::default() };
        let ts = jittered_train("j", 2000, 200.0, 0.4, &shape, 2);
        let p = peak_positions(&ts.values);
        let gaps: Vec<usize> = p.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| (115..=285).contains(&g)), "{gaps:?}");
        assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() > 20);
    }

    #[test]
    fn single_jitter_span_brackets_pulses() {
        let shape = PulseShape { noise_std: 0.0, ..PulseShape::default() };
        let sj = single_jitter_train("s", 512, 90.0, 100.0, 1.7, &shape, 3);
        let (a, b) = sj.span;
        assert!(a >= 100 && b - a >= 150);
        let p = peak_positions(&sj.series.values);
        assert!(p.iter().any(|&q| q.abs_diff(a) <= 1));
        assert!(p.iter().all(|&q| q <= a + 1 || q + 1 >= b));
    }

    #[test]
    fn cohort_is_balanced_and_deterministic() {
        let spec = CohortSpec { per_class: 4, len: 600, ..CohortSpec::default() };
        let c = cohort(&spec);
        assert_eq!(c.len(), 8);
        assert_eq!(c.iter().filter(|t| t.label == ClassLabel::Af).count(), 4);
        assert_eq!(c, cohort(&spec));
    }
}
