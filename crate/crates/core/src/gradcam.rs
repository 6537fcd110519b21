//! Class activation maps for TMF classifiers and their symmetrization
//! under the rotational pairing of TMF cells.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::binio;
use crate::error::{Result, TmfError};
use crate::extractor::{gap, gap_backward, FeatureMap};
use crate::model::{Head, TmfModel};
use crate::signal::ClassLabel;
use crate::tmf::{encode_image_bytes, Masker};

/// Which score is differentiated.
///
/// `Logit` is the usual choice for Grad-CAM. `Probability` differentiates
/// the softmax output instead; its gradient carries an extra factor
/// `y_c(1 − y_c)` per class pair, which rescales α and can flip the sign
/// of weak channels when the prediction is confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CamTarget {
    #[default]
    Logit,
    Probability,
}

impl CamTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            CamTarget::Logit => "logit",
            CamTarget::Probability => "probability",
        }
    }
}

impl FromStr for CamTarget {
    type Err = TmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(CamTarget::Logit),
            "probability" | "prob" => Ok(CamTarget::Probability),
            _ => Err(TmfError::Config(format!("unknown CAM target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `W × H`, nonnegative.
    pub map: Array2<f64>,
    pub class: ClassLabel,
    /// One weight per feature-map channel.
    pub alpha: Vec<f64>,
}

fn score_logit_grad(head: &Head, h: &[f64], class: ClassLabel, target: CamTarget) -> Result<[f64; 2]> {
    let c = class.index();
    let mut d = [0.0; 2];
    match target {
        CamTarget::Logit => d[c] = 1.0,
        CamTarget::Probability => {
            let y = head.predict(h)?.y;
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = y[c] * (f64::from(u8::from(j == c)) - y[j]);
            }
        }
    }
    Ok(d)
}

/// Gradient of the class score w.r.t. the pooled feature vector.
pub fn score_gradient(head: &Head, h: &[f64], class: ClassLabel, target: CamTarget) -> Result<Vec<f64>> {
    let d = score_logit_grad(head, h, class, target)?;
    head.input_gradient(h, d)
}

/// Grad-CAM on a given feature map.
///
/// α is the spatial mean of `∂score/∂A`, obtained by pushing the head
/// gradient back through global average pooling.
pub fn grad_cam_on_map(head: &Head, a: &FeatureMap, class: ClassLabel, target: CamTarget) -> Result<CamMap> {
    let h = gap(a);
    let dh = score_gradient(head, h.as_slice(), class, target)?;
    let (w, hh, s) = a.dims();
    let da = gap_backward((w, hh, s), &dh);
    let area = (w * hh) as f64;
    let mut alpha = vec![0.0; s];
    for px in da.as_slice().expect("standard layout").chunks_exact(s) {
        for (al, g) in alpha.iter_mut().zip(px) {
            *al += g;
        }
    }
    alpha.iter_mut().for_each(|v| *v /= area);
    let map = Array2::from_shape_fn((w, hh), |(i, j)| {
        let px = a.data.slice(ndarray::s![i, j, ..]);
        px.iter().zip(&alpha).map(|(x, al)| x * al).sum::<f64>().max(0.0)
    });
    Ok(CamMap { map, class, alpha })
}

/// Grad-CAM for an extractor input image under the model's own extractor.
pub fn grad_cam(model: &TmfModel, image: &Array3<f64>, class: ClassLabel, target: CamTarget) -> Result<CamMap> {
    let a = model.feature_map(image)?;
    grad_cam_on_map(&model.head, &a, class, target)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear, corner-aligned upsampling.
pub fn upsample_cam(map: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (r, c) = map.dim();
    if r == 0 || c == 0 || rows < r || cols < c {
        return Err(TmfError::BadTargetShape(format!(
            "cannot upsample {r}×{c} to {rows}×{cols}"
        )));
    }
    let ry = sample_positions(r, rows);
    let cx = sample_positions(c, cols);
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (y0, y1, ty) = ry[i];
        let (x0, x1, tx) = cx[j];
        let top = lerp(map[[y0, x0]], map[[y0, x1]], tx);
        let bottom = lerp(map[[y1, x0]], map[[y1, x1]], tx);
        lerp(top, bottom, ty)
    }))
}

/// Averages each cell with its rotational partner unless both are
/// genuine motif cells.
pub fn symmetrize_cam(map: &Array2<f64>, masker: &Masker) -> Result<Array2<f64>> {
    if map.dim() != (masker.rows(), masker.cols()) {
        return Err(TmfError::ShapeMismatch(format!(
            "map is {:?}, masker is {}×{}",
            map.dim(),
            masker.rows(),
            masker.cols()
        )));
    }
    Ok(Array2::from_shape_fn(map.dim(), |(i, j)| {
        let (tau, n) = (i + 1, j + 1);
        let (tp, np) = masker.partner(tau, n);
        if masker.is_fill(tau, n) || masker.is_fill(tp, np) {
            (map[[i, j]] + map[[tp - 1, np - 1]]) / 2.0
        } else {
            map[[i, j]]
        }
    }))
}

#[derive(Debug, Clone)]
pub struct FrameExplanation {
    pub cam: CamMap,
    /// Symmetrized map at full TMF resolution `τ_max × (N−2)`.
    pub symmetric: Array2<f64>,
}

/// Grad-CAM of one normalized frame, upsampled to its TMF grid and
/// symmetrized.
pub fn explain_frame(
    model: &TmfModel,
    frame_values: &[f64],
    class: ClassLabel,
    target: CamTarget,
) -> Result<FrameExplanation> {
    let image = model.preprocess.image_for(frame_values)?;
    let cam = grad_cam(model, &image, class, target)?;
    let masker = Masker::new(frame_values.len())?;
    let up = upsample_cam(&cam.map, masker.rows(), masker.cols())?;
    let symmetric = symmetrize_cam(&up, &masker)?;
    Ok(FrameExplanation { cam, symmetric })
}

/// `tau,n,value` rows with 1-based indices.
pub fn cam_csv(map: &Array2<f64>) -> String {
    let mut s = String::with_capacity(map.len() * 16);
    s.push_str("tau,n,value\n");
    for ((i, j), v) in map.indexed_iter() {
        let _ = writeln!(s, "{},{},{}", i + 1, j + 1, v);
    }
    s
}

pub fn write_cam_csv(path: &Path, map: &Array2<f64>) -> Result<()> {
    binio::write_atomic(path, cam_csv(map).as_bytes())
}

/// Single-channel image in the TMF image file format.
pub fn write_cam_image(path: &Path, map: &Array2<f64>) -> Result<()> {
    let img = map.clone().insert_axis(ndarray::Axis(2));
    binio::write_atomic(path, &encode_image_bytes(&img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{LogRegParams, MlpParams, Penalty};
    use crate::extractor::{CnnConfig, CnnParams, Provenance};
    use crate::model::{Extractor, Preprocess};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, s: usize) -> FeatureMap {
        let data = Array3::from_shape_fn((w, h, s), |_| rng.random_range(0.0..2.0));
        FeatureMap::new(data, Provenance::Imported).unwrap()
    }

    fn fd_score_grad(head: &Head, h: &[f64], class: ClassLabel, target: CamTarget) -> Vec<f64> {
        let score = |x: &[f64]| {
            let z = head.logits(x).unwrap();
            match target {
                CamTarget::Logit => z[class.index()],
                CamTarget::Probability => head.predict(x).unwrap().y[class.index()],
            }
        };
        let eps = 1e-6;
        (0..h.len())
            .map(|k| {
                let mut p = h.to_vec();
                let mut m = h.to_vec();
                p[k] += eps;
                m[k] -= eps;
                (score(&p) - score(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn alpha_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let head = Head::Mlp(MlpParams::init(6, seed));
            let a = random_map(&mut rng, 4, 5, 6);
            let h = gap(&a);
            for target in [CamTarget::Logit, CamTarget::Probability] {
                for class in [ClassLabel::Af, ClassLabel::NonAf] {
                    let cam = grad_cam_on_map(&head, &a, class, target).unwrap();
                    let fd = fd_score_grad(&head, h.as_slice(), class, target);
                    for (al, g) in cam.alpha.iter().zip(&fd) {
                        let expected = g / 20.0;
                        assert!(
                            (al - expected).abs() <= 1e-5 * expected.abs().max(1e-6),
                            "{al} vs {expected}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_map_gives_zero_cam() {
        let head = Head::Mlp(MlpParams::init(3, 1));
        let a = FeatureMap {
            data: Array3::zeros((3, 4, 3)),
            provenance: Provenance::Imported,
        };
        let cam = grad_cam_on_map(&head, &a, ClassLabel::Af, CamTarget::Logit).unwrap();
        assert!(cam.map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_positive_channel_passes_through() {
        let head = Head::LogReg(LogRegParams {
            weights: vec![2.0],
            bias: 0.0,
            penalty: Penalty::L2,
            penalty_strength: 0.0,
        });
        let data = Array3::from_shape_fn((2, 3, 1), |(i, j, _)| 1.0 + (i * 3 + j) as f64);
        let a = FeatureMap::new(data.clone(), Provenance::Imported).unwrap();
        let cam = grad_cam_on_map(&head, &a, ClassLabel::Af, CamTarget::Logit).unwrap();
        // score = 2·mean(A), so α = 2/6
        let alpha = cam.alpha[0];
        assert!((alpha - 2.0 / 6.0).abs() < 1e-15);
        for ((i, j), v) in cam.map.indexed_iter() {
            assert_eq!(*v, alpha * data[[i, j, 0]]);
        }
    }

    #[test]
    fn imported_model_needs_a_map() {
        let model = TmfModel {
            preprocess: Preprocess::default(),
            extractor: Extractor::Imported { channels: 3 },
            head: Head::Mlp(MlpParams::init(3, 0)),
        };
        let img = Array3::zeros((8, 8, 3));
        assert!(matches!(
            grad_cam(&model, &img, ClassLabel::Af, CamTarget::Logit),
            Err(TmfError::UnsupportedModel(_))
        ));
    }

    #[test]
    fn upsample_examples() {
        let c = Array2::from_elem((3, 2), 0.7);
        assert!(upsample_cam(&c, 9, 11).unwrap().iter().all(|&v| v == 0.7));
        let line = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(upsample_cam(&line, 1, 3).unwrap().into_raw_vec_and_offset().0, vec![0.0, 0.5, 1.0]);
        let sq = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_cam(&sq, 4, 4).unwrap();
        assert_eq!((up[[0, 0]], up[[0, 3]], up[[3, 0]], up[[3, 3]]), (1.0, 2.0, 3.0, 4.0));
        assert!(matches!(upsample_cam(&sq, 1, 4), Err(TmfError::BadTargetShape(_))));
    }

    #[test]
    fn symmetrize_five_sample_grid() {
        let masker = Masker::new(5).unwrap();
        let l = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap();
        let g = symmetrize_cam(&l, &masker).unwrap();
        // (2,2) pairs with (1,2) and (2,3) with (1,1); (1,3) and (2,1) are
        // both motif cells and partner each other.
        assert_eq!(g[[1, 1]], 3.5);
        assert_eq!(g[[0, 1]], 3.5);
        assert_eq!(g[[1, 2]], 4.0);
        assert_eq!(g[[0, 0]], 4.0);
        assert_eq!(g[[0, 2]], 3.0);
        assert_eq!(g[[1, 0]], 4.0);
        let wrong = Array2::zeros((3, 3));
        assert!(matches!(symmetrize_cam(&wrong, &masker), Err(TmfError::ShapeMismatch(_))));
    }

    #[test]
    fn explain_frame_has_tmf_resolution() {
        let cnn = CnnParams::init(&CnnConfig::small(2)).unwrap();
        let model = TmfModel {
            preprocess: Preprocess {
                frame_len: 64,
                rows: 16,
                cols: 32,
                ..Preprocess::default()
            },
            extractor: Extractor::Builtin(cnn),
            head: Head::Mlp(MlpParams::init(16, 1)),
        };
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.4).sin()).collect();
        let e = explain_frame(&model, &x, ClassLabel::Af, CamTarget::Logit).unwrap();
        assert_eq!(e.symmetric.dim(), (31, 62));
        assert!(e.symmetric.iter().all(|&v| v >= 0.0));
        let csv = cam_csv(&e.symmetric);
        assert_eq!(csv.lines().count(), 1 + 31 * 62);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,1,"));
    }

    proptest! {
        #[test]
        fn symmetric_and_idempotent(n in 3usize..40, seed in 0u64..1000) {
            let masker = Masker::new(n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Array2::from_shape_fn((masker.rows(), masker.cols()), |_| rng.random_range(0.0..1.0));
            let g = symmetrize_cam(&l, &masker).unwrap();
            for tau in 1..=masker.rows() {
                for col in 1..=masker.cols() {
                    let (tp, np) = masker.partner(tau, col);
                    if masker.is_fill(tau, col) || masker.is_fill(tp, np) {
                        prop_assert_eq!(g[[tau - 1, col - 1]], g[[tp - 1, np - 1]]);
                    } else {
                        prop_assert_eq!(g[[tau - 1, col - 1]], l[[tau - 1, col - 1]]);
                    }
                }
            }
            prop_assert_eq!(symmetrize_cam(&g, &masker).unwrap(), g);
        }

        #[test]
        fn cam_is_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = Head::Mlp(MlpParams::init(4, seed));
            let data = Array3::from_shape_fn((3, 3, 4), |_| rng.random_range(-1.0..1.0));
            let a = FeatureMap::new(data, Provenance::Imported).unwrap();
            let cam = grad_cam_on_map(&head, &a, ClassLabel::Af, CamTarget::Logit).unwrap();
            prop_assert!(cam.map.iter().all(|&v| v >= 0.0));
        }
    }
}
