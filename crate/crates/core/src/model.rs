//! The full classifier: preprocessing → TMF image → extractor → GAP → head.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::classify::{
    self, cross_entropy_logit_grad, cross_entropy_loss, logreg_backward, logreg_logits,
    mlp_backward, mlp_forward, mlp_logits, LabeledVector, LogRegParams, MlpParams, Parameters,
    Penalty, Prediction, TrainConfig, TrainLog,
};
use crate::error::{Result, TmfError};
use crate::extractor::{
    cnn_backward_traced, cnn_forward, cnn_forward_traced, gap, gap_backward, CnnConfig, CnnParams,
    ConvBlock, FeatureMap, FeatureVector,
};
use crate::signal::{normalize, ClassLabel, NormMode, TimeSeries};
use crate::tmf::{downsample_tmf, encode_tmf, quantize_f32, scale_channels, tau_max, ScaleMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMFM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How a raw recording becomes extractor input.
///
/// `rows × cols` is the pooled image size for frames of `frame_len`
/// samples. Other lengths pool onto a grid scaled by the same factor, so
/// the fully convolutional extractor sees comparable resolution at every
/// length. `rows = cols = 0` keeps the full `τ_max × (N−2)` resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocess {
    pub normalize: NormMode,
    pub frame_len: usize,
    pub rows: usize,
    pub cols: usize,
    pub scale: ScaleMode,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            normalize: NormMode::ZScore,
            frame_len: 3000,
            rows: 128,
            cols: 256,
            scale: ScaleMode::MinMax01,
        }
    }
}

/// Smallest pooled side used for lengths other than the reference one,
/// so that short frames still survive the extractor's pooling stages.
pub const MIN_POOLED_SIDE: usize = 16;

fn scaled_dim(target: usize, src: usize, reference: usize) -> usize {
    let v = (target as f64 * src as f64 / reference as f64).round() as usize;
    v.max(MIN_POOLED_SIDE).min(src)
}

impl Preprocess {
    pub fn full_resolution(&self) -> bool {
        self.rows == 0 && self.cols == 0
    }

    /// Pooled image dims for a frame of `len` samples.
    pub fn target_dims(&self, len: usize) -> Result<(usize, usize)> {
        let (src_r, src_c) = (tau_max(len)?, len - 2);
        if self.full_resolution() {
            return Ok((src_r, src_c));
        }
        if len == self.frame_len {
            return Ok((self.rows, self.cols));
        }
        let (ref_r, ref_c) = (tau_max(self.frame_len)?, self.frame_len - 2);
        Ok((scaled_dim(self.rows, src_r, ref_r), scaled_dim(self.cols, src_c, ref_c)))
    }

    pub fn normalize_recording(&self, ts: &TimeSeries) -> TimeSeries {
        normalize(ts, self.normalize)
    }

    /// Encoded and pooled image in signal units, rounded to `f32` so that
    /// cached copies are bit-identical to fresh ones.
    pub fn pooled_tmf(&self, frame_values: &[f64]) -> Result<Array3<f64>> {
        let img = encode_tmf(frame_values)?.into_array();
        let (r, c) = self.target_dims(frame_values.len())?;
        let mut pooled = downsample_tmf(&img, r, c)?;
        quantize_f32(&mut pooled);
        Ok(pooled)
    }

    pub fn finish(&self, pooled: &Array3<f64>) -> Array3<f64> {
        scale_channels(pooled, self.scale)
    }

    /// Extractor input for one (already normalized) frame.
    pub fn image_for(&self, frame_values: &[f64]) -> Result<Array3<f64>> {
        self.pooled_tmf(frame_values).map(|p| self.finish(&p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Builtin(CnnParams),
    /// Feature maps come from an external backbone.
    Imported { channels: usize },
}

impl Extractor {
    pub fn channels(&self) -> usize {
        match self {
            Extractor::Builtin(p) => p.output_channels(),
            Extractor::Imported { channels } => *channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Mlp(MlpParams),
    LogReg(LogRegParams),
}

impl Head {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Mlp(_) => "mlp",
            Head::LogReg(_) => "logreg",
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Head::Mlp(p) => p.inputs,
            Head::LogReg(p) => p.weights.len(),
        }
    }

    pub fn logits(&self, h: &[f64]) -> Result<[f64; 2]> {
        match self {
            Head::Mlp(p) => mlp_logits(p, h),
            Head::LogReg(p) => logreg_logits(p, h),
        }
    }

    pub fn predict(&self, h: &[f64]) -> Result<Prediction> {
        self.logits(h).map(Prediction::from_logits)
    }

    /// Gradient w.r.t. `h` of a scalar whose gradient w.r.t. the logits is
    /// `dlogits`.
    pub fn input_gradient(&self, h: &[f64], dlogits: [f64; 2]) -> Result<Vec<f64>> {
        match self {
            Head::Mlp(p) => {
                let f = mlp_forward(p, h)?;
                Ok(mlp_backward(p, h, &f, dlogits).1)
            }
            Head::LogReg(p) => {
                logreg_logits(p, h)?;
                Ok(logreg_backward(p, dlogits))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmfModel {
    pub preprocess: Preprocess,
    pub extractor: Extractor,
    pub head: Head,
}

impl TmfModel {
    pub fn feature_map(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        match &self.extractor {
            Extractor::Builtin(p) => cnn_forward(p, image),
            Extractor::Imported { .. } => Err(TmfError::UnsupportedModel(
                "model uses imported feature maps; it cannot encode images itself".into(),
            )),
        }
    }

    pub fn predict_feature_map(&self, a: &FeatureMap) -> Result<Prediction> {
        self.head.predict(gap(a).as_slice())
    }

    pub fn predict_image(&self, image: &Array3<f64>) -> Result<Prediction> {
        self.predict_feature_map(&self.feature_map(image)?)
    }

    /// Prediction for one frame of an already-normalized recording.
    pub fn predict_values(&self, frame_values: &[f64]) -> Result<Prediction> {
        self.predict_image(&self.preprocess.image_for(frame_values)?)
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Array3<f64>,
    pub label: ClassLabel,
}

/// CNN and MLP parameters trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub cnn: CnnParams,
    pub mlp: MlpParams,
}

impl Parameters for JointParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.cnn.tensors();
        t.extend(self.mlp.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.cnn.tensors_mut();
        t.extend(self.mlp.tensors_mut());
        t
    }
}

/// Loss and parameter gradient of one labelled image under the joint model.
pub fn joint_sample_gradient(
    params: &JointParams,
    image: &Array3<f64>,
    label: ClassLabel,
) -> Result<(JointParams, f64)> {
    let (a, trace) = cnn_forward_traced(&params.cnn, image)?;
    let h = gap(&a);
    let f = mlp_forward(&params.mlp, h.as_slice())?;
    let y = Prediction::from_logits(f.logits);
    let loss = cross_entropy_loss(&y, label);
    let (g_mlp, dh) = mlp_backward(&params.mlp, h.as_slice(), &f, cross_entropy_logit_grad(&y, label));
    let da = gap_backward(a.dims(), &dh);
    let (g_cnn, _) = cnn_backward_traced(&params.cnn, &trace, &da, false)?;
    Ok((JointParams { cnn: g_cnn, mlp: g_mlp }, loss))
}

fn joint_predict(params: &JointParams, image: &Array3<f64>) -> Result<Prediction> {
    let h = gap(&cnn_forward(&params.cnn, image)?);
    classify::mlp_predict(&params.mlp, h.as_slice())
}

fn check_images(split: &[LabeledImage], name: &'static str) -> Result<()> {
    if split.is_empty() {
        return Err(TmfError::EmptySplit(name));
    }
    Ok(())
}

/// Trains the built-in CNN and the MLP head end to end with Adam.
///
/// The extractor is initialized from `cnn.seed`, the head from
/// `config.seed`. Per-sample gradients are computed in parallel and summed
/// in sample order, so the result does not depend on the thread count.
pub fn train_end_to_end(
    train: &[LabeledImage],
    val: &[LabeledImage],
    cnn: &CnnConfig,
    config: &TrainConfig,
) -> Result<(JointParams, TrainLog)> {
    check_images(train, "train")?;
    check_images(val, "validation")?;
    let init = JointParams {
        cnn: CnnParams::init(cnn)?,
        mlp: MlpParams::init(cnn.output_channels(), config.seed),
    };
    classify::train::fit(
        init,
        train.len(),
        config,
        |p, batch| {
            let per: Vec<(JointParams, f64)> = batch
                .par_iter()
                .map(|&i| joint_sample_gradient(p, &train[i].image, train[i].label))
                .collect::<Result<_>>()?;
            let mut iter = per.into_iter();
            let (mut grads, mut loss) = iter.next().expect("non-empty batch");
            for (g, l) in iter {
                grads.accumulate(&g);
                loss += l;
            }
            Ok((grads, loss))
        },
        |p| {
            let per: Vec<(f64, bool)> = val
                .par_iter()
                .map(|s| {
                    let y = joint_predict(p, &s.image)?;
                    Ok((cross_entropy_loss(&y, s.label), y.predicted(0.5) == s.label))
                })
                .collect::<Result<_>>()?;
            let n = per.len() as f64;
            Ok((
                per.iter().map(|v| v.0).sum::<f64>() / n,
                per.iter().filter(|v| v.1).count() as f64 / n,
            ))
        },
    )
}

/// GAP feature vectors of a fixed extractor, computed in parallel.
pub fn extract_features(cnn: &CnnParams, images: &[LabeledImage]) -> Result<Vec<LabeledVector>> {
    images
        .par_iter()
        .map(|s| {
            Ok(LabeledVector {
                h: gap(&cnn_forward(cnn, &s.image)?),
                label: s.label,
            })
        })
        .collect()
}

fn head_tag(h: &Head) -> u32 {
    match h {
        Head::Mlp(_) => 1,
        Head::LogReg(_) => 2,
    }
}

fn penalty_tag(p: Penalty) -> u32 {
    match p {
        Penalty::L2 => 0,
        Penalty::L1 => 1,
    }
}

/// Serializes a model.
///
/// Layout (all little-endian): `TMFM`, u32 version, u32 head tag
/// (1 = MLP, 2 = logistic regression), u32 extractor tag (0 = imported,
/// 1 = built-in CNN), u32 normalization, u32 frame length, u32 rows,
/// u32 cols, u32 scale; for the CNN u32 block count then per block u32
/// in/out channels and pool flag; for an imported extractor u32 channel
/// count; the head shape (MLP: u32 inputs, u32 hidden; LR: u32 inputs,
/// u32 penalty, f64 strength); then every parameter as f64 (CNN blocks'
/// weights and biases in order, then the head's tensors).
pub fn encode_checkpoint(model: &TmfModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let pp = &model.preprocess;
    w.magic(CHECKPOINT_MAGIC)
        .u32(CHECKPOINT_VERSION)
        .u32(head_tag(&model.head))
        .u32(match model.extractor {
            Extractor::Imported { .. } => 0,
            Extractor::Builtin(_) => 1,
        })
        .u32(pp.normalize.tag())
        .u32(binio::dim_u32(pp.frame_len, "frame length")?)
        .u32(binio::dim_u32(pp.rows, "rows")?)
        .u32(binio::dim_u32(pp.cols, "cols")?)
        .u32(pp.scale.tag());
    match &model.extractor {
        Extractor::Builtin(cnn) => {
            w.u32(binio::dim_u32(cnn.blocks.len(), "blocks")?);
            for b in &cnn.blocks {
                w.u32(binio::dim_u32(b.in_channels, "channels")?)
                    .u32(binio::dim_u32(b.out_channels, "channels")?)
                    .u32(u32::from(b.pool));
            }
        }
        Extractor::Imported { channels } => {
            w.u32(binio::dim_u32(*channels, "channels")?);
        }
    }
    match &model.head {
        Head::Mlp(p) => {
            w.u32(binio::dim_u32(p.inputs, "inputs")?)
                .u32(binio::dim_u32(classify::HIDDEN_UNITS, "hidden")?);
        }
        Head::LogReg(p) => {
            w.u32(binio::dim_u32(p.weights.len(), "inputs")?)
                .u32(penalty_tag(p.penalty))
                .f64(p.penalty_strength);
        }
    }
    if let Extractor::Builtin(cnn) = &model.extractor {
        for t in cnn.tensors() {
            t.iter().for_each(|&v| {
                w.f64(v);
            });
        }
    }
    match &model.head {
        Head::Mlp(p) => {
            for t in p.tensors() {
                t.iter().for_each(|&v| {
                    w.f64(v);
                });
            }
        }
        Head::LogReg(p) => {
            p.weights.iter().for_each(|&v| {
                w.f64(v);
            });
            w.f64(p.bias);
        }
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TmfModel> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TmfError::MalformedInput(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let head = r.u32()?;
    let extractor = r.u32()?;
    let preprocess = Preprocess {
        normalize: NormMode::from_tag(r.u32()?)?,
        frame_len: r.u32()? as usize,
        rows: r.u32()? as usize,
        cols: r.u32()? as usize,
        scale: ScaleMode::from_tag(r.u32()?)?,
    };
    let mut cnn = match extractor {
        1 => {
            let n = r.u32()? as usize;
            let mut blocks = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                let (cin, cout, pool) = (r.u32()? as usize, r.u32()? as usize, r.u32()?);
                blocks.push(ConvBlock {
                    in_channels: cin,
                    out_channels: cout,
                    pool: pool != 0,
                    weights: Vec::new(),
                    bias: Vec::new(),
                });
            }
            if blocks.is_empty() {
                return Err(TmfError::MalformedInput("checkpoint CNN has no blocks".into()));
            }
            Some(CnnParams { blocks })
        }
        0 => None,
        t => return Err(TmfError::MalformedInput(format!("unknown extractor tag {t}"))),
    };
    let imported_channels = if cnn.is_none() { Some(r.u32()? as usize) } else { None };
    enum Shape {
        Mlp(usize),
        LogReg(usize, Penalty, f64),
    }
    let shape = match head {
        1 => {
            let inputs = r.u32()? as usize;
            let hidden = r.u32()? as usize;
            if hidden != classify::HIDDEN_UNITS {
                return Err(TmfError::ShapeMismatch(format!("hidden layer of {hidden} units")));
            }
            Shape::Mlp(inputs)
        }
        2 => {
            let inputs = r.u32()? as usize;
            let penalty = match r.u32()? {
                0 => Penalty::L2,
                1 => Penalty::L1,
                t => return Err(TmfError::MalformedInput(format!("unknown penalty tag {t}"))),
            };
            Shape::LogReg(inputs, penalty, r.f64()?)
        }
        t => return Err(TmfError::MalformedInput(format!("unknown head tag {t}"))),
    };
    if let Some(cnn) = cnn.as_mut() {
        for b in cnn.blocks.iter_mut() {
            b.weights = r.f64s(9 * b.in_channels * b.out_channels)?;
            b.bias = r.f64s(b.out_channels)?;
        }
    }
    let head = match shape {
        Shape::Mlp(inputs) => {
            let mut p = MlpParams::zeros(inputs);
            for t in p.tensors_mut() {
                let vals = r.f64s(t.len())?;
                t.copy_from_slice(&vals);
            }
            Head::Mlp(p)
        }
        Shape::LogReg(inputs, penalty, strength) => Head::LogReg(LogRegParams {
            weights: r.f64s(inputs)?,
            bias: r.f64()?,
            penalty,
            penalty_strength: strength,
        }),
    };
    r.finish()?;
    let extractor = match (cnn, imported_channels) {
        (Some(c), _) => Extractor::Builtin(c),
        (None, Some(ch)) => Extractor::Imported { channels: ch },
        (None, None) => unreachable!(),
    };
    if extractor.channels() != head.inputs() {
        return Err(TmfError::ShapeMismatch(format!(
            "extractor emits {} channels, head takes {}",
            extractor.channels(),
            head.inputs()
        )));
    }
    Ok(TmfModel {
        preprocess,
        extractor,
        head,
    })
}

/// Writes the binary checkpoint and a `key=value` text sidecar at
/// `<path>.meta`.
pub fn write_checkpoint(path: &Path, model: &TmfModel, meta: &[(String, String)]) -> Result<()> {
    binio::write_atomic(path, &encode_checkpoint(model)?)?;
    let mut text = String::new();
    let _ = writeln!(text, "format=TMFM");
    let _ = writeln!(text, "format_version={CHECKPOINT_VERSION}");
    let _ = writeln!(text, "head={}", model.head.kind());
    for (k, v) in meta {
        let _ = writeln!(text, "{k}={v}");
    }
    binio::write_atomic(&meta_path(path), text.as_bytes())
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

pub fn read_checkpoint(path: &Path) -> Result<TmfModel> {
    decode_checkpoint(&binio::read_file(path)?)
}

/// Builds the model from jointly trained parameters.
pub fn model_from_joint(preprocess: Preprocess, params: JointParams) -> TmfModel {
    TmfModel {
        preprocess,
        extractor: Extractor::Builtin(params.cnn),
        head: Head::Mlp(params.mlp),
    }
}

/// Convenience for callers that only have feature vectors.
pub fn feature_vectors(h: &[FeatureVector], labels: &[ClassLabel]) -> Vec<LabeledVector> {
    h.iter()
        .cloned()
        .zip(labels.iter().copied())
        .map(|(h, label)| LabeledVector { h, label })
        .collect()
}
