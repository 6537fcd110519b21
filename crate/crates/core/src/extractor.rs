//! Feature extraction: `A = F(image)` followed by global average pooling.
//!
//! The built-in extractor is a small fully convolutional network of 3×3
//! convolution blocks (zero "same" padding, stride 1, ReLU, optional 2×2
//! max-pool). It stands in for an ImageNet backbone; externally computed
//! backbone maps can be brought in through [`import_feature_map`].
//!
//! Tensors are `rows × cols × channels`, channels innermost.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader, Writer};
use crate::classify::Parameters;
use crate::error::{Result, TmfError};

pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"TMFA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    BuiltinCnn,
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `W × H × S`.
    pub data: Array3<f64>,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, provenance: Provenance) -> Result<Self> {
        let (w, h, s) = data.dim();
        if w == 0 || h == 0 || s == 0 {
            return Err(TmfError::ShapeMismatch(format!("feature map dims {w}×{h}×{s}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TmfError::MalformedInput("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap { data, provenance })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Pooled feature vector `h`, one entry per feature-map channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Global average pooling: `h_s = mean_{i,j} A[i,j,s]`.
pub fn gap(a: &FeatureMap) -> FeatureVector {
    let (w, h, s) = a.dims();
    let area = (w * h) as f64;
    let mut out = vec![0.0; s];
    for px in a.data.as_slice().expect("standard layout").chunks_exact(s) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= area);
    FeatureVector(out)
}

/// Gradient of a loss w.r.t. `A` given its gradient w.r.t. `h = gap(A)`:
/// every spatial position receives `dh_s / (W·H)`.
pub fn gap_backward(dims: (usize, usize, usize), dh: &[f64]) -> Array3<f64> {
    let (w, h, s) = dims;
    let area = (w * h) as f64;
    Array3::from_shape_fn((w, h, s), |(_, _, k)| dh[k] / area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    pub blocks: Vec<BlockConfig>,
    pub input_channels: usize,
    pub seed: u64,
}

impl CnnConfig {
    pub fn new(blocks: Vec<BlockConfig>, seed: u64) -> Self {
        CnnConfig {
            blocks,
            input_channels: 3,
            seed,
        }
    }

    /// Three pooled blocks of 8, 16 and 16 channels.
    pub fn small(seed: u64) -> Self {
        let b = |out_channels| BlockConfig {
            out_channels,
            pool: true,
        };
        CnnConfig::new(vec![b(8), b(16), b(16)], seed)
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(TmfError::Config("extractor needs at least one block".into()));
        }
        if self.input_channels == 0 || self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(TmfError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

const TAPS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: bool,
    /// `[tap][out][in]`, taps in row-major order over the 3×3 window.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBlock {
    fn zeros(in_channels: usize, out_channels: usize, pool: bool) -> Self {
        ConvBlock {
            in_channels,
            out_channels,
            pool,
            weights: vec![0.0; TAPS * out_channels * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_index(&self, ky: usize, kx: usize, out: usize, inp: usize) -> usize {
        ((ky * 3 + kx) * self.out_channels + out) * self.in_channels + inp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub blocks: Vec<ConvBlock>,
}

impl CnnParams {
    /// He-uniform weights (`±√(6/fan_in)`) from the config seed, zero biases.
    pub fn init(config: &CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut in_ch = config.input_channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            let mut block = ConvBlock::zeros(in_ch, b.out_channels, b.pool);
            let limit = (6.0 / (TAPS * in_ch) as f64).sqrt();
            block
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-limit..limit));
            blocks.push(block);
            in_ch = b.out_channels;
        }
        Ok(CnnParams { blocks })
    }

    pub fn zeros_like(&self) -> Self {
        CnnParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock::zeros(b.in_channels, b.out_channels, b.pool))
                .collect(),
        }
    }

    pub fn config(&self, seed: u64) -> CnnConfig {
        CnnConfig {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockConfig {
                    out_channels: b.out_channels,
                    pool: b.pool,
                })
                .collect(),
            input_channels: self.blocks.first().map_or(0, |b| b.in_channels),
            seed,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.in_channels)
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Spatial dims of the output map for a `rows × cols` input.
    pub fn output_dims(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let (mut r, mut c) = (rows, cols);
        if r == 0 || c == 0 {
            return Err(TmfError::ShapeTooSmall(format!("input {rows}×{cols}")));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.pool {
                r /= 2;
                c /= 2;
                if r == 0 || c == 0 {
                    return Err(TmfError::ShapeTooSmall(format!(
                        "input {rows}×{cols} collapses to zero size at block {}",
                        i + 1
                    )));
                }
            }
        }
        Ok((r, c))
    }
}

impl Parameters for CnnParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| [b.weights.as_slice(), b.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [b.weights.as_mut_slice(), b.bias.as_mut_slice()])
            .collect()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    rows: usize,
    cols: usize,
    input: Vec<f64>,
    /// Post-ReLU activations before pooling.
    activated: Vec<f64>,
    /// For each pooled output element, the flat index of its argmax.
    argmax: Vec<usize>,
}

fn check_image(params: &CnnParams, image: &Array3<f64>) -> Result<()> {
    let (r, c, k) = image.dim();
    if k != params.input_channels() {
        return Err(TmfError::ShapeMismatch(format!(
            "image has {k} channels, extractor expects {}",
            params.input_channels()
        )));
    }
    params.output_dims(r, c).map(|_| ())
}

pub fn cnn_forward(params: &CnnParams, image: &Array3<f64>) -> Result<FeatureMap> {
    cnn_forward_traced(params, image).map(|(a, _)| a)
}

pub fn cnn_forward_traced(params: &CnnParams, image: &Array3<f64>) -> Result<(FeatureMap, ForwardTrace)> {
    check_image(params, image)?;
    let (mut rows, mut cols, _) = image.dim();
    let mut x: Vec<f64> = image.iter().copied().collect();
    let mut traces = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let mut z = conv3x3_forward(&x, rows, cols, block);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        let (out, argmax, r2, c2) = if block.pool {
            let (p, idx) = max_pool2(&z, rows, cols, block.out_channels);
            (p, idx, rows / 2, cols / 2)
        } else {
            (z.clone(), Vec::new(), rows, cols)
        };
        traces.push(BlockTrace {
            rows,
            cols,
            input: std::mem::replace(&mut x, out),
            activated: z,
            argmax,
        });
        rows = r2;
        cols = c2;
    }
    let s = params.output_channels();
    let data = Array3::from_shape_vec((rows, cols, s), x).expect("consistent dims");
    Ok((
        FeatureMap {
            data,
            provenance: Provenance::BuiltinCnn,
        },
        ForwardTrace { blocks: traces },
    ))
}

/// Reverse-mode gradients of the forward pass given `dL/dA`.
pub fn cnn_backward(
    params: &CnnParams,
    image: &Array3<f64>,
    grad_out: &Array3<f64>,
) -> Result<(CnnParams, Array3<f64>)> {
    let (_, trace) = cnn_forward_traced(params, image)?;
    let (grads, dx) = cnn_backward_traced(params, &trace, grad_out, true)?;
    let dx = dx.expect("input gradient requested");
    Ok((grads, dx))
}

/// Backward pass reusing a [`ForwardTrace`]; the image gradient is only
/// materialized when `want_input_grad` is set.
pub fn cnn_backward_traced(
    params: &CnnParams,
    trace: &ForwardTrace,
    grad_out: &Array3<f64>,
    want_input_grad: bool,
) -> Result<(CnnParams, Option<Array3<f64>>)> {
    let last = trace.blocks.last().expect("at least one block");
    let lb = params.blocks.last().expect("at least one block");
    let expected = if lb.pool {
        (last.rows / 2, last.cols / 2, lb.out_channels)
    } else {
        (last.rows, last.cols, lb.out_channels)
    };
    if grad_out.dim() != expected {
        return Err(TmfError::ShapeMismatch(format!(
            "output gradient {:?} does not match feature map {:?}",
            grad_out.dim(),
            expected
        )));
    }

    let mut grads = params.zeros_like();
    let mut g: Vec<f64> = grad_out.iter().copied().collect();
    for (bi, (block, bt)) in params.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        // un-pool
        let mut dz = if block.pool {
            let mut d = vec![0.0; bt.activated.len()];
            for (&idx, &gv) in bt.argmax.iter().zip(&g) {
                d[idx] += gv;
            }
            d
        } else {
            g
        };
        // ReLU
        for (d, &a) in dz.iter_mut().zip(&bt.activated) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let need_dx = bi > 0 || want_input_grad;
        g = conv3x3_backward(&bt.input, bt.rows, bt.cols, block, &dz, &mut grads.blocks[bi], need_dx);
    }
    let first = &trace.blocks[0];
    let dx = want_input_grad.then(|| {
        Array3::from_shape_vec((first.rows, first.cols, params.input_channels()), g)
            .expect("consistent dims")
    });
    Ok((grads, dx))
}

/// Patch matrix: one row per output pixel, columns ordered `[tap][in]`,
/// zeros where the kernel overhangs the border.
fn im2col(input: &[f64], rows: usize, cols: usize, cin: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows * cols, TAPS * cin));
    let flat = m.as_slice_mut().expect("standard layout");
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut flat[(r * cols + c) * TAPS * cin..][..TAPS * cin];
            for ky in usize::from(r == 0)..if r + 1 == rows { 2 } else { 3 } {
                for kx in usize::from(c == 0)..if c + 1 == cols { 2 } else { 3 } {
                    let src = ((r + ky - 1) * cols + c + kx - 1) * cin;
                    row[(ky * 3 + kx) * cin..][..cin].copy_from_slice(&input[src..][..cin]);
                }
            }
        }
    }
    m
}

/// Inverse scatter of [`im2col`], summing overlapping contributions.
fn col2im(patches: &Array2<f64>, rows: usize, cols: usize, cin: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols * cin];
    let patches = patches.as_standard_layout();
    let flat = patches.as_slice().expect("standard layout");
    for r in 0..rows {
        for c in 0..cols {
            let row = &flat[(r * cols + c) * TAPS * cin..][..TAPS * cin];
            for ky in usize::from(r == 0)..if r + 1 == rows { 2 } else { 3 } {
                for kx in usize::from(c == 0)..if c + 1 == cols { 2 } else { 3 } {
                    let dst = &mut out[((r + ky - 1) * cols + c + kx - 1) * cin..][..cin];
                    for (d, v) in dst.iter_mut().zip(&row[(ky * 3 + kx) * cin..][..cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

/// Weights as a `(taps·in) × out` matrix matching [`im2col`] columns.
fn weight_matrix(block: &ConvBlock) -> Array2<f64> {
    let (cin, cout) = (block.in_channels, block.out_channels);
    Array2::from_shape_fn((TAPS * cin, cout), |(ti, o)| {
        let (tap, i) = (ti / cin, ti % cin);
        block.weights[(tap * cout + o) * cin + i]
    })
}

fn conv3x3_forward(input: &[f64], rows: usize, cols: usize, block: &ConvBlock) -> Vec<f64> {
    let patches = im2col(input, rows, cols, block.in_channels);
    let mut z = patches.dot(&weight_matrix(block));
    z += &ArrayView1::from(&block.bias);
    z.as_standard_layout().iter().copied().collect()
}

fn conv3x3_backward(
    input: &[f64],
    rows: usize,
    cols: usize,
    block: &ConvBlock,
    dz: &[f64],
    grads: &mut ConvBlock,
    need_dx: bool,
) -> Vec<f64> {
    let (cin, cout) = (block.in_channels, block.out_channels);
    let dz = ArrayView2::from_shape((rows * cols, cout), dz).expect("consistent dims");
    let patches = im2col(input, rows, cols, cin);
    let gw = patches.t().dot(&dz);
    for ((ti, o), g) in gw.indexed_iter() {
        let (tap, i) = (ti / cin, ti % cin);
        grads.weights[(tap * cout + o) * cin + i] += g;
    }
    for (gb, col) in grads.bias.iter_mut().zip(dz.columns()) {
        *gb += col.sum();
    }
    if !need_dx {
        return Vec::new();
    }
    let dpatches = dz.dot(&weight_matrix(block).t());
    col2im(&dpatches, rows, cols, cin)
}

/// 2×2/stride-2 max pool (trailing odd row/col dropped). Ties resolve to
/// the first position in row-major window order.
fn max_pool2(z: &[f64], rows: usize, cols: usize, ch: usize) -> (Vec<f64>, Vec<usize>) {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = vec![0.0; r2 * c2 * ch];
    let mut idx = vec![0usize; r2 * c2 * ch];
    for i in 0..r2 {
        for j in 0..c2 {
            for k in 0..ch {
                let mut best_i = ((2 * i) * cols + 2 * j) * ch + k;
                let mut best = z[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = ((2 * i + dy) * cols + 2 * j + dx) * ch + k;
                    if z[p] > best {
                        best = z[p];
                        best_i = p;
                    }
                }
                let o = (i * c2 + j) * ch + k;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx)
}

/// Reads a `TMFA` file: magic, u32 W, H, S, then row-major f32.
pub fn import_feature_map(path: &Path) -> Result<FeatureMap> {
    import_feature_map_expecting(path, None)
}

/// As [`import_feature_map`], additionally checking the channel count.
pub fn import_feature_map_expecting(path: &Path, channels: Option<usize>) -> Result<FeatureMap> {
    let bytes = binio::read_file(path)?;
    let mut r = Reader::new(&bytes, "feature map");
    r.expect_magic(FEATURE_MAP_MAGIC)?;
    let (w, h, s) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if w == 0 || h == 0 || s == 0 {
        return Err(TmfError::ShapeMismatch(format!("feature map dims {w}×{h}×{s}")));
    }
    if let Some(expected) = channels {
        if expected != s {
            return Err(TmfError::ShapeMismatch(format!(
                "feature map has {s} channels, expected {expected}"
            )));
        }
    }
    let vals = r.f32s(w * h * s)?;
    r.finish()?;
    let data = Array3::from_shape_vec((w, h, s), vals.into_iter().map(f64::from).collect())
        .map_err(|e| TmfError::MalformedInput(e.to_string()))?;
    FeatureMap::new(data, Provenance::Imported)
}

pub fn write_feature_map(path: &Path, a: &Array3<f64>) -> Result<()> {
    let (w, h, s) = a.dim();
    let mut wr = Writer::default();
    wr.magic(FEATURE_MAP_MAGIC)
        .u32(binio::dim_u32(w, "W")?)
        .u32(binio::dim_u32(h, "H")?)
        .u32(binio::dim_u32(s, "S")?);
    for &v in a.iter() {
        wr.f32(v as f32);
    }
    binio::write_atomic(path, &wr.buf)
}

/// Channel-wise spatial mean computed through ndarray, used to cross-check
/// [`gap`] in tests.
pub fn gap_reference(a: &Array3<f64>) -> Vec<f64> {
    a.mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}
