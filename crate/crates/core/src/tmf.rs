//! Triadic Motif Field encoding.
//!
//! A series `x(1..=N)` is turned into a `τ_max × (N−2) × 3` image whose
//! cell `(τ, n)` holds the triadic motif `[x(n), x(n+τ), x(n+2τ)]`. Row `τ`
//! only has `N−2τ` such motifs; the remaining cells (the masker region) are
//! filled with the motif found at the 180°-rotated position
//! `(τ_max−τ+1, N−n−1)`, which is always a valid motif.
//!
//! Small delays resolve beat-level morphology (a few samples around an R
//! peak), while delays close to a beat or an RR interval line up with
//! rhythm-level structure. All indices in this module's public API are
//! 1-based; arrays are addressed with `index − 1`.

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};

use crate::binio::{self, Reader, Writer};
use crate::error::{Result, TmfError};

pub const IMAGE_MAGIC: &[u8; 4] = b"TMFI";

/// `⌊(N−1)/2⌋`, the largest delay for which a motif exists.
pub fn tau_max(n: usize) -> Result<usize> {
    if n < 3 {
        return Err(TmfError::SeriesTooShort(n));
    }
    Ok((n - 1) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriadicMotif {
    pub n: usize,
    pub tau: usize,
    pub triple: [f64; 3],
}

pub fn motif_at(values: &[f64], n: usize, tau: usize) -> Result<TriadicMotif> {
    let len = values.len();
    if n == 0 || tau == 0 || n + 2 * tau > len {
        return Err(TmfError::IndexOutOfRange(format!(
            "motif (n={n}, tau={tau}) needs n ≥ 1, tau ≥ 1 and n + 2·tau ≤ {len}"
        )));
    }
    Ok(TriadicMotif {
        n,
        tau,
        triple: [values[n - 1], values[n + tau - 1], values[n + 2 * tau - 1]],
    })
}

/// Binary grid marking which `(τ, n)` cells have no motif of their own.
///
/// `K[τ,n] = 0` for `n ≤ N−2τ` and 1 otherwise. The grid is described by
/// `N` alone, so it is computed on demand rather than stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Masker {
    series_len: usize,
    tau_max: usize,
}

impl Masker {
    pub fn new(series_len: usize) -> Result<Self> {
        Ok(Masker {
            series_len,
            tau_max: tau_max(series_len)?,
        })
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn rows(&self) -> usize {
        self.tau_max
    }

    pub fn cols(&self) -> usize {
        self.series_len - 2
    }

    /// Number of valid motif columns in row `tau`.
    pub fn valid_cols(&self, tau: usize) -> usize {
        self.series_len - 2 * tau
    }

    /// `K[τ,n]` as a bool: `true` marks the fill region.
    pub fn is_fill(&self, tau: usize, n: usize) -> bool {
        debug_assert!((1..=self.rows()).contains(&tau) && (1..=self.cols()).contains(&n));
        n > self.series_len - 2 * tau
    }

    /// The 180° rotation `(τ, n) ↦ (τ_max−τ+1, N−n−1)`; an involution.
    pub fn partner(&self, tau: usize, n: usize) -> (usize, usize) {
        (self.tau_max - tau + 1, self.series_len - n - 1)
    }

    pub fn to_array(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.rows(), self.cols()), |(r, c)| {
            u8::from(self.is_fill(r + 1, c + 1))
        })
    }
}

/// A `τ_max × (N−2) × 3` encoded image, values in signal units.
#[derive(Debug, Clone, PartialEq)]
pub struct TmfImage {
    pub data: Array3<f64>,
    series_len: usize,
}

impl TmfImage {
    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn masker(&self) -> Masker {
        Masker::new(self.series_len).expect("image built from a valid series")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Value at 1-based `(τ, n)` and 0-based channel `k`.
    pub fn get(&self, tau: usize, n: usize, k: usize) -> f64 {
        self.data[[tau - 1, n - 1, k]]
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }
}

pub fn encode_tmf(values: &[f64]) -> Result<TmfImage> {
    let masker = Masker::new(values.len())?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(TmfError::NonFiniteSample { position: i + 1 });
    }
    let (rows, cols) = (masker.rows(), masker.cols());
    let mut data = Array3::<f64>::zeros((rows, cols, 3));

    // Motif rows V.
    for tau in 1..=rows {
        let mut row = data.index_axis_mut(Axis(0), tau - 1);
        for n in 1..=masker.valid_cols(tau) {
            let i = n - 1;
            row[[i, 0]] = values[i];
            row[[i, 1]] = values[i + tau];
            row[[i, 2]] = values[i + 2 * tau];
        }
    }

    // Fill region: V at the rotated cell is always a genuine motif.
    for tau in 1..=rows {
        for n in masker.valid_cols(tau) + 1..=cols {
            let (tp, np) = masker.partner(tau, n);
            assert!(
                !masker.is_fill(tp, np),
                "rotated source ({tp},{np}) of ({tau},{n}) is not a motif cell"
            );
            for k in 0..3 {
                data[[tau - 1, n - 1, k]] = data[[tp - 1, np - 1, k]];
            }
        }
    }

    Ok(TmfImage {
        data,
        series_len: values.len(),
    })
}

/// Cell boundaries for pooling `src` samples into `dst` cells: cell `i`
/// covers `[⌊i·src/dst⌋, ⌊(i+1)·src/dst⌋)`.
pub(crate) fn cell_bounds(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| (i * src / dst, (i + 1) * src / dst))
        .collect()
}

/// Area-average pooling of a `rows × cols × channels` tensor onto a coarser
/// grid. Equal target dims return an exact copy.
pub fn downsample_tmf(img: &Array3<f64>, target_rows: usize, target_cols: usize) -> Result<Array3<f64>> {
    let (rows, cols, ch) = img.dim();
    if target_rows == 0 || target_cols == 0 || target_rows > rows || target_cols > cols {
        return Err(TmfError::BadTargetShape(format!(
            "cannot pool {rows}×{cols} onto {target_rows}×{target_cols}"
        )));
    }
    if (target_rows, target_cols) == (rows, cols) {
        return Ok(img.clone());
    }
    let rb = cell_bounds(rows, target_rows);
    let cb = cell_bounds(cols, target_cols);
    let mut out = Array3::<f64>::zeros((target_rows, target_cols, ch));
    let mut acc = vec![0.0; ch];
    for (i, &(r0, r1)) in rb.iter().enumerate() {
        for (j, &(c0, c1)) in cb.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in r0..r1 {
                for c in c0..c1 {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += img[[r, c, k]];
                    }
                }
            }
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            for (k, a) in acc.iter().enumerate() {
                out[[i, j, k]] = a / area;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScaleMode {
    #[default]
    MinMax01,
    None,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::MinMax01 => "minmax01",
            ScaleMode::None => "none",
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            ScaleMode::MinMax01 => 0,
            ScaleMode::None => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ScaleMode::MinMax01),
            1 => Ok(ScaleMode::None),
            t => Err(TmfError::MalformedInput(format!("unknown scale tag {t}"))),
        }
    }
}

impl FromStr for ScaleMode {
    type Err = TmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax01" => Ok(ScaleMode::MinMax01),
            "none" => Ok(ScaleMode::None),
            other => Err(TmfError::Config(format!("unknown scale mode {other:?}"))),
        }
    }
}

/// Per-channel min-max scaling to `[0, 1]`; constant channels become 0.5.
pub fn scale_channels(img: &Array3<f64>, mode: ScaleMode) -> Array3<f64> {
    let mut out = img.clone();
    if mode == ScaleMode::None {
        return out;
    }
    for mut lane in out.axis_iter_mut(Axis(2)) {
        let (lo, hi) = lane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi == lo {
            lane.fill(0.5);
        } else {
            let span = hi - lo;
            lane.mapv_inplace(|v| (v - lo) / span);
        }
    }
    out
}

/// `TMFI` file: magic, u32 rows, cols, channels, then row-major f32.
pub fn write_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    binio::write_atomic(path, &encode_image_bytes(img)?)
}

pub(crate) fn encode_image_bytes(img: &Array3<f64>) -> Result<Vec<u8>> {
    let (r, c, k) = img.dim();
    let mut w = Writer::default();
    w.magic(IMAGE_MAGIC)
        .u32(binio::dim_u32(r, "rows")?)
        .u32(binio::dim_u32(c, "cols")?)
        .u32(binio::dim_u32(k, "channels")?);
    w.buf.reserve(r * c * k * 4);
    for &v in img.iter() {
        w.f32(v as f32);
    }
    Ok(w.buf)
}

pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let bytes = binio::read_file(path)?;
    let mut rd = Reader::new(&bytes, "TMF image");
    rd.expect_magic(IMAGE_MAGIC)?;
    let (r, c, k) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
    if r == 0 || c == 0 || k == 0 {
        return Err(TmfError::ShapeMismatch(format!("image dims {r}×{c}×{k}")));
    }
    let vals = rd.f32s(r * c * k)?;
    rd.finish()?;
    Array3::from_shape_vec((r, c, k), vals.into_iter().map(f64::from).collect())
        .map_err(|e| TmfError::MalformedInput(e.to_string()))
}

/// Rounds every entry through `f32`, the precision of the on-disk formats.
pub fn quantize_f32(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| f64::from(v as f32));
}

/// PNG for visual inspection: channels are min-max scaled independently;
/// one channel renders as grayscale, three as RGB.
pub fn export_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (rows, cols, ch) = img.dim();
    let scaled = scale_channels(img, ScaleMode::MinMax01);
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let (w, h) = (binio::dim_u32(cols, "cols")?, binio::dim_u32(rows, "rows")?);
    let result = match ch {
        1 => image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([to_u8(scaled[[y as usize, x as usize, 0]])])
        })
        .save(path),
        3 => image::RgbImage::from_fn(w, h, |x, y| {
            let (r, c) = (y as usize, x as usize);
            image::Rgb([
                to_u8(scaled[[r, c, 0]]),
                to_u8(scaled[[r, c, 1]]),
                to_u8(scaled[[r, c, 2]]),
            ])
        })
        .save(path),
        k => {
            return Err(TmfError::ShapeMismatch(format!(
                "PNG export supports 1 or 3 channels, got {k}"
            )))
        }
    };
    result.map_err(|e| TmfError::write_failure(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tau_max_examples() {
        assert_eq!(tau_max(3000).unwrap(), 1499);
        assert_eq!(tau_max(5).unwrap(), 2);
        assert_eq!(tau_max(3).unwrap(), 1);
        assert!(matches!(tau_max(2), Err(TmfError::SeriesTooShort(2))));
    }

    #[test]
    fn motif_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(motif_at(&x, 1, 1).unwrap().triple, [1.0, 2.0, 3.0]);
        assert_eq!(motif_at(&x, 1, 2).unwrap().triple, [1.0, 3.0, 5.0]);
        assert!(matches!(motif_at(&x, 2, 2), Err(TmfError::IndexOutOfRange(_))));
        assert!(matches!(motif_at(&x, 0, 1), Err(TmfError::IndexOutOfRange(_))));
    }

    #[test]
    fn masker_examples() {
        let k5 = Masker::new(5).unwrap().to_array();
        assert_eq!(k5.row(1).to_vec(), vec![0, 1, 1]);
        assert_eq!(k5.row(0).to_vec(), vec![0, 0, 0]);
        let k7 = Masker::new(7).unwrap().to_array();
        assert_eq!(k7.row(2).iter().filter(|&&v| v == 0).count(), 1);
        assert!(matches!(Masker::new(2), Err(TmfError::SeriesTooShort(2))));
    }

    #[test]
    fn encode_five_samples_by_hand() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let img = encode_tmf(&x).unwrap();
        assert_eq!(img.shape(), (2, 3, 3));
        let row = |tau: usize| -> Vec<[f64; 3]> {
            (1..=3)
                .map(|n| [img.get(tau, n, 0), img.get(tau, n, 1), img.get(tau, n, 2)])
                .collect()
        };
        assert_eq!(row(1), vec![[1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [3.0, 4.0, 5.0]]);
        assert_eq!(row(2), vec![[1.0, 3.0, 5.0], [2.0, 3.0, 4.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn encode_constant_series() {
        let img = encode_tmf(&[2.5; 5]).unwrap();
        assert!(img.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn encode_full_length_shape() {
        let x: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(encode_tmf(&x).unwrap().shape(), (1499, 2998, 3));
    }

    #[test]
    fn encode_rejects_bad_input() {
        assert!(matches!(encode_tmf(&[1.0, 2.0]), Err(TmfError::SeriesTooShort(2))));
        assert!(matches!(
            encode_tmf(&[1.0, f64::NAN, 2.0]),
            Err(TmfError::NonFiniteSample { position: 2 })
        ));
    }

    #[test]
    fn downsample_examples() {
        let img = Array3::from_shape_fn((4, 6, 3), |(r, c, k)| (r * 100 + c * 10 + k) as f64);
        assert_eq!(downsample_tmf(&img, 4, 6).unwrap(), img);

        let ones = Array3::<f64>::ones((2, 2, 3));
        assert_eq!(downsample_tmf(&ones, 1, 1).unwrap().into_raw_vec_and_offset().0, vec![1.0; 3]);

        let single = Array3::from_shape_vec((2, 2, 1), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(downsample_tmf(&single, 1, 1).unwrap()[[0, 0, 0]], 4.0);

        assert!(matches!(downsample_tmf(&single, 3, 1), Err(TmfError::BadTargetShape(_))));
        assert!(matches!(downsample_tmf(&single, 0, 1), Err(TmfError::BadTargetShape(_))));
    }

    #[test]
    fn cell_bounds_cover_axis() {
        for (src, dst) in [(255, 64), (510, 128), (7, 3), (10, 10)] {
            let b = cell_bounds(src, dst);
            assert_eq!(b.first().unwrap().0, 0);
            assert_eq!(b.last().unwrap().1, src);
            assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
            assert!(b.iter().all(|(a, z)| z > a));
        }
    }

    #[test]
    fn scale_examples() {
        let img = Array3::from_shape_vec((1, 3, 2), vec![0.0, 7.0, 2.0, 7.0, 4.0, 7.0]).unwrap();
        let s = scale_channels(&img, ScaleMode::MinMax01);
        assert_eq!(s.index_axis(Axis(2), 0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert_eq!(s.index_axis(Axis(2), 1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5, 0.5]);
        assert_eq!(scale_channels(&img, ScaleMode::None), img);
    }

    #[test]
    fn image_file_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let mut img = encode_tmf(&x).unwrap().into_array();
        quantize_f32(&mut img);
        let path = dir.path().join("a.tmfi");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_image(&path), Err(TmfError::MalformedInput(_))));

        let png = dir.path().join("a.png");
        export_png(&png, &img).unwrap();
        assert!(std::fs::metadata(&png).unwrap().len() > 0);
    }

    fn series_strategy() -> impl Strategy<Value = Vec<f64>> {
        (5usize..64).prop_flat_map(|n| proptest::collection::vec(-10.0f64..10.0, n))
    }

    proptest! {
        #[test]
        fn fill_region_mirrors_rotated_cell(x in series_strategy()) {
            let img = encode_tmf(&x).unwrap();
            let k = img.masker();
            for tau in 1..=k.rows() {
                for n in 1..=k.cols() {
                    let (tp, np) = k.partner(tau, n);
                    prop_assert_eq!(k.partner(tp, np), (tau, n));
                    if k.is_fill(tau, n) {
                        prop_assert!(!k.is_fill(tp, np));
                        for c in 0..3 {
                            prop_assert_eq!(img.get(tau, n, c), img.get(tp, np, c));
                        }
                    } else {
                        let m = motif_at(&x, n, tau).unwrap();
                        for c in 0..3 {
                            prop_assert_eq!(img.get(tau, n, c), m.triple[c]);
                        }
                    }
                }
                prop_assert_eq!(
                    (1..=k.cols()).filter(|&n| !k.is_fill(tau, n)).count(),
                    x.len() - 2 * tau
                );
            }
            // odd N leaves one valid column in the last row, even N two
            let last = k.valid_cols(k.rows());
            prop_assert_eq!(last, if x.len() % 2 == 1 { 1 } else { 2 });
        }

        #[test]
        fn downsample_preserves_mean_on_even_grids(
            fr in 1usize..5, fc in 1usize..5, tr in 1usize..6, tc in 1usize..6, seed in 0u64..500,
        ) {
            let img = Array3::from_shape_fn((tr * fr, tc * fc, 3), |(r, c, k)| {
                (((r * 31 + c * 17 + k * 7) as u64 + seed) % 23) as f64 - 11.0
            });
            let small = downsample_tmf(&img, tr, tc).unwrap();
            for k in 0..3 {
                let a = img.index_axis(Axis(2), k).mean().unwrap();
                let b = small.index_axis(Axis(2), k).mean().unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
