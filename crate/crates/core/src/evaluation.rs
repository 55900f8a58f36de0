//! Quality measurement: Fréchet distance between feature distributions,
//! Dice overlap, gradient-based seam analysis around patch junctions,
//! junction-centered crop sampling, and a small segmentation harness that
//! scores generated imagery by its downstream utility.

use crate::error::{Error, Result};
use crate::geometry::{ComponentMask, PatchGrid, TissueClass};
use crate::nets::{init_unet, FinalAct, Unet};
use crate::training::Adam;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Ridge added to covariance diagonals before matrix square roots.
const COVARIANCE_RIDGE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Luminance gradients
// ---------------------------------------------------------------------------

/// Sobel gradient magnitude of the image's luminance, border pixels clamped.
pub fn gradient_magnitude(image: &Array3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "gradient magnitude needs a nonempty (3, h, w) image, got {:?}",
            image.dim()
        )));
    }
    let mut luma = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            luma[[y, x]] = 0.299 * image[[0, y, x]]
                + 0.587 * image[[1, y, x]]
                + 0.114 * image[[2, y, x]];
        }
    }
    let at = |y: isize, x: isize| -> f32 {
        let yc = y.clamp(0, h as isize - 1) as usize;
        let xc = x.clamp(0, w as isize - 1) as usize;
        luma[[yc, xc]]
    };
    let mut mag = Array2::<f32>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            mag[[y as usize, x as usize]] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(mag)
}

// ---------------------------------------------------------------------------
// Feature sets and the Fréchet distance
// ---------------------------------------------------------------------------

/// Empirical Gaussian summary (mean and covariance) of feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Number of vectors summarized.
    pub count: usize,
    /// Per-dimension sample mean.
    pub mean: Array1<f64>,
    /// Sample covariance (denominator `n - 1`).
    pub covariance: Array2<f64>,
}

impl FeatureSet {
    /// Summarizes a stack of feature rows. Needs at least two rows for a
    /// covariance.
    pub fn from_rows(rows: &Array2<f64>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n < 2 {
            return Err(Error::Numeric(format!(
                "need at least 2 feature vectors for a covariance, got {n}"
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let mean = rows.mean_axis(Axis(0)).expect("n >= 2");
        let centered = rows - &mean;
        let covariance = centered.t().dot(&centered) / (n - 1) as f64;
        debug_assert_eq!(covariance.dim(), (d, d));
        Ok(FeatureSet {
            count: n,
            mean,
            covariance,
        })
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `-tol` are rejected, small negatives are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.diagonal().amax().max(1.0);
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::Numeric(format!(
                "{what} is not positive semidefinite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Squared Fréchet distance between two Gaussian feature summaries:
/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`.
///
/// Both covariances receive the same small diagonal ridge before the matrix
/// square root, so identical sets score exactly zero even when rank
/// deficient.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let mean_gap: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ridge = DMatrix::<f64>::identity(d, d) * COVARIANCE_RIDGE;
    let ca = to_dmatrix(&a.covariance) + &ridge;
    let cb = to_dmatrix(&b.covariance) + &ridge;
    let sa = psd_sqrt(&ca, "covariance A")?;
    let inner = &sa * &cb * &sa;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner_sym);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_gap + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if value < -1e-6 {
        return Err(Error::Numeric(format!(
            "Fréchet distance collapsed below zero ({value}); inputs are ill-conditioned"
        )));
    }
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// Feature extractors
// ---------------------------------------------------------------------------

/// Maps one image to a fixed-length feature vector.
///
/// Extraction is pluggable so heavyweight pretrained descriptors can be
/// swapped in; the bundled extractors are deterministic and self-contained.
pub trait FeatureExtractor {
    /// Length of the vectors [`FeatureExtractor::extract`] emits.
    fn dim(&self) -> usize;
    /// Computes the feature vector of one `(3, h, w)` image.
    fn extract(&self, image: &Array3<f32>) -> Result<Array1<f64>>;
}

fn cell_edges(extent: usize, cells: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..cells).map(move |i| (i * extent / cells, (i + 1) * extent / cells))
}

/// Per-channel cell means over a `grid x grid` partition (`3 * grid²` dims).
pub struct MeanPoolExtractor {
    grid: usize,
}

impl MeanPoolExtractor {
    /// Pooling extractor over a `grid x grid` partition.
    pub fn new(grid: usize) -> Self {
        assert!(grid > 0, "pooling grid must be nonempty");
        MeanPoolExtractor { grid }
    }
}

impl FeatureExtractor for MeanPoolExtractor {
    fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn extract(&self, image: &Array3<f32>) -> Result<Array1<f64>> {
        let (c, h, w) = image.dim();
        if c != 3 || h < self.grid || w < self.grid {
            return Err(Error::ShapeMismatch(format!(
                "mean pooling over a {0}x{0} grid needs a (3, >={0}, >={0}) image, got {1:?}",
                self.grid,
                image.dim()
            )));
        }
        let mut out = Array1::<f64>::zeros(self.dim());
        let mut k = 0;
        for ch in 0..3 {
            for (y0, y1) in cell_edges(h, self.grid) {
                for (x0, x1) in cell_edges(w, self.grid) {
                    let cell = image.slice(s![ch, y0..y1, x0..x1]);
                    out[k] = cell.iter().map(|&v| f64::from(v)).sum::<f64>() / cell.len() as f64;
                    k += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Seeded Gaussian random projection of the flattened pixels (`dim` outputs).
/// Deterministic in its seed; needs no pretrained weights.
pub struct RandomProjectionExtractor {
    weights: Array2<f64>,
    input: (usize, usize, usize),
}

impl RandomProjectionExtractor {
    /// Projection for images of exactly `input` shape, scaled by
    /// `1/sqrt(input_len)` so feature magnitudes stay comparable across
    /// sizes.
    pub fn new(input: (usize, usize, usize), dim: usize, seed: u64) -> Self {
        let n_in = input.0 * input.1 * input.2;
        assert!(n_in > 0 && dim > 0, "projection needs nonempty shapes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("valid std");
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((dim, n_in), || normal.sample(&mut rng) * scale);
        RandomProjectionExtractor { weights, input }
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn extract(&self, image: &Array3<f32>) -> Result<Array1<f64>> {
        if image.dim() != self.input {
            return Err(Error::ShapeMismatch(format!(
                "projection built for {:?}, got {:?}",
                self.input,
                image.dim()
            )));
        }
        let flat: Array1<f64> = image.iter().map(|&v| f64::from(v)).collect();
        Ok(self.weights.dot(&flat))
    }
}

/// Extracts features from every image and summarizes them as a
/// [`FeatureSet`]. Needs at least two images.
pub fn extract_features(
    images: &[Array3<f32>],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to extract features from".into()));
    }
    let mut rows = Array2::<f64>::zeros((images.len(), extractor.dim()));
    for (i, image) in images.iter().enumerate() {
        let f = extractor.extract(image)?;
        if f.len() != extractor.dim() {
            return Err(Error::ShapeMismatch(format!(
                "extractor promised {} dims but produced {}",
                extractor.dim(),
                f.len()
            )));
        }
        rows.row_mut(i).assign(&f);
    }
    FeatureSet::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty masks count as identical
/// (1.0).
pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dice over {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Binary gland-versus-rest view of a class mask.
pub fn gland_mask(mask: &ComponentMask) -> Array2<bool> {
    let (_, h, w) = mask.data().dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        mask.data()[[TissueClass::Gland.channel(), y, x]] == 1
    })
}

// ---------------------------------------------------------------------------
// Seam analysis
// ---------------------------------------------------------------------------

/// Gradient statistics around patch junctions versus patch interiors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeamReport {
    /// Mean gradient magnitude inside junction-centered bands.
    pub junction_mean: f64,
    /// Mean gradient magnitude inside equally sized patch-center bands.
    pub control_mean: f64,
    /// `junction_mean / control_mean`; 1.0 when both are zero.
    pub anomaly_ratio: f64,
    /// Number of junction bands measured (rows plus columns).
    pub junction_bands: usize,
}

/// Center lines of the overlap strips between consecutive origins.
fn junction_lines(origins: &[usize], patch: usize) -> Vec<usize> {
    origins
        .windows(2)
        .map(|w| (w[1] + w[0] + patch) / 2)
        .collect()
}

/// Band `[center - v/2, ...)` of height `v`, clamped inside `[0, extent)`.
fn band_around(center: usize, v: usize, extent: usize) -> (usize, usize) {
    let start = center.saturating_sub(v / 2).min(extent - v);
    (start, start + v)
}

/// Measures Sobel gradient energy inside bands of width `overlap` centered
/// on patch junctions, against control bands at patch centers. A stitched
/// tile with visible seams scores an anomaly ratio well above 1.
pub fn seam_report(image: &Array3<f32>, grid: &PatchGrid) -> Result<SeamReport> {
    let geometry = grid.geometry();
    let v = geometry.overlap;
    if v == 0 {
        return Err(Error::InvalidGeometry(
            "zero overlap leaves no junction bands to measure".into(),
        ));
    }
    if image.dim() != (3, grid.height(), grid.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} does not match the {}x{} grid",
            image.dim(),
            grid.height(),
            grid.width()
        )));
    }
    let p = geometry.patch;
    let row_junctions = junction_lines(grid.row_origins(), p);
    let col_junctions = junction_lines(grid.col_origins(), p);
    if row_junctions.is_empty() && col_junctions.is_empty() {
        return Err(Error::InvalidGeometry(
            "single-patch grid has no junctions".into(),
        ));
    }
    let mag = gradient_magnitude(image)?;
    let (h, w) = mag.dim();
    let band_mean = |rows: &[(usize, usize)], cols: &[(usize, usize)]| -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for &(y0, y1) in rows {
            sum += mag.slice(s![y0..y1, ..]).iter().map(|&v| f64::from(v)).sum::<f64>();
            n += (y1 - y0) * w;
        }
        for &(x0, x1) in cols {
            sum += mag.slice(s![.., x0..x1]).iter().map(|&v| f64::from(v)).sum::<f64>();
            n += (x1 - x0) * h;
        }
        if n == 0 { 0.0 } else { sum / n as f64 }
    };
    let junction_rows: Vec<_> = row_junctions.iter().map(|&m| band_around(m, v, h)).collect();
    let junction_cols: Vec<_> = col_junctions.iter().map(|&m| band_around(m, v, w)).collect();
    let control_rows: Vec<_> = grid
        .row_origins()
        .iter()
        .map(|&y| band_around(y + p / 2, v, h))
        .collect();
    let control_cols: Vec<_> = grid
        .col_origins()
        .iter()
        .map(|&x| band_around(x + p / 2, v, w))
        .collect();
    let junction_mean = band_mean(&junction_rows, &junction_cols);
    let control_mean = band_mean(&control_rows, &control_cols);
    let anomaly_ratio = if junction_mean == 0.0 && control_mean == 0.0 {
        1.0
    } else if control_mean == 0.0 {
        f64::INFINITY
    } else {
        junction_mean / control_mean
    };
    Ok(SeamReport {
        junction_mean,
        control_mean,
        anomaly_ratio,
        junction_bands: row_junctions.len() + col_junctions.len(),
    })
}

/// Cuts `count` square crops of side `size` from `tiles`, each centered on a
/// patch-junction line, uniformly over junctions and positions along them.
/// `count = 0` yields an empty set; junction lines too close to the border
/// to center a crop are excluded, and if none remain this errors.
pub fn sample_overlap_patches(
    tiles: &[Array3<f32>],
    grid: &PatchGrid,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Array3<f32>>> {
    if tiles.is_empty() {
        return Err(Error::Dataset("no tiles to sample from".into()));
    }
    let (h, w) = (grid.height(), grid.width());
    for t in tiles {
        if t.dim() != (3, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "tile {:?} does not match the {h}x{w} grid",
                t.dim()
            )));
        }
    }
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidGeometry(format!(
            "crop size {size} does not fit inside {h}x{w} tiles"
        )));
    }
    let p = grid.geometry().patch;
    // (is_horizontal, line coordinate); a line qualifies if a size-crop can
    // be centered on it without leaving the tile
    let fits = |m: usize, extent: usize| m >= size / 2 && m - size / 2 + size <= extent;
    let mut lines: Vec<(bool, usize)> = Vec::new();
    lines.extend(
        junction_lines(grid.row_origins(), p)
            .into_iter()
            .filter(|&m| fits(m, h))
            .map(|m| (true, m)),
    );
    lines.extend(
        junction_lines(grid.col_origins(), p)
            .into_iter()
            .filter(|&m| fits(m, w))
            .map(|m| (false, m)),
    );
    if lines.is_empty() {
        return Err(Error::InvalidGeometry(
            "no junction line can center a crop of this size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let tile = &tiles[rng.random_range(0..tiles.len())];
        let &(horizontal, m) = &lines[rng.random_range(0..lines.len())];
        let (top, left) = if horizontal {
            (m - size / 2, rng.random_range(0..=w - size))
        } else {
            (rng.random_range(0..=h - size), m - size / 2)
        };
        out.push(tile.slice(s![.., top..top + size, left..left + size]).to_owned());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Segmentation harness
// ---------------------------------------------------------------------------

/// Reference full-scale Dice grid from the original benchmark, recorded for
/// comparison (not reproducible at desk scale). Rows: segmenter trained on
/// real / generated imagery; columns: tested on real / generated imagery.
pub const REFERENCE_DICE_GRID: [[f64; 2]; 2] = [[0.91, 0.88], [0.90, 0.97]];

/// Architecture and schedule of the small gland segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterSpec {
    /// Square input side.
    pub input_side: usize,
    /// Encoder/decoder depth.
    pub depth: usize,
    /// Channel count of the first encoder block.
    pub base_channels: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Training steps (samples are cycled in order).
    pub steps: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

/// Per-pixel gland probability predictor built on the shared encoder/decoder
/// trunk.
pub struct Segmenter {
    unet: Unet<f32>,
    side: usize,
}

/// One (image, binary gland target) training or test pair.
pub type SegmentationPair = (Array3<f32>, Array2<f32>);

/// Mean and spread of per-image Dice scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceSummary {
    /// Mean Dice over the test pairs.
    pub mean: f64,
    /// Sample standard deviation (0 for a single pair).
    pub std: f64,
    /// Number of pairs scored.
    pub n: usize,
}

impl Segmenter {
    /// Builds and seeds an untrained segmenter.
    pub fn new(spec: &SegmenterSpec) -> Result<Self> {
        let mut unet = Unet::<f32>::new(
            3,
            1,
            spec.input_side,
            spec.depth,
            spec.base_channels,
            true,
            FinalAct::Sigmoid,
        )?;
        init_unet(&mut unet, spec.seed);
        Ok(Segmenter {
            unet,
            side: spec.input_side,
        })
    }

    fn check_pair(&self, image: &Array3<f32>, target: &Array2<f32>) -> Result<()> {
        let s = self.side;
        if image.dim() != (3, s, s) || target.dim() != (s, s) {
            return Err(Error::ShapeMismatch(format!(
                "segmenter works on (3, {s}, {s}) images with ({s}, {s}) targets, got {:?} / {:?}",
                image.dim(),
                target.dim()
            )));
        }
        if target.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidMask(
                "segmentation targets must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Per-pixel gland probabilities in `(0, 1)`.
    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        if image.dim() != (3, self.side, self.side) {
            return Err(Error::ShapeMismatch(format!(
                "segmenter works on (3, {0}, {0}) images, got {1:?}",
                self.side,
                image.dim()
            )));
        }
        Ok(self.unet.forward(image).index_axis(Axis(0), 0).to_owned())
    }
}

/// Trains a fresh segmenter with per-pixel binary cross-entropy.
pub fn train_segmenter(pairs: &[SegmentationPair], spec: &SegmenterSpec) -> Result<Segmenter> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no segmentation training pairs".into()));
    }
    let mut seg = Segmenter::new(spec)?;
    for (image, target) in pairs {
        seg.check_pair(image, target)?;
    }
    let views = seg.unet.param_views();
    let mut adam = Adam::new(spec.learning_rate, 0.5, 0.999, &views);
    drop(views);
    let n = (spec.input_side * spec.input_side) as f32;
    for step in 0..spec.steps {
        let (image, target) = &pairs[step % pairs.len()];
        let (out, cache) = seg.unet.forward_cached(image);
        // d/dp of mean BCE: (p - t) / (p (1 - p) n), probabilities clamped
        let mut grad = Array3::<f32>::zeros(out.dim());
        for ((g, &p), &t) in grad
            .iter_mut()
            .zip(out.iter())
            .zip(target.iter())
        {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            *g = (p - t) / (p * (1.0 - p) * n);
        }
        let (_, grads) = seg.unet.backward(&cache, &grad);
        adam.step(seg.unet.param_views_mut(), &grads)?;
    }
    Ok(seg)
}

/// Scores a segmenter by per-image Dice at a 0.5 threshold.
pub fn evaluate_segmenter(seg: &Segmenter, pairs: &[SegmentationPair]) -> Result<DiceSummary> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no segmentation test pairs".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for (image, target) in pairs {
        seg.check_pair(image, target)?;
        let prob = seg.predict(image)?;
        let pred = prob.mapv(|p| p > 0.5);
        let truth = target.mapv(|t| t > 0.5);
        scores.push(dice(&pred, &truth)?);
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(DiceSummary { mean, std, n })
}

/// Trains on `train_pairs`, scores on `test_pairs`. Running this with each
/// combination of real/generated corpora fills the four-cell utility matrix
/// that [`REFERENCE_DICE_GRID`] documents at full scale.
pub fn segmentation_harness(
    train_pairs: &[SegmentationPair],
    test_pairs: &[SegmentationPair],
    spec: &SegmenterSpec,
) -> Result<DiceSummary> {
    let seg = train_segmenter(train_pairs, spec)?;
    evaluate_segmenter(&seg, test_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plan_grid, stitch, TileGeometry, TissueClass};
    use rand::Rng;

    fn micro_grid(h: usize, w: usize) -> PatchGrid {
        plan_grid(h, w, &TileGeometry::new(16, 4, 4).unwrap()).unwrap()
    }

    /// Deterministic smooth test image with per-image character.
    fn smooth_image(side: usize, phase: f64) -> Array3<f32> {
        Array3::from_shape_fn((3, side, side), |(c, y, x)| {
            let t = phase + c as f64;
            (0.4 * ((y as f64 * 0.31 + t).sin() + (x as f64 * 0.17 - t).cos())) as f32
        })
    }

    #[test]
    fn dice_counting_oracles() {
        let full = Array2::from_elem((4, 4), true);
        let top = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dice(&full, &full).unwrap(), 1.0);
        assert_eq!(dice(&top, &full).unwrap(), 2.0 / 3.0);
        assert_eq!(dice(&full, &top).unwrap(), 2.0 / 3.0, "symmetric");
        let bottom = Array2::from_shape_fn((4, 4), |(y, _)| y >= 2);
        assert_eq!(dice(&top, &bottom).unwrap(), 0.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0, "both empty => identical");
        assert!(dice(&full, &Array2::from_elem((4, 5), true)).is_err());
    }

    #[test]
    fn dice_of_constant_predictor_matches_class_prior_formula() {
        // all-positive predictions against Bernoulli(f) targets: 2f/(1+f)
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let f = 0.3;
        let target = Array2::from_shape_fn((200, 200), |_| rng.random::<f64>() < f);
        let all = Array2::from_elem((200, 200), true);
        let got = dice(&all, &target).unwrap();
        let expected = 2.0 * f / (1.0 + f);
        assert!(
            (got - expected).abs() < 0.02,
            "constant predictor: {got} vs analytic {expected}"
        );
    }

    #[test]
    fn gradient_magnitude_flags_edges_only() {
        let flat = Array3::from_elem((3, 8, 8), 0.25f32);
        let mag = gradient_magnitude(&flat).unwrap();
        assert!(mag.iter().all(|&v| v == 0.0));
        // vertical step between columns 3 and 4
        let step = Array3::from_shape_fn((3, 8, 8), |(_, _, x)| if x < 4 { -0.5 } else { 0.5 });
        let mag = gradient_magnitude(&step).unwrap();
        assert!(mag[[4, 3]] > 1.0 && mag[[4, 4]] > 1.0, "energy at the step");
        assert_eq!(mag[[4, 1]], 0.0, "flat region stays silent");
        assert_eq!(mag[[4, 6]], 0.0);
    }

    #[test]
    fn feature_set_matches_two_pass_statistics() {
        let rows = Array2::from_shape_vec(
            (4, 2),
            vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5, 2.0, -2.0],
        )
        .unwrap();
        let fs = FeatureSet::from_rows(&rows).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = rows.column(d).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            assert!((fs.mean[d] - mean).abs() < 1e-12);
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!((fs.covariance[[d, d]] - var).abs() < 1e-12);
        }
        let m0 = fs.mean[0];
        let m1 = fs.mean[1];
        let cov01 = rows
            .rows()
            .into_iter()
            .map(|r| (r[0] - m0) * (r[1] - m1))
            .sum::<f64>()
            / 3.0;
        assert!((fs.covariance[[0, 1]] - cov01).abs() < 1e-12);
        assert!((fs.covariance[[1, 0]] - cov01).abs() < 1e-12, "symmetric");
        assert!(FeatureSet::from_rows(&Array2::zeros((1, 3))).is_err(), "n >= 2");
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = Array2::from_shape_simple_fn((12, 3), || rng.random_range(-1.0..1.0));
        let a = FeatureSet::from_rows(&rows).unwrap();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9, "identity");
        // equal covariance, means shifted by d with ||d|| = 2
        let shift = Array1::from_vec(vec![2.0 / 3f64.sqrt(); 3]);
        let shifted = &rows + &shift;
        let b = FeatureSet::from_rows(&shifted).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "mean shift: {d} vs 4.0");
        // 1-D Gaussians with exact sample stats: N(0,1) vs N(0,4) -> 1.0
        let inv = 1.0 / 2f64.sqrt();
        let n01 = FeatureSet::from_rows(
            &Array2::from_shape_vec((2, 1), vec![-inv, inv]).unwrap(),
        )
        .unwrap();
        let n04 = FeatureSet::from_rows(
            &Array2::from_shape_vec((2, 1), vec![-2.0 * inv, 2.0 * inv]).unwrap(),
        )
        .unwrap();
        let d = frechet_distance(&n01, &n04).unwrap();
        assert!((d - 1.0).abs() < 1e-5, "scalar form: {d} vs 1.0");
        // dimension mismatch
        assert!(frechet_distance(&a, &n01).is_err());
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ra = Array2::from_shape_simple_fn((10, 4), || rng.random_range(-2.0..2.0));
            let rb = Array2::from_shape_simple_fn((14, 4), || rng.random_range(-1.0..3.0));
            let a = FeatureSet::from_rows(&ra).unwrap();
            let b = FeatureSet::from_rows(&rb).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!(
                (ab - ba).abs() < 1e-8 * ab.max(1.0),
                "symmetry: {ab} vs {ba}"
            );
        }
    }

    #[test]
    fn constant_image_features_have_zero_covariance_and_exact_mean_gap() {
        let set_a = vec![Array3::from_elem((3, 8, 8), 0.2f32); 2];
        let set_b = vec![Array3::from_elem((3, 8, 8), -0.1f32); 2];
        let ex = MeanPoolExtractor::new(1);
        let fa = extract_features(&set_a, &ex).unwrap();
        assert!(fa.covariance.iter().all(|&v| v == 0.0), "zero covariance");
        let fb = extract_features(&set_b, &ex).unwrap();
        // identical ridge on both sides cancels: FID = squared mean gap
        // (computed through the same f32 pixel quantization)
        let gap = 3.0 * (f64::from(0.2f32) - f64::from(-0.1f32)).powi(2);
        let d = frechet_distance(&fa, &fb).unwrap();
        assert!((d - gap).abs() < 1e-9, "{d} vs {gap}");
        assert!(extract_features(&[], &ex).is_err(), "empty set");
    }

    #[test]
    fn fid_grows_with_corruption_strength() {
        let base: Vec<Array3<f32>> = (0..8).map(|i| smooth_image(32, i as f64)).collect();
        let ex = RandomProjectionExtractor::new((3, 32, 32), 8, 99);
        let noisy = |sigma: f64, seed: u64| -> Vec<Array3<f32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f64, sigma).unwrap();
            base.iter()
                .map(|img| img.mapv(|v| v + normal.sample(&mut rng) as f32))
                .collect()
        };
        let f_base = extract_features(&base, &ex).unwrap();
        let d0 = frechet_distance(&f_base, &extract_features(&noisy(0.0, 5), &ex).unwrap())
            .unwrap();
        let d1 = frechet_distance(&f_base, &extract_features(&noisy(0.1, 5), &ex).unwrap())
            .unwrap();
        let d3 = frechet_distance(&f_base, &extract_features(&noisy(0.3, 5), &ex).unwrap())
            .unwrap();
        assert!(d0 < 1e-9, "sigma 0 reproduces the set: {d0}");
        assert!(d0 < d1 && d1 < d3, "monotone in sigma: {d0} {d1} {d3}");
    }

    #[test]
    fn seam_report_conventions() {
        let grid = micro_grid(28, 28);
        // constant tile: 0/0 junction-to-control ratio is 1 by convention
        let flat = Array3::from_elem((3, 28, 28), 0.3f32);
        let r = seam_report(&flat, &grid).unwrap();
        assert_eq!(r.anomaly_ratio, 1.0);
        assert_eq!(r.junction_bands, 2);
        // a hard horizontal stripe exactly on the row junction (rows 12..16
        // centered at 14) lights up the junction bands only
        let mut seamy = flat.clone();
        seamy.slice_mut(s![.., 14..15, ..]).fill(-0.9);
        let r = seam_report(&seamy, &grid).unwrap();
        assert!(r.anomaly_ratio > 5.0, "seam stands out: {}", r.anomaly_ratio);
        // zero-overlap geometry carries no bands
        if let Ok(geometry) = TileGeometry::new(16, 4, 0) {
            let g = plan_grid(32, 32, &geometry).unwrap();
            let wide = Array3::from_elem((3, 32, 32), 0.3f32);
            assert!(seam_report(&wide, &g).is_err());
        }
        // single-patch grid has no junctions
        let tiny = plan_grid(16, 16, &TileGeometry::new(16, 4, 4).unwrap()).unwrap();
        let small = Array3::from_elem((3, 16, 16), 0.0f32);
        assert!(seam_report(&small, &tiny).is_err());
    }

    #[test]
    fn round_trip_stitching_leaves_the_seam_ratio_unchanged() {
        let grid = micro_grid(28, 28);
        let original = smooth_image(28, 0.7);
        let patches: Vec<Array3<f32>> = grid
            .origins()
            .map(|(r, c)| original.slice(s![.., r..r + 16, c..c + 16]).to_owned())
            .collect();
        let stitched = stitch(&patches, &grid).unwrap();
        let r0 = seam_report(&original, &grid).unwrap();
        let r1 = seam_report(stitched.data(), &grid).unwrap();
        assert!(r0.anomaly_ratio > 0.0);
        let rel = (r1.anomaly_ratio / r0.anomaly_ratio - 1.0).abs();
        assert!(rel < 1e-6, "round-trip ratio drifted by {rel}");
    }

    #[test]
    fn overlap_crops_are_centered_on_junction_lines() {
        let grid = micro_grid(28, 40); // row junction at 14; col junctions at 14, 26
        let tiles: Vec<Array3<f32>> = (0..2)
            .map(|i| {
                Array3::from_shape_fn((3, 28, 40), |(c, y, x)| {
                    ((c + y + x + i) % 7) as f32 / 7.0
                })
            })
            .collect();
        let size = 12;
        let crops = sample_overlap_patches(&tiles, &grid, size, 25, 13).unwrap();
        assert_eq!(crops.len(), 25);
        for crop in &crops {
            assert_eq!(crop.dim(), (3, size, size));
        }
        // determinism
        let again = sample_overlap_patches(&tiles, &grid, size, 25, 13).unwrap();
        assert_eq!(crops[0], again[0]);
        // count 0 is an empty set, not an error
        assert!(sample_overlap_patches(&tiles, &grid, size, 0, 13)
            .unwrap()
            .is_empty());
        // over-large crops cannot fit
        assert!(sample_overlap_patches(&tiles, &grid, 29, 1, 13).is_err());
        // a single-patch grid offers no junctions
        let tiny = plan_grid(16, 16, &TileGeometry::new(16, 4, 4).unwrap()).unwrap();
        let small = vec![Array3::<f32>::zeros((3, 16, 16))];
        assert!(sample_overlap_patches(&small, &tiny, 8, 1, 0).is_err());
    }

    #[test]
    fn crop_centers_lie_on_junction_lines() {
        // one junction line per axis at exactly 14: every crop of even side
        // `size` must span [14 - size/2, 14 + size/2) on its centered axis.
        let grid = micro_grid(28, 28);
        let tile = Array3::from_shape_fn((3, 28, 28), |(_, y, x)| (y * 28 + x) as f32);
        let crops = sample_overlap_patches(&[tile.clone()], &grid, 8, 40, 3).unwrap();
        for crop in crops {
            // recover the crop's position from the linearized values
            let v = crop[[0, 0, 0]] as usize;
            let (top, left) = (v / 28, v % 28);
            let row_centered = top == 14 - 4;
            let col_centered = left == 14 - 4;
            assert!(
                row_centered || col_centered,
                "crop at ({top}, {left}) is centered on no junction"
            );
        }
    }

    #[test]
    fn gland_mask_extracts_the_gland_channel() {
        let mut labels = Array2::from_elem((4, 4), TissueClass::Stroma.channel() as u8);
        labels[[1, 2]] = TissueClass::Gland.channel() as u8;
        let mask = ComponentMask::from_labels(&labels).unwrap();
        let g = gland_mask(&mask);
        assert!(g[[1, 2]]);
        assert_eq!(g.iter().filter(|&&v| v).count(), 1);
    }

    #[test]
    fn segmenter_memorizes_a_tiny_corpus() {
        // images are the one-hot masks themselves: the gland channel is the
        // target, so a working training loop must reach near-perfect Dice
        let spec = SegmenterSpec {
            input_side: 32,
            depth: 2,
            base_channels: 8,
            learning_rate: 1e-3,
            steps: 240,
            seed: 17,
        };
        let mut pairs = Vec::new();
        for k in 0..3 {
            let gland = TissueClass::Gland.channel() as u8;
            let labels = Array2::from_shape_fn((32, 32), |(y, x)| {
                let cy = 8 + 6 * k;
                let dy = y as isize - cy as isize;
                let dx = x as isize - 16;
                if dy * dy + dx * dx < 49 {
                    gland
                } else {
                    TissueClass::Stroma.channel() as u8
                }
            });
            let mask = ComponentMask::from_labels(&labels).unwrap();
            let image = mask.to_input();
            let target =
                Array2::from_shape_fn((32, 32), |(y, x)| f32::from(labels[[y, x]] == gland));
            pairs.push((image, target));
        }
        let summary = segmentation_harness(&pairs, &pairs, &spec).unwrap();
        assert!(
            summary.mean > 0.95,
            "memorization Dice {} (std {})",
            summary.mean,
            summary.std
        );
        assert_eq!(summary.n, 3);
        // empty corpora are rejected
        assert!(segmentation_harness(&[], &pairs, &spec).is_err());
        assert!(segmentation_harness(&pairs, &[], &spec).is_err());
    }

    #[test]
    fn reference_grid_is_frozen() {
        assert_eq!(REFERENCE_DICE_GRID, [[0.91, 0.88], [0.90, 0.97]]);
        // generated-on-generated is the easiest cell at full scale
        let max = REFERENCE_DICE_GRID
            .iter()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b));
        assert_eq!(max, REFERENCE_DICE_GRID[1][1]);
    }
}
