//! Tile/patch layout and the differentiable stitch.
//!
//! All rasters are channel-first `(channel, row, col)`. A component mask is a
//! three-channel one-hot raster (gland / stroma / background); padding added
//! around a mask is all-zero. Generated patches are assembled into a tile by
//! a per-pixel running average over every patch covering the pixel. The
//! average is linear, so its adjoint ([`stitch_backward`]) is exact: each
//! patch pixel receives the tile gradient scaled by that pixel's averaging
//! weight, which is what lets tile-level training signals reach every patch.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Default Euclidean RGB distance allowed between a pixel and the nearest
/// class color before the pixel counts as off-palette.
pub const DEFAULT_COLOR_TOLERANCE: f64 = 64.0;

/// Maximum fraction of off-palette pixels tolerated when loading a mask.
pub const MAX_OFF_PALETTE_FRACTION: f64 = 0.01;

/// Tissue component classes, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TissueClass {
    Gland,
    Stroma,
    Background,
}

impl TissueClass {
    /// All classes in channel order.
    pub const ALL: [TissueClass; 3] = [
        TissueClass::Gland,
        TissueClass::Stroma,
        TissueClass::Background,
    ];

    /// Channel index of this class in a one-hot mask.
    pub fn channel(self) -> usize {
        match self {
            TissueClass::Gland => 0,
            TissueClass::Stroma => 1,
            TissueClass::Background => 2,
        }
    }

    /// Class for a one-hot channel index.
    pub fn from_channel(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    /// RGB color used for this class in mask images.
    pub fn color(self) -> [u8; 3] {
        match self {
            TissueClass::Gland => [0, 255, 0],
            TissueClass::Stroma => [255, 0, 0],
            TissueClass::Background => [0, 0, 255],
        }
    }
}

/// Patch/tile layout constants.
///
/// `patch` is the side of a generated output patch, `context` the margin
/// prepended on every side of a generator input, and `overlap` the number of
/// pixels neighbouring output patches share. The stride between patch origins
/// is `patch - overlap`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub patch: usize,
    pub context: usize,
    pub overlap: usize,
}

impl TileGeometry {
    /// Full-scale layout: 256 px patches, 20 px context, 20 px overlap.
    pub const FULL_SCALE: TileGeometry = TileGeometry {
        patch: 256,
        context: 20,
        overlap: 20,
    };

    /// Desk-scale layout for fast experiments: 64 px patches, 8 px context,
    /// 8 px overlap (a 176 px tile holds a 3x3 patch grid).
    pub const DESK_SCALE: TileGeometry = TileGeometry {
        patch: 64,
        context: 8,
        overlap: 8,
    };

    /// Validated constructor: `patch > 0` and `overlap < patch`.
    pub fn new(patch: usize, context: usize, overlap: usize) -> Result<Self> {
        let g = TileGeometry {
            patch,
            context,
            overlap,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks the layout invariants without consuming the value.
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::InvalidGeometry("patch side must be positive".into()));
        }
        if self.overlap >= self.patch {
            return Err(Error::InvalidGeometry(format!(
                "overlap ({}) must be smaller than patch side ({})",
                self.overlap, self.patch
            )));
        }
        Ok(())
    }

    /// Distance between neighbouring patch origins.
    pub fn stride(&self) -> usize {
        self.patch - self.overlap
    }

    /// Side of a generator input patch (`patch + 2 * context`).
    pub fn input_side(&self) -> usize {
        self.patch + 2 * self.context
    }
}

/// Placement of overlapping patches over an output raster.
///
/// Origins are in output coordinates, ascending, starting at 0 and stepping
/// by the stride; when the raster side is not an exact multiple of the stride
/// the final origin is snapped to `side - patch` so the last patch is
/// edge-aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    geometry: TileGeometry,
    height: usize,
    width: usize,
    row_origins: Vec<usize>,
    col_origins: Vec<usize>,
}

impl PatchGrid {
    pub fn geometry(&self) -> &TileGeometry {
        &self.geometry
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.row_origins
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.col_origins
    }

    /// Number of patches in the grid.
    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origin of the `idx`-th patch in row-major order.
    pub fn origin(&self, idx: usize) -> (usize, usize) {
        let cols = self.col_origins.len();
        (self.row_origins[idx / cols], self.col_origins[idx % cols])
    }

    /// Row-major iterator over patch origins `(row, col)`.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_origins
            .iter()
            .flat_map(move |&r| self.col_origins.iter().map(move |&c| (r, c)))
    }
}

/// Patch origins along one axis: `0, stride, 2*stride, ...`, with the final
/// origin snapped to `len - patch` when the stride does not divide evenly.
fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut origins: Vec<usize> = (0..=last / stride).map(|k| k * stride).collect();
    if *origins.last().expect("at least origin 0") != last {
        origins.push(last);
    }
    origins
}

/// Plans the patch grid covering a `height x width` output raster.
///
/// Every output pixel is covered by at least one patch; interior neighbours
/// overlap by exactly `geometry.overlap` except possibly the edge-aligned
/// last row/column, which may overlap more. Errors if either side is smaller
/// than the patch.
pub fn plan_grid(height: usize, width: usize, geometry: &TileGeometry) -> Result<PatchGrid> {
    geometry.validate()?;
    if height < geometry.patch || width < geometry.patch {
        return Err(Error::InvalidGeometry(format!(
            "raster {height}x{width} is smaller than the {} px patch",
            geometry.patch
        )));
    }
    let stride = geometry.stride();
    Ok(PatchGrid {
        geometry: *geometry,
        height,
        width,
        row_origins: axis_origins(height, geometry.patch, stride),
        col_origins: axis_origins(width, geometry.patch, stride),
    })
}

/// One-hot component mask, `(3, height, width)`, values 0/1 with per-pixel
/// channel sum at most 1 (0 marks padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentMask {
    data: Array3<u8>,
}

impl ComponentMask {
    /// Validates and wraps a raw one-hot raster.
    pub fn new(data: Array3<u8>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::InvalidMask(format!(
                "expected non-empty (3, h, w) raster, got ({c}, {h}, {w})"
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0u8;
                for ch in 0..3 {
                    let v = data[[ch, y, x]];
                    if v > 1 {
                        return Err(Error::InvalidMask(format!(
                            "value {v} at ({ch}, {y}, {x}) is not 0/1"
                        )));
                    }
                    sum += v;
                }
                if sum > 1 {
                    return Err(Error::InvalidMask(format!(
                        "pixel ({y}, {x}) is hot in {sum} channels"
                    )));
                }
            }
        }
        Ok(ComponentMask { data })
    }

    /// Builds a mask from a label raster (values 0..3, one per class).
    pub fn from_labels(labels: &Array2<u8>) -> Result<Self> {
        let (h, w) = labels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidMask("empty label raster".into()));
        }
        let mut data = Array3::<u8>::zeros((3, h, w));
        for ((y, x), &l) in labels.indexed_iter() {
            if l as usize >= 3 {
                return Err(Error::InvalidMask(format!(
                    "label {l} at ({y}, {x}) out of range"
                )));
            }
            data[[l as usize, y, x]] = 1;
        }
        Ok(ComponentMask { data })
    }

    /// Mask of the given size filled with a single class.
    pub fn filled(height: usize, width: usize, class: TissueClass) -> Self {
        let mut data = Array3::<u8>::zeros((3, height, width));
        data.slice_mut(s![class.channel(), .., ..]).fill(1);
        ComponentMask { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    /// Class at a pixel, or `None` for padding.
    pub fn class_at(&self, y: usize, x: usize) -> Option<TissueClass> {
        TissueClass::ALL
            .into_iter()
            .find(|c| self.data[[c.channel(), y, x]] == 1)
    }

    /// Float copy in generator-input layout (values 0.0 / 1.0).
    pub fn to_input(&self) -> Array3<f32> {
        self.data.mapv(f32::from)
    }

    /// Fraction of pixels belonging to each class, in channel order.
    /// Padding pixels count toward the total but no class.
    pub fn class_fractions(&self) -> [f64; 3] {
        let total = (self.height() * self.width()) as f64;
        let mut out = [0.0; 3];
        for (i, slot) in out.iter_mut().enumerate() {
            let hot: u64 = self
                .data
                .slice(s![i, .., ..])
                .iter()
                .map(|&v| u64::from(v))
                .sum();
            *slot = hot as f64 / total;
        }
        out
    }

    /// Renders the mask to an RGB image using the class palette; padding
    /// pixels render black.
    pub fn to_rgb_image(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let rgb = self.class_at(y, x).map_or([0, 0, 0], TissueClass::color);
                img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            }
        }
        img
    }

    /// Quantises an RGB image to the nearest class color.
    ///
    /// Pixels farther than `color_tolerance` (Euclidean RGB distance) from
    /// every class color still quantise, but if more than
    /// [`MAX_OFF_PALETTE_FRACTION`] of pixels are that far off the image is
    /// rejected as not being a component mask.
    pub fn from_rgb_image(img: &image::RgbImage, color_tolerance: f64) -> Result<Self> {
        if !(color_tolerance >= 0.0) {
            return Err(Error::InvalidMask(format!(
                "color tolerance must be non-negative, got {color_tolerance}"
            )));
        }
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::InvalidMask("empty image".into()));
        }
        let tol_sq = color_tolerance * color_tolerance;
        let mut data = Array3::<u8>::zeros((3, h as usize, w as usize));
        let mut off_palette = 0u64;
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y).0;
                let (mut best, mut best_d) = (TissueClass::Gland, f64::INFINITY);
                for class in TissueClass::ALL {
                    let c = class.color();
                    let d: f64 = (0..3)
                        .map(|i| {
                            let diff = f64::from(p[i]) - f64::from(c[i]);
                            diff * diff
                        })
                        .sum();
                    if d < best_d {
                        best = class;
                        best_d = d;
                    }
                }
                if best_d > tol_sq {
                    off_palette += 1;
                }
                data[[best.channel(), y as usize, x as usize]] = 1;
            }
        }
        let frac = off_palette as f64 / f64::from(w * h);
        if frac > MAX_OFF_PALETTE_FRACTION {
            return Err(Error::InvalidMask(format!(
                "{:.2}% of pixels are farther than {color_tolerance} from every class color",
                frac * 100.0
            )));
        }
        Ok(ComponentMask { data })
    }

    /// Writes the mask as a PNG.
    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_rgb_image().save(path.as_ref())?;
        Ok(())
    }

    /// Reads a mask PNG, quantising with the given color tolerance.
    pub fn load_png(path: impl AsRef<std::path::Path>, color_tolerance: f64) -> Result<Self> {
        let img = image::ImageReader::open(path.as_ref())?
            .decode()
            .map_err(Error::Image)?
            .to_rgb8();
        Self::from_rgb_image(&img, color_tolerance)
    }

    /// Extracts a fully contained rectangular window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ComponentMask> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::InvalidGeometry(format!(
                "crop {height}x{width} at ({top}, {left}) falls outside a {}x{} mask",
                self.height(),
                self.width()
            )));
        }
        Ok(ComponentMask {
            data: self
                .data
                .slice(s![.., top..top + height, left..left + width])
                .to_owned(),
        })
    }

    /// Generator-input window for the patch at `origin` (output coordinates)
    /// without materialising a padded copy of the whole mask: the window
    /// spans `[origin - context, origin + patch + context)` on each axis and
    /// out-of-bounds pixels are all-zero padding.
    pub fn padded_window(&self, origin: (usize, usize), geometry: &TileGeometry) -> ComponentMask {
        let side = geometry.input_side();
        let ctx = geometry.context as isize;
        let (h, w) = (self.height() as isize, self.width() as isize);
        let top = origin.0 as isize - ctx;
        let left = origin.1 as isize - ctx;
        let mut data = Array3::<u8>::zeros((3, side, side));
        let y0 = top.max(0);
        let y1 = (top + side as isize).min(h);
        let x0 = left.max(0);
        let x1 = (left + side as isize).min(w);
        if y0 < y1 && x0 < x1 {
            data.slice_mut(s![
                ..,
                (y0 - top) as usize..(y1 - top) as usize,
                (x0 - left) as usize..(x1 - left) as usize
            ])
            .assign(&self.data.slice(s![
                ..,
                y0 as usize..y1 as usize,
                x0 as usize..x1 as usize
            ]));
        }
        ComponentMask { data }
    }
}

/// Surrounds a mask with an all-zero border of `context` pixels on each side.
pub fn pad_mask(mask: &ComponentMask, context: usize) -> ComponentMask {
    let (h, w) = (mask.height(), mask.width());
    let mut data = Array3::<u8>::zeros((3, h + 2 * context, w + 2 * context));
    data.slice_mut(s![.., context..context + h, context..context + w])
        .assign(mask.data());
    ComponentMask { data }
}

/// Cuts the generator-input window for the patch at `origin` out of a padded
/// mask. `origin` is in output coordinates; the window side is
/// `patch + 2 * context`. Errors if the window does not fit.
pub fn extract_mask_patch(
    padded: &ComponentMask,
    origin: (usize, usize),
    geometry: &TileGeometry,
) -> Result<ComponentMask> {
    let side = geometry.input_side();
    let (r, c) = origin;
    if r + side > padded.height() || c + side > padded.width() {
        return Err(Error::InvalidGeometry(format!(
            "window at ({r}, {c}) with side {side} exceeds padded mask {}x{}",
            padded.height(),
            padded.width()
        )));
    }
    let data = padded
        .data
        .slice(s![.., r..r + side, c..c + side])
        .to_owned();
    Ok(ComponentMask { data })
}

/// Image raster `(3, height, width)` with finite values, nominally in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    data: Array3<f32>,
}

impl Tile {
    /// Wraps a raster, rejecting non-finite values.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected non-empty (3, h, w) raster, got ({c}, {h}, {w})"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("tile contains non-finite values".into()));
        }
        Ok(Tile { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }
}

/// Number of patches covering each output pixel.
pub fn coverage_map(grid: &PatchGrid) -> Array2<f32> {
    let p = grid.geometry().patch;
    let mut coverage = Array2::<f32>::zeros((grid.height(), grid.width()));
    for (r, c) in grid.origins() {
        coverage
            .slice_mut(s![r..r + p, c..c + p])
            .mapv_inplace(|v| v + 1.0);
    }
    coverage
}

/// Assembles patches into a tile by per-pixel running average, at any
/// supported precision.
///
/// `patches` must hold one `(3, patch, patch)` raster per grid cell in
/// row-major grid order. Accumulation runs in `f64` regardless of `T` and in
/// a fixed order, so identical inputs produce bit-identical tiles.
pub fn stitch_t<T: Scalar>(patches: &[Array3<T>], grid: &PatchGrid) -> Result<Array3<T>> {
    let p = grid.geometry().patch;
    if patches.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches supplied for a {}-cell grid",
            patches.len(),
            grid.len()
        )));
    }
    for (i, patch) in patches.iter().enumerate() {
        if patch.dim() != (3, p, p) {
            return Err(Error::ShapeMismatch(format!(
                "patch {i} has shape {:?}, expected (3, {p}, {p})",
                patch.dim()
            )));
        }
        if !patch.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("patch {i} contains non-finite values")));
        }
    }
    // Accumulate in f64 so the average rounds only once, when the finished
    // tile is narrowed back to the working precision.
    let mut sum = Array3::<f64>::zeros((3, grid.height(), grid.width()));
    for (patch, (r, c)) in patches.iter().zip(grid.origins()) {
        sum.slice_mut(s![.., r..r + p, c..c + p])
            .zip_mut_with(patch, |acc, &v| *acc += v.to_const());
    }
    let coverage = coverage_map(grid);
    for ch in 0..3 {
        sum.slice_mut(s![ch, .., ..])
            .zip_mut_with(&coverage, |v, &n| *v /= f64::from(n));
    }
    Ok(sum.mapv(T::from_const))
}

/// Assembles f32 patches into a validated [`Tile`].
pub fn stitch(patches: &[Array3<f32>], grid: &PatchGrid) -> Result<Tile> {
    Ok(Tile {
        data: stitch_t(patches, grid)?,
    })
}

/// Adjoint of [`stitch_t`]: routes a tile gradient back to each patch.
///
/// Patch pixel `(c, j, i)` of the patch at origin `(r, o)` receives
/// `grad_tile[c, r + j, o + i] / coverage[r + j, o + i]` — exactly the weight
/// the pixel contributed with in the running average.
pub fn stitch_backward_t<T: Scalar>(
    grad_tile: &Array3<T>,
    grid: &PatchGrid,
) -> Result<Vec<Array3<T>>> {
    let p = grid.geometry().patch;
    if grad_tile.dim() != (3, grid.height(), grid.width()) {
        return Err(Error::ShapeMismatch(format!(
            "tile gradient has shape {:?}, expected (3, {}, {})",
            grad_tile.dim(),
            grid.height(),
            grid.width()
        )));
    }
    let coverage = coverage_map(grid);
    let mut weighted = grad_tile.clone();
    for ch in 0..3 {
        weighted
            .slice_mut(s![ch, .., ..])
            .zip_mut_with(&coverage, |v, &n| *v = *v / T::from_const(f64::from(n)));
    }
    Ok(grid
        .origins()
        .map(|(r, c)| weighted.slice(s![.., r..r + p, c..c + p]).to_owned())
        .collect())
}

/// Adjoint of [`stitch`] at working precision.
pub fn stitch_backward(grad_tile: &Array3<f32>, grid: &PatchGrid) -> Result<Vec<Array3<f32>>> {
    stitch_backward_t(grad_tile, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full() -> TileGeometry {
        TileGeometry::FULL_SCALE
    }

    fn desk() -> TileGeometry {
        TileGeometry::DESK_SCALE
    }

    #[test]
    fn full_scale_layout_constants() {
        let g = full();
        assert_eq!(g.stride(), 236);
        assert_eq!(g.input_side(), 296);
        let grid = plan_grid(728, 728, &g).unwrap();
        assert_eq!(grid.row_origins(), &[0, 236, 472]);
        assert_eq!(grid.col_origins(), &[0, 236, 472]);
        assert_eq!(grid.len(), 9);
        // Padding a 728-wide mask by the context margin gives a 768-wide raster.
        let mask = ComponentMask::filled(728, 728, TissueClass::Stroma);
        let padded = pad_mask(&mask, g.context);
        assert_eq!((padded.height(), padded.width()), (768, 768));
    }

    #[test]
    fn desk_scale_layout_constants() {
        let g = desk();
        assert_eq!(g.stride(), 56);
        assert_eq!(g.input_side(), 80);
        let grid = plan_grid(176, 176, &g).unwrap();
        assert_eq!(grid.row_origins(), &[0, 56, 112]);
        assert_eq!(grid.col_origins(), &[0, 56, 112]);
    }

    #[test]
    fn grid_snaps_last_origin_to_edge() {
        let g = desk();
        let grid = plan_grid(352, 352, &g).unwrap();
        assert_eq!(grid.row_origins(), &[0, 56, 112, 168, 224, 280, 288]);
        assert_eq!(grid.row_origins().last(), Some(&288));
    }

    #[test]
    fn grid_rejects_small_rasters() {
        assert!(plan_grid(63, 176, &desk()).is_err());
        assert!(plan_grid(176, 10, &desk()).is_err());
    }

    #[test]
    fn geometry_rejects_bad_parameters() {
        assert!(TileGeometry::new(0, 2, 0).is_err());
        assert!(TileGeometry::new(8, 2, 8).is_err());
        assert!(TileGeometry::new(8, 2, 9).is_err());
        assert!(TileGeometry::new(8, 0, 7).is_ok());
    }

    /// Hand-computed 1-D overlap: P=4, V=2 on an 8-wide strip. Columns 2-5
    /// are covered by two patches, so each contributes with weight 1/2.
    #[test]
    fn one_dimensional_overlap_averages_with_half_weight() {
        let g = TileGeometry::new(4, 0, 2).unwrap();
        let grid = plan_grid(4, 8, &g).unwrap();
        assert_eq!(grid.col_origins(), &[0, 2, 4]);
        let consts = [1.0f32, 3.0, 5.0];
        let patches: Vec<Array3<f32>> = consts
            .iter()
            .map(|&v| Array3::from_elem((3, 4, 4), v))
            .collect();
        let tile = stitch(&patches, &grid).unwrap();
        let expected = [1.0f32, 1.0, 2.0, 2.0, 4.0, 4.0, 5.0, 5.0];
        for (x, &e) in expected.iter().enumerate() {
            for y in 0..4 {
                assert_eq!(tile.data()[[0, y, x]], e, "column {x}");
            }
        }
        let cov = coverage_map(&grid);
        let expected_cov = [1.0f32, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0];
        for (x, &e) in expected_cov.iter().enumerate() {
            assert_eq!(cov[[0, x]], e);
        }
    }

    fn random_tile(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn stitching_extracted_patches_reproduces_the_tile() {
        let g = TileGeometry::new(16, 4, 6).unwrap();
        let reference = random_tile(40, 57, 7);
        let grid = plan_grid(40, 57, &g).unwrap();
        let patches: Vec<Array3<f32>> = grid
            .origins()
            .map(|(r, c)| {
                reference
                    .slice(s![.., r..r + g.patch, c..c + g.patch])
                    .to_owned()
            })
            .collect();
        let tile = stitch(&patches, &grid).unwrap();
        let max_err = reference
            .iter()
            .zip(tile.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-6, "round-trip error {max_err}");
    }

    #[test]
    fn stitch_is_bit_reproducible() {
        let g = desk();
        let grid = plan_grid(176, 176, &g).unwrap();
        let patches: Vec<Array3<f32>> = (0..grid.len())
            .map(|i| random_tile(64, 64, i as u64))
            .collect();
        let a = stitch(&patches, &grid).unwrap();
        let b = stitch(&patches, &grid).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stitch_rejects_wrong_patch_count_and_shape() {
        let g = desk();
        let grid = plan_grid(176, 176, &g).unwrap();
        let patches: Vec<Array3<f32>> = (0..grid.len() - 1)
            .map(|_| Array3::zeros((3, 64, 64)))
            .collect();
        assert!(stitch(&patches, &grid).is_err());
        let mut patches: Vec<Array3<f32>> =
            (0..grid.len()).map(|_| Array3::zeros((3, 64, 64))).collect();
        patches[3] = Array3::zeros((3, 63, 64));
        assert!(stitch(&patches, &grid).is_err());
    }

    /// The stitch is linear: nudging one patch pixel moves the corresponding
    /// tile pixel by exactly the averaging weight.
    #[test]
    fn stitch_backward_matches_finite_differences() {
        let g = TileGeometry::new(4, 1, 2).unwrap();
        let grid = plan_grid(8, 8, &g).unwrap();
        let base: Vec<Array3<f32>> = (0..grid.len())
            .map(|i| random_tile(4, 4, 100 + i as u64))
            .collect();
        let tile0 = stitch(&base, &grid).unwrap();

        // Analytic gradient of L = sum(tile) w.r.t. every patch pixel.
        let ones = Array3::from_elem((3, 8, 8), 1.0f32);
        let grads = stitch_backward(&ones, &grid).unwrap();

        let eps = 0.25f32;
        for pi in [0usize, 3, grid.len() - 1] {
            for &(ch, j, i) in &[(0usize, 0usize, 0usize), (1, 3, 2), (2, 1, 3)] {
                let mut nudged = base.clone();
                nudged[pi][[ch, j, i]] += eps;
                let tile1 = stitch(&nudged, &grid).unwrap();
                let delta: f32 = tile1
                    .data()
                    .iter()
                    .zip(tile0.data().iter())
                    .map(|(a, b)| a - b)
                    .sum();
                let numeric = delta / eps;
                let analytic = grads[pi][[ch, j, i]];
                assert!(
                    (numeric - analytic).abs() < 1e-4,
                    "patch {pi} pixel ({ch},{j},{i}): numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn padded_window_matches_pad_then_extract() {
        let g = TileGeometry::new(16, 4, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels = Array2::from_shape_fn((40, 57), |_| rng.random_range(0u8..3));
        let mask = ComponentMask::from_labels(&labels).unwrap();
        let padded = pad_mask(&mask, g.context);
        let grid = plan_grid(40, 57, &g).unwrap();
        for origin in grid.origins() {
            let via_pad = extract_mask_patch(&padded, origin, &g).unwrap();
            let via_window = mask.padded_window(origin, &g);
            assert_eq!(via_pad, via_window, "origin {origin:?}");
        }
    }

    #[test]
    fn extract_rejects_out_of_bounds_window() {
        let g = desk();
        let mask = ComponentMask::filled(176, 176, TissueClass::Gland);
        let padded = pad_mask(&mask, g.context);
        assert!(extract_mask_patch(&padded, (113, 0), &g).is_err());
        assert!(extract_mask_patch(&padded, (112, 112), &g).is_ok());
    }

    #[test]
    fn pad_mask_zeroes_the_border() {
        let mask = ComponentMask::filled(5, 6, TissueClass::Background);
        let padded = pad_mask(&mask, 3);
        assert_eq!((padded.height(), padded.width()), (11, 12));
        assert_eq!(padded.class_at(0, 0), None);
        assert_eq!(padded.class_at(2, 2), None);
        assert_eq!(padded.class_at(3, 3), Some(TissueClass::Background));
        assert_eq!(padded.class_at(7, 8), Some(TissueClass::Background));
        assert_eq!(padded.class_at(8, 9), None);
    }

    #[test]
    fn mask_validation_rejects_multi_hot_pixels() {
        let mut data = Array3::<u8>::zeros((3, 2, 2));
        data[[0, 0, 0]] = 1;
        data[[1, 0, 0]] = 1;
        assert!(ComponentMask::new(data).is_err());
        let mut data = Array3::<u8>::zeros((3, 2, 2));
        data[[0, 0, 0]] = 2;
        assert!(ComponentMask::new(data).is_err());
    }

    #[test]
    fn mask_png_round_trip_preserves_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = Array2::from_shape_fn((23, 31), |_| rng.random_range(0u8..3));
        let mask = ComponentMask::from_labels(&labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        mask.save_png(&path).unwrap();
        let back = ComponentMask::load_png(&path, DEFAULT_COLOR_TOLERANCE).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn loader_quantises_near_palette_pixels() {
        let mut img = image::RgbImage::new(10, 10);
        for (_, _, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([10, 240, 12]); // close to the gland color
        }
        let mask = ComponentMask::from_rgb_image(&img, DEFAULT_COLOR_TOLERANCE).unwrap();
        assert_eq!(mask.class_fractions()[TissueClass::Gland.channel()], 1.0);
    }

    #[test]
    fn loader_rejects_images_with_too_many_off_palette_pixels() {
        let mut img = image::RgbImage::new(10, 10);
        for (_, _, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([0, 255, 0]);
        }
        // 2 of 100 pixels (2%) are mid-gray, far from every class color.
        img.put_pixel(0, 0, image::Rgb([128, 128, 128]));
        img.put_pixel(5, 5, image::Rgb([128, 128, 128]));
        assert!(ComponentMask::from_rgb_image(&img, DEFAULT_COLOR_TOLERANCE).is_err());
        // A single off pixel (1%) is tolerated and quantised.
        let mut img2 = image::RgbImage::new(10, 10);
        for (_, _, p) in img2.enumerate_pixels_mut() {
            *p = image::Rgb([0, 255, 0]);
        }
        img2.put_pixel(0, 0, image::Rgb([128, 128, 128]));
        assert!(ComponentMask::from_rgb_image(&img2, DEFAULT_COLOR_TOLERANCE).is_ok());
    }

    #[test]
    fn tile_rejects_non_finite_values() {
        let mut data = Array3::<f32>::zeros((3, 4, 4));
        data[[0, 1, 1]] = f32::NAN;
        assert!(Tile::new(data).is_err());
    }

    proptest! {
        #[test]
        fn every_pixel_is_covered_and_last_origin_is_edge_aligned(
            patch in 3usize..14,
            extra_h in 0usize..40,
            extra_w in 0usize..40,
            overlap_frac in 0.0f64..0.99,
        ) {
            let overlap = ((patch as f64) * overlap_frac) as usize;
            let g = TileGeometry::new(patch, 2, overlap).unwrap();
            let (h, w) = (patch + extra_h, patch + extra_w);
            let grid = plan_grid(h, w, &g).unwrap();
            prop_assert_eq!(*grid.row_origins().last().unwrap(), h - patch);
            prop_assert_eq!(*grid.col_origins().last().unwrap(), w - patch);
            let cov = coverage_map(&grid);
            prop_assert!(cov.iter().all(|&c| c >= 1.0));
        }

        #[test]
        fn stitching_constant_patches_yields_a_constant_tile(
            patch in 3usize..10,
            extra in 0usize..30,
            overlap in 0usize..6,
            value in -1.0f32..1.0,
        ) {
            prop_assume!(overlap < patch);
            let g = TileGeometry::new(patch, 1, overlap).unwrap();
            let (h, w) = (patch + extra, patch + extra / 2);
            let grid = plan_grid(h, w, &g).unwrap();
            let patches: Vec<Array3<f32>> =
                (0..grid.len()).map(|_| Array3::from_elem((3, patch, patch), value)).collect();
            let tile = stitch(&patches, &grid).unwrap();
            // Weights at every pixel sum to one, so a constant survives exactly.
            prop_assert!(tile.data().iter().all(|&v| v == value));
        }
    }
}
