//! Paired mask/image samples: disk loading, tile extraction, and a fully
//! synthetic toy corpus for end-to-end runs without external data.
//!
//! Images live in `[-1, 1]` per channel in memory and as 8-bit RGB PNGs on
//! disk. A dataset directory holds `images/*.png` with a same-stem mask for
//! each under `masks/*.png`.

use crate::error::{Error, Result};
use crate::geometry::{ComponentMask, Tile, TissueClass, DEFAULT_COLOR_TOLERANCE};
use crate::maskgen::{synthesize_mask, MaskSpec};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

/// One training pair: a component mask and the image it annotates.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// One-hot tissue-class mask.
    pub mask: ComponentMask,
    /// Image in `[-1, 1]`, same height and width as the mask.
    pub image: Tile,
}

impl TrainingSample {
    /// Pairs a mask with an image after checking that their sizes agree.
    pub fn new(mask: ComponentMask, image: Tile) -> Result<Self> {
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::Dataset(format!(
                "mask is {}x{} but image is {}x{}",
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(TrainingSample { mask, image })
    }
}

// ---------------------------------------------------------------------------
// Value-range conversion
// ---------------------------------------------------------------------------

/// Maps an 8-bit channel value onto `[-1, 1]`.
pub fn to_unit_range(v: u8) -> f32 {
    2.0 * f32::from(v) / 255.0 - 1.0
}

/// Quantizes a `[-1, 1]` channel value back to 8 bits (clamping first).
pub fn from_unit_range(v: f32) -> u8 {
    let clamped = v.clamp(-1.0, 1.0);
    ((clamped + 1.0) * 255.0 / 2.0).round() as u8
}

/// Decodes an RGB image into a `(3, h, w)` array in `[-1, 1]`.
pub fn image_to_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = to_unit_range(px.0[c]);
        }
    }
    out
}

/// Quantizes a `(3, h, w)` array in `[-1, 1]` into an RGB image.
pub fn array_to_image(data: &Array3<f32>) -> Result<image::RgbImage> {
    let (c, h, w) = data.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("image contains non-finite values".into()));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = from_unit_range(data[(ch, y as usize, x as usize)]);
        }
    }
    Ok(img)
}

/// Writes a `[-1, 1]` image array to an RGB PNG.
pub fn save_image_png(data: &Array3<f32>, path: impl AsRef<Path>) -> Result<()> {
    array_to_image(data)?
        .save(path.as_ref())
        .map_err(Error::Image)
}

/// Reads an RGB PNG into a `[-1, 1]` image array.
pub fn load_image_png(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let img = image::ImageReader::open(path.as_ref())?
        .decode()
        .map_err(Error::Image)?
        .to_rgb8();
    Ok(image_to_array(&img))
}

// ---------------------------------------------------------------------------
// Disk loading
// ---------------------------------------------------------------------------

/// Loads one image/mask PNG pair, quantizing mask colors to the palette.
pub fn load_pair(
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
    color_tolerance: f64,
) -> Result<TrainingSample> {
    let image = Tile::new(load_image_png(image_path)?)?;
    let mask = ComponentMask::load_png(mask_path, color_tolerance)?;
    TrainingSample::new(mask, image)
}

/// Finds `images/*.png` with the matching `masks/<stem>.png` for each,
/// sorted by stem. A missing counterpart is an error.
pub fn scan_dataset(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing images directory at {}",
            images_dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for entry in std::fs::read_dir(&images_dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("unreadable file name {}", path.display())))?;
        let mask = masks_dir.join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(Error::Dataset(format!(
                "image {stem}.png has no mask at {}",
                mask.display()
            )));
        }
        pairs.push((path, mask));
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG images under {}",
            images_dir.display()
        )));
    }
    pairs.sort();
    Ok(pairs)
}

/// Loads every pair found by [`scan_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    scan_dataset(dir)?
        .into_iter()
        .map(|(img, mask)| load_pair(img, mask, DEFAULT_COLOR_TOLERANCE))
        .collect()
}

// ---------------------------------------------------------------------------
// Tile extraction
// ---------------------------------------------------------------------------

/// Number of fully contained sliding windows along one axis.
pub fn windows_along(length: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidGeometry(
            "window and stride must be positive".into(),
        ));
    }
    if length < window {
        return Ok(0);
    }
    Ok((length - window) / stride + 1)
}

/// Cuts a sample into every fully contained `tile_side` square at `stride`.
///
/// A 1516x1512 sample at tile 728 and stride 200 yields 4x4 = 16 tiles.
pub fn extract_tiles(
    sample: &TrainingSample,
    tile_side: usize,
    stride: usize,
) -> Result<Vec<TrainingSample>> {
    let h = sample.mask.height();
    let w = sample.mask.width();
    let rows = windows_along(h, tile_side, stride)?;
    let cols = windows_along(w, tile_side, stride)?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidGeometry(format!(
            "tile side {tile_side} exceeds the {h}x{w} sample"
        )));
    }
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (top, left) = (r * stride, c * stride);
            let mask = sample.mask.crop(top, left, tile_side, tile_side)?;
            let image = Tile::new(
                sample
                    .image
                    .data()
                    .slice(ndarray::s![.., top..top + tile_side, left..left + tile_side])
                    .to_owned(),
            )?;
            tiles.push(TrainingSample { mask, image });
        }
    }
    Ok(tiles)
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

/// Rendering recipe for the synthetic corpus. Colors are 8-bit RGB means;
/// glands additionally get a boundary ring (darker toward the rim, a feature
/// the generator can learn because it is computable from the mask alone)
/// and every class gets small i.i.d. Gaussian noise.
#[derive(Clone, Debug)]
pub struct ToyStyle {
    /// Base gland color (8-bit scale).
    pub gland_rgb: [f64; 3],
    /// Base stroma color.
    pub stroma_rgb: [f64; 3],
    /// Base background color.
    pub background_rgb: [f64; 3],
    /// Maximum darkening at the gland rim (8-bit units).
    pub ring_depth: f64,
    /// How deep (pixels) the rim shading reaches into a gland.
    pub ring_width: usize,
    /// Standard deviation of the additive noise (8-bit units).
    pub noise: f64,
}

impl Default for ToyStyle {
    fn default() -> Self {
        ToyStyle {
            gland_rgb: [140.0, 90.0, 160.0],
            stroma_rgb: [225.0, 170.0, 200.0],
            background_rgb: [246.0, 246.0, 244.0],
            ring_depth: 40.0,
            ring_width: 6,
            noise: 6.0,
        }
    }
}

/// Synthetic paired corpus plus its measured per-class color statistics.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    /// The rendered mask/image pairs.
    pub samples: Vec<TrainingSample>,
    /// Mean rendered color per class and channel, in `[-1, 1]` units,
    /// measured over the whole corpus. Class index = channel index of
    /// [`TissueClass`]. This is the reference a mean-matching generator
    /// should reproduce.
    pub class_means: [[f64; 3]; 3],
}

/// Steps from each gland pixel to the nearest non-gland pixel (4-connected);
/// non-gland pixels get 0. Unreachable pixels (an all-gland mask) saturate.
fn gland_depth(mask: &ComponentMask) -> Array2<u32> {
    let (h, w) = (mask.height(), mask.width());
    let mut depth = Array2::<u32>::from_elem((h, w), u32::MAX);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask.class_at(y, x) != Some(TissueClass::Gland) {
                depth[(y, x)] = 0;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let d = depth[(y, x)] + 1;
        let push = |ny: usize, nx: usize, depth: &mut Array2<u32>, q: &mut VecDeque<_>| {
            if depth[(ny, nx)] > d {
                depth[(ny, nx)] = d;
                q.push_back((ny, nx));
            }
        };
        if y > 0 {
            push(y - 1, x, &mut depth, &mut queue);
        }
        if y + 1 < h {
            push(y + 1, x, &mut depth, &mut queue);
        }
        if x > 0 {
            push(y, x - 1, &mut depth, &mut queue);
        }
        if x + 1 < w {
            push(y, x + 1, &mut depth, &mut queue);
        }
    }
    depth
}

/// Renders one mask into an image under `style`, deterministically in `seed`.
pub fn render_toy_image(mask: &ComponentMask, style: &ToyStyle, seed: u64) -> Result<Tile> {
    let (h, w) = (mask.height(), mask.width());
    let depth = gland_depth(mask);
    let noise = Normal::new(0.0f64, style.noise.max(0.0)).map_err(|e| {
        Error::InvalidSpec(format!("invalid noise level {}: {e}", style.noise))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let class = mask.class_at(y, x).ok_or_else(|| {
                Error::InvalidMask(format!("unlabeled pixel at ({y}, {x})"))
            })?;
            let base = match class {
                TissueClass::Gland => style.gland_rgb,
                TissueClass::Stroma => style.stroma_rgb,
                TissueClass::Background => style.background_rgb,
            };
            let shade = if class == TissueClass::Gland && style.ring_width > 0 {
                let d = depth[(y, x)] as f64;
                let reach = style.ring_width as f64;
                if d <= reach {
                    style.ring_depth * (1.0 - (d - 1.0) / reach)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            for c in 0..3 {
                let v = base[c] - shade + noise.sample(&mut rng);
                data[(c, y, x)] = to_unit_range(from_unit_range((2.0 * v / 255.0 - 1.0) as f32));
            }
        }
    }
    Tile::new(data)
}

/// Measured per-class channel means of a set of samples, in `[-1, 1]` units.
pub fn class_color_means(samples: &[TrainingSample]) -> Result<[[f64; 3]; 3]> {
    let mut sums = [[0.0f64; 3]; 3];
    let mut counts = [0u64; 3];
    for sample in samples {
        for y in 0..sample.mask.height() {
            for x in 0..sample.mask.width() {
                if let Some(class) = sample.mask.class_at(y, x) {
                    let k = class.channel();
                    counts[k] += 1;
                    for c in 0..3 {
                        sums[k][c] += f64::from(sample.image.data()[(c, y, x)]);
                    }
                }
            }
        }
    }
    let mut means = [[0.0f64; 3]; 3];
    for k in 0..3 {
        if counts[k] == 0 {
            return Err(Error::Dataset(format!(
                "class {k} never occurs; cannot form its color statistics"
            )));
        }
        for c in 0..3 {
            means[k][c] = sums[k][c] / counts[k] as f64;
        }
    }
    Ok(means)
}

/// Builds `n` synthetic mask/image pairs of side `tile_side`, seeded and
/// fully deterministic, together with their measured class color means.
///
/// Unlike the standalone mask synthesiser (whose default non-gland fill is
/// 90% stroma), the toy corpus balances stroma and background and shrinks
/// the glands so every class carries enough pixels to be a fair learning
/// target on a handful of small tiles: a class at a few percent of the
/// corpus contributes almost nothing to a mean-reduced reconstruction loss
/// and its color would stay unlearned for thousands of steps.
///
/// Small corpora can still miss a class by chance, which would leave the
/// color statistics undefined; the seed is then advanced deterministically
/// until every class occurs.
pub fn make_toy_dataset(
    n: usize,
    tile_side: usize,
    style: &ToyStyle,
    seed: u64,
) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::Dataset("requested an empty toy dataset".into()));
    }
    'attempt: for attempt in 0..64u64 {
        let base = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut samples = Vec::with_capacity(n);
        let mut seen = [false; 3];
        for i in 0..n {
            let sample_seed = base.wrapping_add(i as u64);
            let spec = MaskSpec {
                // smaller glands + an even fill leave stroma and background
                // roughly 30% of the canvas each
                ellipse_axes: (8.0, 20.0),
                stroma_prob: 0.5,
                background_prob: 0.5,
                ..MaskSpec::new(tile_side, tile_side, sample_seed)
            };
            let mask = synthesize_mask(&spec)?;
            for (k, &fraction) in mask.class_fractions().iter().enumerate() {
                seen[k] |= fraction > 0.0;
            }
            let image = render_toy_image(&mask, style, sample_seed ^ 0x746f79)?;
            samples.push(TrainingSample { mask, image });
        }
        if seen.iter().any(|s| !s) {
            continue 'attempt;
        }
        let class_means = class_color_means(&samples)?;
        return Ok(ToyDataset {
            samples,
            class_means,
        });
    }
    Err(Error::Dataset(format!(
        "no {tile_side}x{tile_side} corpus of {n} samples shows all three classes \
         within the attempt budget"
    )))
}
