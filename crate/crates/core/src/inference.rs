//! Image generation from a trained patch generator.
//!
//! [`generate_tile`] renders a mask of any planable size in memory; its
//! transient footprint is dominated by one patch's activations, independent
//! of the output size, because patch contributions are divided by their
//! (separable) coverage count and added straight into the output canvas.
//!
//! [`generate_streaming`] renders arbitrarily tall images without ever
//! holding them: mask rows come from a [`MaskBandSource`], finished image
//! rows leave through an [`ImageBandSink`], and only one patch-row
//! accumulation band plus one mask band stay resident.

use crate::error::{Error, Result};
use crate::geometry::{plan_grid, ComponentMask, Tile, TileGeometry};
use crate::nets::Generator;
use ndarray::{s, Array3};

fn check_generator_geometry(generator: &Generator<f32>, geometry: &TileGeometry) -> Result<()> {
    let spec = generator.spec();
    if spec.output_side != geometry.patch || spec.input_side != geometry.input_side() {
        return Err(Error::InvalidSpec(format!(
            "generator maps {} -> {} but the tile geometry needs {} -> {}",
            spec.input_side,
            spec.output_side,
            geometry.input_side(),
            geometry.patch
        )));
    }
    Ok(())
}

/// How many patch intervals starting at `origins` cover each coordinate.
fn axis_coverage(origins: &[usize], patch: usize, extent: usize) -> Vec<f32> {
    let mut cov = vec![0u32; extent];
    for &o in origins {
        for v in cov[o..o + patch].iter_mut() {
            *v += 1;
        }
    }
    cov.into_iter().map(|c| c as f32).collect()
}

/// Renders the full `mask` with overlap averaging. Errors if the mask is
/// smaller than one patch or the generator does not fit `geometry`.
pub fn generate_tile(
    generator: &Generator<f32>,
    mask: &ComponentMask,
    geometry: &TileGeometry,
) -> Result<Tile> {
    check_generator_geometry(generator, geometry)?;
    let grid = plan_grid(mask.height(), mask.width(), geometry)?;
    let p = geometry.patch;
    let row_cov = axis_coverage(grid.row_origins(), p, grid.height());
    let col_cov = axis_coverage(grid.col_origins(), p, grid.width());
    let mut canvas = Array3::<f32>::zeros((3, grid.height(), grid.width()));
    for (r, c) in grid.origins() {
        let window = mask.padded_window((r, c), geometry).to_input();
        let out = generator.forward(&window)?;
        let mut region = canvas.slice_mut(s![.., r..r + p, c..c + p]);
        for ch in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    region[[ch, dy, dx]] += out[[ch, dy, dx]] / (row_cov[r + dy] * col_cov[c + dx]);
                }
            }
        }
    }
    Tile::new(canvas)
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

/// Row-banded provider of one-hot mask data.
pub trait MaskBandSource {
    /// `(height, width)` of the full mask.
    fn dimensions(&self) -> (usize, usize);
    /// Copies mask rows `[top, top + rows)` as a one-hot `(3, rows, width)`
    /// array.
    fn read_rows(&mut self, top: usize, rows: usize) -> Result<Array3<u8>>;
}

/// Row-banded consumer of generated image data. [`generate_streaming`]
/// delivers bands in order, each row exactly once.
pub trait ImageBandSink {
    /// Receives finished image rows `[top, top + band_height)` as a
    /// `(3, band_height, width)` array of values in `[-1, 1]`.
    fn write_rows(&mut self, top: usize, band: &Array3<f32>) -> Result<()>;
}

/// Counters describing one streaming run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamReport {
    /// Patches pushed through the generator.
    pub patches_generated: usize,
    /// Image rows delivered to the sink (equals the mask height).
    pub rows_emitted: usize,
    /// Largest number of mask rows resident at once.
    pub max_input_rows_resident: usize,
}

/// [`MaskBandSource`] over an in-memory mask.
pub struct MemoryMaskSource<'a> {
    mask: &'a ComponentMask,
}

impl<'a> MemoryMaskSource<'a> {
    /// Wraps a mask held in memory.
    pub fn new(mask: &'a ComponentMask) -> Self {
        MemoryMaskSource { mask }
    }
}

impl MaskBandSource for MemoryMaskSource<'_> {
    fn dimensions(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }

    fn read_rows(&mut self, top: usize, rows: usize) -> Result<Array3<u8>> {
        if top + rows > self.mask.height() {
            return Err(Error::InvalidMask(format!(
                "rows [{top}, {}) exceed mask height {}",
                top + rows,
                self.mask.height()
            )));
        }
        Ok(self.mask.data().slice(s![.., top..top + rows, ..]).to_owned())
    }
}

/// [`ImageBandSink`] assembling bands into a full in-memory image.
pub struct MemoryImageSink {
    image: Array3<f32>,
    row_filled: Vec<bool>,
}

impl MemoryImageSink {
    /// Prepares a canvas for an image of the given size.
    pub fn new(height: usize, width: usize) -> Self {
        MemoryImageSink {
            image: Array3::zeros((3, height, width)),
            row_filled: vec![false; height],
        }
    }

    /// Returns the assembled image, erroring if any row never arrived.
    pub fn finish(self) -> Result<Tile> {
        if let Some(row) = self.row_filled.iter().position(|f| !f) {
            return Err(Error::Dataset(format!(
                "streaming ended before row {row} was generated"
            )));
        }
        Tile::new(self.image)
    }
}

impl ImageBandSink for MemoryImageSink {
    fn write_rows(&mut self, top: usize, band: &Array3<f32>) -> Result<()> {
        let (c, rows, w) = band.dim();
        let (ic, ih, iw) = self.image.dim();
        if c != ic || w != iw || top + rows > ih {
            return Err(Error::ShapeMismatch(format!(
                "band ({c}, {rows}, {w}) at row {top} does not fit a ({ic}, {ih}, {iw}) image"
            )));
        }
        self.image
            .slice_mut(s![.., top..top + rows, ..])
            .assign(band);
        for f in &mut self.row_filled[top..top + rows] {
            *f = true;
        }
        Ok(())
    }
}

/// Streams generation top to bottom: reads one mask band per patch row,
/// renders its patches into a rolling accumulation band, and emits image
/// rows as soon as no later patch can touch them. Resident state is one
/// `(3, patch, width)` accumulator plus one mask band — independent of the
/// image height. Output matches [`generate_tile`] exactly.
pub fn generate_streaming(
    generator: &Generator<f32>,
    source: &mut dyn MaskBandSource,
    sink: &mut dyn ImageBandSink,
    geometry: &TileGeometry,
) -> Result<StreamReport> {
    check_generator_geometry(generator, geometry)?;
    let (h, w) = source.dimensions();
    let grid = plan_grid(h, w, geometry)?;
    let p = geometry.patch;
    let side = geometry.input_side();
    let ctx = geometry.context;
    let row_cov = axis_coverage(grid.row_origins(), p, h);
    let col_cov = axis_coverage(grid.col_origins(), p, w);
    let mut report = StreamReport {
        patches_generated: 0,
        rows_emitted: 0,
        max_input_rows_resident: 0,
    };
    // Accumulator for image rows [base_top, base_top + patch).
    let mut carry = Array3::<f32>::zeros((3, p, w));
    let mut base_top = 0usize;
    for &y in grid.row_origins() {
        if y > base_top {
            // Rows above the new origin are final: emit and scroll.
            let shift = y - base_top;
            let done = carry.slice(s![.., ..shift, ..]).to_owned();
            sink.write_rows(base_top, &done)?;
            report.rows_emitted += shift;
            let tail = carry.slice(s![.., shift.., ..]).to_owned();
            carry.slice_mut(s![.., ..p - shift, ..]).assign(&tail);
            carry.slice_mut(s![.., p - shift.., ..]).fill(0.0);
            base_top = y;
        }
        // Mask rows feeding this patch row, clipped to the image.
        let read_top = y.saturating_sub(ctx);
        let read_bot = (y + p + ctx).min(h);
        let rows = read_bot - read_top;
        let band = source.read_rows(read_top, rows)?;
        if band.dim() != (3, rows, w) {
            return Err(Error::InvalidMask(format!(
                "source returned {:?}, expected (3, {rows}, {w})",
                band.dim()
            )));
        }
        report.max_input_rows_resident = report.max_input_rows_resident.max(rows);
        // Vertically zero-padded band at full width.
        let mut vband = Array3::<f32>::zeros((3, side, w));
        let off = ctx.saturating_sub(y);
        vband
            .slice_mut(s![.., off..off + rows, ..])
            .assign(&band.mapv(|v| f32::from(v)));
        for &x in grid.col_origins() {
            // Horizontally zero-padded window for one patch.
            let mut win = Array3::<f32>::zeros((3, side, side));
            let x0 = x.saturating_sub(ctx);
            let x1 = (x + p + ctx).min(w);
            let woff = ctx.saturating_sub(x);
            win.slice_mut(s![.., .., woff..woff + (x1 - x0)])
                .assign(&vband.slice(s![.., .., x0..x1]));
            let out = generator.forward(&win)?;
            report.patches_generated += 1;
            for ch in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        carry[[ch, dy, x + dx]] +=
                            out[[ch, dy, dx]] / (row_cov[y + dy] * col_cov[x + dx]);
                    }
                }
            }
        }
    }
    let done = carry.slice(s![.., ..h - base_top, ..]).to_owned();
    sink.write_rows(base_top, &done)?;
    report.rows_emitted += h - base_top;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;
    use crate::data::ToyStyle;
    use crate::geometry::plan_grid;
    use crate::nets::{init_params, DiscriminatorSpec, GeneratorSpec};
    use crate::training::stitched_forward_t;

    fn micro_generator(seed: u64) -> Generator<f32> {
        let gen_spec = GeneratorSpec {
            input_side: 24,
            output_side: 16,
            depth: 2,
            base_channels: 4,
            skip_connections: true,
        };
        let disc_spec = DiscriminatorSpec {
            input_side: 28,
            input_channels: 6,
            blocks: 2,
            base_channels: 4,
        };
        init_params(&gen_spec, &disc_spec, seed).unwrap().generator
    }

    fn geometry() -> TileGeometry {
        TileGeometry::new(16, 4, 4).unwrap()
    }

    fn toy_mask(h: usize, w: usize, seed: u64) -> ComponentMask {
        // synthesize a tall toy corpus tile and crop it to the wanted size
        let side = h.max(w).max(110);
        let ds = make_toy_dataset(1, side, &ToyStyle::default(), seed).unwrap();
        ds.samples[0].mask.crop(0, 0, h, w).unwrap()
    }

    #[test]
    fn matches_the_training_time_stitch() {
        let g = micro_generator(11);
        let mask = toy_mask(28, 28, 11);
        let tile = generate_tile(&g, &mask, &geometry()).unwrap();
        let fwd = stitched_forward_t(&g, &mask.to_input(), &geometry()).unwrap();
        let max_diff = tile
            .data()
            .iter()
            .zip(fwd.tile.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        // same arithmetic up to accumulation order (f32 vs f64 accumulator)
        assert!(max_diff < 1e-5, "max deviation {max_diff}");
    }

    #[test]
    fn rejects_masks_smaller_than_a_patch_and_wrong_geometry() {
        let g = micro_generator(0);
        let small = ComponentMask::filled(8, 8, crate::geometry::TissueClass::Stroma);
        assert!(generate_tile(&g, &small, &geometry()).is_err());
        let wrong = TileGeometry::new(8, 2, 2).unwrap();
        let mask = ComponentMask::filled(28, 28, crate::geometry::TissueClass::Stroma);
        assert!(generate_tile(&g, &mask, &wrong).is_err());
    }

    #[test]
    fn streaming_equals_in_memory_generation_exactly() {
        let g = micro_generator(21);
        // 40 rows -> origins {0, 12, 24}; 28 cols -> {0, 12}
        let mask = toy_mask(40, 28, 21);
        let tile = generate_tile(&g, &mask, &geometry()).unwrap();
        let mut source = MemoryMaskSource::new(&mask);
        let mut sink = MemoryImageSink::new(40, 28);
        let report = generate_streaming(&g, &mut source, &mut sink, &geometry()).unwrap();
        let streamed = sink.finish().unwrap();
        assert_eq!(tile.data(), streamed.data(), "bit-exact agreement");
        let grid = plan_grid(40, 28, &geometry()).unwrap();
        assert_eq!(report.patches_generated, grid.len());
        assert_eq!(report.rows_emitted, 40);
        assert!(report.max_input_rows_resident <= geometry().input_side());
    }

    #[test]
    fn streaming_handles_edge_snapped_final_rows() {
        let g = micro_generator(31);
        // 34 rows: origins {0, 12, 18} (snapped final origin, shift 6 < stride)
        let mask = toy_mask(34, 28, 31);
        let grid = plan_grid(34, 28, &geometry()).unwrap();
        assert_eq!(grid.row_origins(), &[0, 12, 18]);
        let tile = generate_tile(&g, &mask, &geometry()).unwrap();
        let mut source = MemoryMaskSource::new(&mask);
        let mut sink = MemoryImageSink::new(34, 28);
        generate_streaming(&g, &mut source, &mut sink, &geometry()).unwrap();
        assert_eq!(tile.data(), sink.finish().unwrap().data());
    }

    #[test]
    fn memory_sink_rejects_gaps_and_misfits() {
        let mut sink = MemoryImageSink::new(20, 10);
        let band = Array3::<f32>::zeros((3, 5, 10));
        sink.write_rows(0, &band).unwrap();
        // wrong width
        assert!(sink.write_rows(5, &Array3::<f32>::zeros((3, 5, 9))).is_err());
        // past the bottom
        assert!(sink.write_rows(18, &band).is_err());
        // unfinished canvas refuses to finalize
        assert!(sink.finish().is_err());
    }

    #[test]
    fn empty_source_is_an_error() {
        let g = micro_generator(0);
        let mask = ComponentMask::filled(0, 0, crate::geometry::TissueClass::Stroma);
        let mut source = MemoryMaskSource::new(&mask);
        let mut sink = MemoryImageSink::new(0, 0);
        assert!(generate_streaming(&g, &mut source, &mut sink, &geometry()).is_err());
    }
}
