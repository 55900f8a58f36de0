//! Procedural synthesis of tissue component masks.
//!
//! A canvas is divided into 100x100-pixel blocks; each block receives a
//! uniformly drawn number of elliptical gland objects at uniformly random
//! centers (overlaps union into one gland region, and ellipses may spill
//! into neighbouring blocks). Every remaining pixel is labelled stroma or
//! background by an independent per-pixel draw. The whole process is a pure
//! function of the spec, including its seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ComponentMask, TissueClass};

/// Side of the placement blocks, in pixels.
pub const BLOCK_SIDE: usize = 100;

/// Parameters for synthetic mask generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of gland objects per 100x100 block.
    pub glands_per_block: (u32, u32),
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub ellipse_axes: (f64, f64),
    /// Probability that a non-gland pixel is stroma.
    pub stroma_prob: f64,
    /// Probability that a non-gland pixel is background.
    pub background_prob: f64,
    pub seed: u64,
}

impl MaskSpec {
    /// Default spec: 3-7 glands per block, semi-axes 10-30 px, stroma 0.9.
    ///
    /// The semi-axis ceiling is chosen so that the union of 3-7 random
    /// ellipses per block covers well under 60% of the canvas (at 40 px the
    /// expected union coverage already exceeds 0.6, leaving no gland-free
    /// room); 10-30 px yields a roughly 45% gland fraction.
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        MaskSpec {
            height,
            width,
            glands_per_block: (3, 7),
            ellipse_axes: (10.0, 30.0),
            stroma_prob: 0.9,
            background_prob: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("mask dims must be positive".into()));
        }
        let (lo, hi) = self.glands_per_block;
        if lo < 1 || hi > 50 || lo > hi {
            return Err(Error::InvalidSpec(format!(
                "glands_per_block range [{lo}, {hi}] must lie in [1, 50]"
            )));
        }
        let (alo, ahi) = self.ellipse_axes;
        if !(alo > 0.0 && ahi >= alo && ahi < BLOCK_SIDE as f64) {
            return Err(Error::InvalidSpec(format!(
                "ellipse semi-axis range [{alo}, {ahi}] must be positive and below {BLOCK_SIDE}"
            )));
        }
        if !(self.stroma_prob >= 0.0 && self.background_prob >= 0.0) {
            return Err(Error::InvalidSpec("class probabilities must be non-negative".into()));
        }
        if (self.stroma_prob + self.background_prob - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "stroma_prob ({}) + background_prob ({}) must equal 1",
                self.stroma_prob, self.background_prob
            )));
        }
        Ok(())
    }
}

/// Gland placements drawn for one 100x100-aligned block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockReport {
    /// Top-left corner of the block, in pixels.
    pub origin: (usize, usize),
    /// Number of gland objects whose centers were drawn inside this block.
    pub gland_count: u32,
}

/// Per-block record of what the synthesiser drew.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthesisReport {
    pub blocks: Vec<BlockReport>,
}

/// Synthesises a component mask from the spec (deterministic, seed included).
pub fn synthesize_mask(spec: &MaskSpec) -> Result<ComponentMask> {
    synthesize_mask_with_report(spec).map(|(mask, _)| mask)
}

/// As [`synthesize_mask`], but also returns the per-block gland counts so
/// placement statistics can be audited.
pub fn synthesize_mask_with_report(spec: &MaskSpec) -> Result<(ComponentMask, SynthesisReport)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut gland = Array2::<bool>::from_elem((h, w), false);
    let mut report = SynthesisReport::default();

    // Each block draws from its own ChaCha stream so the result does not
    // depend on block iteration order.
    let mut block_index = 0u64;
    for by in (0..h).step_by(BLOCK_SIDE) {
        for bx in (0..w).step_by(BLOCK_SIDE) {
            block_index += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(block_index);
            let (bh, bw) = ((h - by).min(BLOCK_SIDE), (w - bx).min(BLOCK_SIDE));
            let count = rng.random_range(spec.glands_per_block.0..=spec.glands_per_block.1);
            for _ in 0..count {
                let cy = by as f64 + rng.random_range(0.0..bh as f64);
                let cx = bx as f64 + rng.random_range(0.0..bw as f64);
                let a = rng.random_range(spec.ellipse_axes.0..=spec.ellipse_axes.1);
                let b = rng.random_range(spec.ellipse_axes.0..=spec.ellipse_axes.1);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                rasterize_ellipse(&mut gland, (cy, cx), (a, b), theta);
            }
            report.blocks.push(BlockReport {
                origin: (by, bx),
                gland_count: count,
            });
        }
    }

    // Independent per-pixel stroma/background fill on stream 0.
    let mut fill_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    fill_rng.set_stream(0);
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            labels[[y, x]] = if gland[[y, x]] {
                TissueClass::Gland.channel() as u8
            } else if fill_rng.random::<f64>() < spec.stroma_prob {
                TissueClass::Stroma.channel() as u8
            } else {
                TissueClass::Background.channel() as u8
            };
        }
    }
    Ok((ComponentMask::from_labels(&labels)?, report))
}

/// Marks every pixel inside a rotated ellipse.
fn rasterize_ellipse(gland: &mut Array2<bool>, center: (f64, f64), axes: (f64, f64), theta: f64) {
    let (h, w) = gland.dim();
    let (cy, cx) = center;
    let (a, b) = axes;
    let r = a.max(b);
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    let (sin, cos) = theta.sin_cos();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                gland[[y, x]] = true;
            }
        }
    }
}

/// Fractions of labelled pixels per class, in channel order. Padding pixels
/// are excluded from the denominator; an all-padding mask returns zeros.
pub fn mask_class_stats(mask: &ComponentMask) -> [f64; 3] {
    let mut counts = [0u64; 3];
    let mut labelled = 0u64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if let Some(class) = mask.class_at(y, x) {
                counts[class.channel()] += 1;
                labelled += 1;
            }
        }
    }
    if labelled == 0 {
        return [0.0; 3];
    }
    counts.map(|c| c as f64 / labelled as f64)
}

/// Optional post-processing: replaces each pixel's class by the majority of
/// its 3x3 neighbourhood (ties keep the center). Off by default; the literal
/// per-pixel fill is the contract.
pub fn majority_smooth(mask: &ComponentMask, passes: usize) -> ComponentMask {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            labels[[y, x]] = mask.class_at(y, x).map_or(0, |c| c.channel() as u8);
        }
    }
    for _ in 0..passes {
        let prev = labels.clone();
        for y in 0..h {
            for x in 0..w {
                let mut votes = [0u8; 3];
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            votes[prev[[ny as usize, nx as usize]] as usize] += 1;
                        }
                    }
                }
                let center = prev[[y, x]] as usize;
                let best = (0..3).max_by_key(|&c| (votes[c], usize::from(c == center))).unwrap();
                labels[[y, x]] = best as u8;
            }
        }
    }
    ComponentMask::from_labels(&labels).expect("labels stay in range")
}
