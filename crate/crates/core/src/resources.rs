//! Compute and memory cost model: patch-count arithmetic, GFlop totals for
//! generating images of a given size, exact per-layer operation counting,
//! and a training RAM estimate.
//!
//! The headline patch count is the area formula `M·N / S²` (edge effects
//! ignored); an exact mode reports the true planned grid size. Flops follow
//! the convention that one multiply-accumulate is two Flops, so Mult-Adds
//! are always half the Flops — both units are reported side by side.

use crate::error::{Error, Result};
use crate::geometry::{plan_grid, TileGeometry};
use crate::nets::{
    discriminator_layer_shapes, generator_layer_shapes, ConvLayerShape, DiscriminatorSpec,
    GeneratorSpec,
};

/// Forward cost of the full-scale generator on one patch, in GFlops. Used as
/// the default per-patch constant in image-level totals.
pub const DEFAULT_GFLOPS_PER_PATCH: f64 = 56.25;

/// Published training-memory figure (GB) of the full-scale pipeline, kept
/// for qualitative comparison with [`estimate_train_ram`]; the exact channel
/// configuration behind it is unpublished, so it is never asserted equal.
pub const REFERENCE_TRAIN_RAM_GB: f64 = 0.35;

/// Cost summary for generating one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceEstimate {
    /// Patch count by the area formula (real-valued).
    pub n_patches: f64,
    /// Forward GFlops per patch.
    pub per_patch_gflops: f64,
    /// `n_patches * per_patch_gflops`.
    pub total_gflops: f64,
    /// `total_gflops / 2` (one multiply-accumulate = two Flops).
    pub mult_adds_g: f64,
}

/// Patch count needed for an `height x width` image at stride `stride`, by
/// the area formula `height·width / stride²`. Real-valued: edge effects are
/// ignored. See [`patches_exact`] for the true grid count.
pub fn patches_needed(height: f64, width: f64, stride: f64) -> Result<f64> {
    if !(height > 0.0 && width > 0.0 && stride > 0.0)
        || !(height.is_finite() && width.is_finite() && stride.is_finite())
    {
        return Err(Error::InvalidGeometry(format!(
            "patch count needs positive finite dimensions, got {height} x {width} / {stride}"
        )));
    }
    Ok(height * width / (stride * stride))
}

/// Exact patch count of the planned grid (edge-snapped), which exceeds the
/// area formula on all but perfectly tiling sizes.
pub fn patches_exact(height: usize, width: usize, geometry: &TileGeometry) -> Result<usize> {
    Ok(plan_grid(height, width, geometry)?.len())
}

/// Image-level generation cost at `per_patch_gflops` per patch.
pub fn total_gflops(
    height: f64,
    width: f64,
    stride: f64,
    per_patch_gflops: f64,
) -> Result<ResourceEstimate> {
    if !(per_patch_gflops.is_finite() && per_patch_gflops > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "per-patch cost must be positive and finite, got {per_patch_gflops}"
        )));
    }
    let n_patches = patches_needed(height, width, stride)?;
    let total = n_patches * per_patch_gflops;
    Ok(ResourceEstimate {
        n_patches,
        per_patch_gflops,
        total_gflops: total,
        mult_adds_g: total / 2.0,
    })
}

/// Flops of one layer's forward pass: two per multiply-accumulate, matching
/// the GEMM arithmetic actually performed. A padded convolution computes
/// `out² · k² · c_in · c_out` MACs (zero-padding taps included); a
/// transposed convolution scatters every input position through all `k²`
/// taps for `in² · k² · c_in · c_out` MACs.
pub fn count_layer_flops(layer: &ConvLayerShape) -> f64 {
    let taps = (layer.kernel * layer.kernel * layer.c_in * layer.c_out) as f64;
    let positions = if layer.transposed {
        (layer.in_side * layer.in_side) as f64
    } else {
        (layer.out_side * layer.out_side) as f64
    };
    2.0 * taps * positions
}

/// Total forward GFlops of a layer stack.
pub fn count_layers_gflops(layers: &[ConvLayerShape]) -> f64 {
    layers.iter().map(count_layer_flops).sum::<f64>() / 1e9
}

/// Forward GFlops of one generator pass on one patch.
pub fn count_generator_gflops(spec: &GeneratorSpec) -> Result<f64> {
    Ok(count_layers_gflops(&generator_layer_shapes(spec)?))
}

/// Forward GFlops of one discriminator pass on one tile.
pub fn count_discriminator_gflops(spec: &DiscriminatorSpec) -> Result<f64> {
    Ok(count_layers_gflops(&discriminator_layer_shapes(spec)?))
}

/// Total floats written by one forward pass through `layers` (the sum of
/// layer output sizes).
pub fn activation_floats(layers: &[ConvLayerShape]) -> usize {
    layers
        .iter()
        .map(|l| l.c_out * l.out_side * l.out_side)
        .sum()
}

/// Training-RAM estimate in bytes from layer inventories: 4 bytes per
/// parameter, plus forward-and-backward activation footprints (twice the
/// forward activations) for the generator on every patch of a tile and the
/// discriminator on the tile.
pub fn train_ram_bytes_from_layers(
    param_count: usize,
    gen_layers: &[ConvLayerShape],
    disc_layers: &[ConvLayerShape],
    patches_per_tile: usize,
) -> usize {
    let gen_act = activation_floats(gen_layers) * patches_per_tile;
    let disc_act = activation_floats(disc_layers);
    4 * (param_count + 2 * (gen_act + disc_act))
}

/// Learnable parameter count of a layer stack: convolution weights, biases
/// where present, and per-channel normalization scale/shift pairs.
pub fn layer_param_count(layers: &[ConvLayerShape]) -> usize {
    layers
        .iter()
        .map(|l| {
            let mut n = l.kernel * l.kernel * l.c_in * l.c_out;
            if l.has_bias {
                n += l.c_out;
            }
            if l.has_norm {
                n += 2 * l.c_out;
            }
            n
        })
        .sum()
}

/// Trainable parameters of a generator built to `spec`.
pub fn generator_param_count(spec: &GeneratorSpec) -> Result<usize> {
    Ok(layer_param_count(&generator_layer_shapes(spec)?))
}

/// Trainable parameters of a discriminator built to `spec`.
pub fn discriminator_param_count(spec: &DiscriminatorSpec) -> Result<usize> {
    Ok(layer_param_count(&discriminator_layer_shapes(spec)?))
}

/// Training-RAM estimate for a full configuration: generator run on every
/// patch of one `tile_side` tile, discriminator on the tile.
pub fn estimate_train_ram(
    gen_spec: &GeneratorSpec,
    disc_spec: &DiscriminatorSpec,
    geometry: &TileGeometry,
    tile_side: usize,
) -> Result<usize> {
    let gen_layers = generator_layer_shapes(gen_spec)?;
    let disc_layers = discriminator_layer_shapes(disc_spec)?;
    let params = layer_param_count(&gen_layers) + layer_param_count(&disc_layers);
    let patches = patches_exact(tile_side, tile_side, geometry)?;
    Ok(train_ram_bytes_from_layers(
        params,
        &gen_layers,
        &disc_layers,
        patches,
    ))
}
