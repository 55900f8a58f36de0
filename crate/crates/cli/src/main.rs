//! Command-line entry point for the patch-stitching GAN pipeline: mask
//! synthesis, tile extraction, training, generation, evaluation, and
//! resource estimation. Machine-readable JSON on stdout by default; exit
//! codes are 0 (success), 1 (runtime failure), 2 (usage error).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stitchgan_core::data::{
    self, extract_tiles, load_dataset, load_image_png, load_pair, make_toy_dataset, ToyStyle,
    TrainingSample,
};
use stitchgan_core::evaluation::{
    dice, extract_features, frechet_distance, gland_mask, seam_report, RandomProjectionExtractor,
};
use stitchgan_core::geometry::{plan_grid, DEFAULT_COLOR_TOLERANCE};
use stitchgan_core::inference::{
    generate_streaming, generate_tile, MemoryImageSink, MemoryMaskSource,
};
use stitchgan_core::maskgen::{synthesize_mask, MaskSpec};
use stitchgan_core::nets::{
    init_params, load_checkpoint, DiscriminatorSpec, GeneratorSpec,
};
use stitchgan_core::ndarray::Array3;
use stitchgan_core::resources::{
    count_generator_gflops, discriminator_param_count, estimate_train_ram,
    generator_param_count, total_gflops, DEFAULT_GFLOPS_PER_PATCH,
};
use stitchgan_core::training::{train, JudgingLevel, TrainOptions, TrainState, TrainingConfig};
use stitchgan_core::{ComponentMask, TileGeometry};

/// Conditional tile synthesis by stitched patch generation.
#[derive(Parser)]
#[command(name = "stitchgan", version, about)]
struct Cli {
    /// Seed for subcommands that draw randomness (default 0 where used).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training configuration file (flat `key = value` lines); flags win.
    #[arg(long, global = true, env = "STITCHGAN_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Network/geometry size preset.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 64 px patches, 176 px tiles — fast, CPU-sized.
    Desk,
    /// 256 px patches, 728 px tiles — the reference layout.
    Full,
}

impl Preset {
    fn geometry(self) -> TileGeometry {
        match self {
            Preset::Desk => TileGeometry::DESK_SCALE,
            Preset::Full => TileGeometry::FULL_SCALE,
        }
    }

    fn generator_spec(self) -> GeneratorSpec {
        match self {
            Preset::Desk => GeneratorSpec::DESK_SCALE,
            Preset::Full => GeneratorSpec::FULL_SCALE,
        }
    }

    fn discriminator_spec(self) -> DiscriminatorSpec {
        match self {
            Preset::Desk => DiscriminatorSpec::DESK_SCALE,
            Preset::Full => DiscriminatorSpec::FULL_SCALE,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }
}

/// Output rendering for `estimate`.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a random component mask and write it as an RGB PNG.
    SynthMask {
        /// Mask width in pixels.
        #[arg(long)]
        width: usize,
        /// Mask height in pixels.
        #[arg(long)]
        height: usize,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },

    /// Cut a paired image/mask into training tiles with a sliding window.
    ExtractTiles {
        /// Source image PNG.
        #[arg(long)]
        image: PathBuf,
        /// Source mask PNG (same dimensions).
        #[arg(long)]
        mask: PathBuf,
        /// Side of the square tiles.
        #[arg(long)]
        tile_side: usize,
        /// Window stride in pixels.
        #[arg(long)]
        stride: usize,
        /// Output dataset directory (`images/` + `masks/` + manifest).
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Render a deterministic synthetic dataset of mask/image tile pairs.
    ToyData {
        /// Number of pairs to render.
        #[arg(long)]
        count: usize,
        /// Side of the square tiles.
        #[arg(long, default_value_t = 176)]
        tile_side: usize,
        /// Output dataset directory (`images/` + `masks/` + manifest).
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Train the patch generator and tile discriminator on a dataset.
    Train {
        /// Dataset directory (`images/*.png` + `masks/*.png` by stem).
        #[arg(long)]
        data_dir: PathBuf,
        /// Directory for checkpoints and the metrics CSV.
        #[arg(long)]
        out_dir: PathBuf,
        /// Geometry and network size preset.
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Number of passes over the dataset.
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Reconstruction weight.
        #[arg(long)]
        lambda_rec: Option<f64>,
        /// Adversarial weight.
        #[arg(long)]
        lambda_adv: Option<f64>,
        /// Steps between checkpoints.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// What the discriminator judges: `tile` or `patch`.
        #[arg(long)]
        judging: Option<String>,
    },

    /// Generate an image from a component mask using a trained checkpoint.
    Generate {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input component-mask PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Output image PNG.
        #[arg(long)]
        out: PathBuf,
        /// Stream the image in horizontal bands (constant memory in height).
        #[arg(long)]
        streaming: bool,
        /// Patch overlap in pixels (default: the generator's context margin).
        #[arg(long)]
        overlap: Option<usize>,
    },

    /// Compute an image or mask metric and write a JSON report.
    Eval {
        #[command(subcommand)]
        metric: EvalMetric,
    },

    /// Predict the arithmetic cost and memory of a generation run.
    Estimate {
        /// Image width in pixels.
        #[arg(long)]
        width: usize,
        /// Image height in pixels.
        #[arg(long)]
        height: usize,
        /// Patch stride in pixels.
        #[arg(long)]
        stride: usize,
        /// Count a concrete network preset instead of the reference
        /// per-patch cost, and include parameter/memory estimates.
        #[arg(long, value_enum)]
        spec: Option<Preset>,
        /// Output format.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum EvalMetric {
    /// Fréchet distance between feature distributions of two image sets.
    Fid {
        /// Two image sets: PNG files or directories of PNGs (≥ 2 each).
        #[arg(long, num_args = 2)]
        inputs: Vec<PathBuf>,
        /// Feature dimension of the random-projection extractor.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },

    /// Dice overlap of the gland class between two mask sets.
    Dice {
        /// Two component-mask PNGs, or two directories matched by stem.
        #[arg(long, num_args = 2)]
        inputs: Vec<PathBuf>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },

    /// Seam-anomaly ratio of a generated image against its patch grid.
    Seam {
        /// One generated image PNG.
        #[arg(long, num_args = 1)]
        inputs: Vec<PathBuf>,
        /// Patch geometry the image was stitched with.
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::SynthMask { width, height, out } => synth_mask(width, height, seed, &out),
        Command::ExtractTiles {
            image,
            mask,
            tile_side,
            stride,
            out_dir,
        } => extract_tiles_cmd(&image, &mask, tile_side, stride, &out_dir),
        Command::ToyData {
            count,
            tile_side,
            out_dir,
        } => toy_data(count, tile_side, seed, &out_dir),
        Command::Train {
            data_dir,
            out_dir,
            preset,
            epochs,
            learning_rate,
            lambda_rec,
            lambda_adv,
            checkpoint_every,
            judging,
        } => {
            let mut config = match &cli.config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    TrainingConfig::from_key_values(&text)?
                }
                None => TrainingConfig::default(),
            };
            if let Some(v) = epochs {
                config.epochs = v;
            }
            if let Some(v) = learning_rate {
                config.learning_rate = v;
            }
            if let Some(v) = lambda_rec {
                config.lambda_rec = v;
            }
            if let Some(v) = lambda_adv {
                config.lambda_adv = v;
            }
            if let Some(v) = checkpoint_every {
                config.checkpoint_every = v;
            }
            if let Some(v) = &judging {
                config.judging = JudgingLevel::parse(v)?;
            }
            if let Some(v) = seed {
                config.seed = v;
            }
            train_cmd(&data_dir, &out_dir, preset, config)
        }
        Command::Generate {
            checkpoint,
            mask,
            out,
            streaming,
            overlap,
        } => generate_cmd(&checkpoint, &mask, &out, streaming, overlap),
        Command::Eval { metric } => match metric {
            EvalMetric::Fid {
                inputs,
                dim,
                report,
            } => eval_fid(&inputs, dim, seed.unwrap_or(0), report.as_deref()),
            EvalMetric::Dice { inputs, report } => eval_dice(&inputs, report.as_deref()),
            EvalMetric::Seam {
                inputs,
                preset,
                report,
            } => eval_seam(&inputs[0], preset, report.as_deref()),
        },
        Command::Estimate {
            width,
            height,
            stride,
            spec,
            format,
        } => estimate(width, height, stride, spec, format),
    }
}

/// Prints the JSON value to stdout and optionally writes it to `report`.
/// A closed stdout (downstream pipe gone) is not an error.
fn emit(value: &Value, report: Option<&Path>) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    if let Some(path) = report {
        ensure_parent(path)?;
        fs::write(path, text + "\n")
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

/// Creates the directory an output file will land in.
fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

fn synth_mask(width: usize, height: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let spec = MaskSpec::new(height, width, seed);
    let mask = synthesize_mask(&spec)?;
    ensure_parent(out)?;
    mask.save_png(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let f = mask.class_fractions();
    emit(
        &json!({
            "out": out.display().to_string(),
            "width": width,
            "height": height,
            "seed": seed,
            "class_fractions": {"gland": f[0], "stroma": f[1], "background": f[2]},
        }),
        None,
    )
}

/// Writes samples under `dir` following the dataset layout (`images/` and
/// `masks/` matched by stem) plus a manifest listing the pairs.
fn write_dataset(dir: &Path, samples: &[TrainingSample]) -> Result<usize> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        data::save_image_png(sample.image.data(), images.join(format!("{stem}.png")))?;
        sample.mask.save_png(masks.join(format!("{stem}.png")))?;
        manifest.push_str(&format!("{stem} images/{stem}.png masks/{stem}.png\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(samples.len())
}

fn extract_tiles_cmd(
    image: &Path,
    mask: &Path,
    tile_side: usize,
    stride: usize,
    out_dir: &Path,
) -> Result<()> {
    let sample = load_pair(image, mask, DEFAULT_COLOR_TOLERANCE)
        .with_context(|| format!("loading {} + {}", image.display(), mask.display()))?;
    let tiles = extract_tiles(&sample, tile_side, stride)?;
    let count = write_dataset(out_dir, &tiles)?;
    emit(
        &json!({
            "out_dir": out_dir.display().to_string(),
            "tile_side": tile_side,
            "stride": stride,
            "count": count,
        }),
        None,
    )
}

fn toy_data(count: usize, tile_side: usize, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let dataset = make_toy_dataset(count, tile_side, &ToyStyle::default(), seed)?;
    let written = write_dataset(out_dir, &dataset.samples)?;
    emit(
        &json!({
            "out_dir": out_dir.display().to_string(),
            "tile_side": tile_side,
            "seed": seed,
            "count": written,
            "class_means": dataset.class_means,
        }),
        None,
    )
}

fn train_cmd(
    data_dir: &Path,
    out_dir: &Path,
    preset: Preset,
    config: TrainingConfig,
) -> Result<()> {
    let dataset = load_dataset(data_dir)
        .with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let geometry = preset.geometry();
    let gen_spec = preset.generator_spec();
    let mut disc_spec = preset.discriminator_spec();
    if config.judging == JudgingLevel::Patch {
        disc_spec = disc_spec.with_input_side(geometry.patch)?;
    }
    let params = init_params(&gen_spec, &disc_spec, config.seed)?;
    fs::create_dir_all(out_dir)?;
    let metrics_csv = out_dir.join("metrics.csv");
    let epochs = config.epochs;
    let mut state = TrainState::new(params, config, geometry)?;
    let options = TrainOptions {
        metrics_csv: Some(&metrics_csv),
        checkpoint_dir: Some(out_dir),
    };
    let history = train(&mut state, &dataset, &options)?;
    let last = history.last().expect("non-empty dataset trains ≥ 1 step");
    emit(
        &json!({
            "preset": preset.name(),
            "samples": dataset.len(),
            "epochs": epochs,
            "steps": state.step,
            "final": {
                "l_rec": last.l_rec,
                "l_adv_disc": last.l_adv_disc,
                "l_adv_gen": last.l_adv_gen,
                "d_real": last.d_real,
                "d_fake": last.d_fake,
            },
            "metrics_csv": metrics_csv.display().to_string(),
            "checkpoint": out_dir.join("final.ckpt").display().to_string(),
            "config": state.config.to_key_values().lines().collect::<Vec<_>>(),
        }),
        None,
    )
}

fn generate_cmd(
    checkpoint: &Path,
    mask_path: &Path,
    out: &Path,
    streaming: bool,
    overlap: Option<usize>,
) -> Result<()> {
    let (params, trained_steps) = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let gspec = params.generator.spec().clone();
    let geometry = TileGeometry::new(
        gspec.output_side,
        gspec.context(),
        overlap.unwrap_or_else(|| gspec.context()),
    )?;
    let mask = ComponentMask::load_png(mask_path, DEFAULT_COLOR_TOLERANCE)
        .with_context(|| format!("loading mask {}", mask_path.display()))?;
    let patches;
    let tile = if streaming {
        let mut source = MemoryMaskSource::new(&mask);
        let mut sink = MemoryImageSink::new(mask.height(), mask.width());
        let report = generate_streaming(&params.generator, &mut source, &mut sink, &geometry)?;
        patches = report.patches_generated;
        sink.finish()?
    } else {
        let grid = plan_grid(mask.height(), mask.width(), &geometry)?;
        patches = grid.len();
        generate_tile(&params.generator, &mask, &geometry)?
    };
    ensure_parent(out)?;
    data::save_image_png(tile.data(), out)
        .with_context(|| format!("writing {}", out.display()))?;
    emit(
        &json!({
            "out": out.display().to_string(),
            "height": mask.height(),
            "width": mask.width(),
            "patches": patches,
            "streaming": streaming,
            "trained_steps": trained_steps,
        }),
        None,
    )
}

/// Loads one PNG, or every `*.png` in a directory sorted by name.
fn load_image_set(path: &Path) -> Result<Vec<Array3<f32>>> {
    let files = png_set(path)?;
    files
        .iter()
        .map(|p| {
            load_image_png(p)
                .map_err(anyhow::Error::from)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

/// Expands a file or directory into a sorted list of PNG paths.
fn png_set(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .png files in {}", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn eval_fid(inputs: &[PathBuf], dim: usize, seed: u64, report: Option<&Path>) -> Result<()> {
    let set_a = load_image_set(&inputs[0])?;
    let set_b = load_image_set(&inputs[1])?;
    let shape = set_a[0].dim();
    let extractor = RandomProjectionExtractor::new(shape, dim, seed);
    let features_a = extract_features(&set_a, &extractor)?;
    let features_b = extract_features(&set_b, &extractor)?;
    let value = frechet_distance(&features_a, &features_b)?;
    emit(
        &json!({
            "metric": "fid",
            "value": value,
            "n": [set_a.len(), set_b.len()],
            "config": {
                "extractor": "random_projection",
                "dim": dim,
                "seed": seed,
                "input": [shape.0, shape.1, shape.2],
                "inputs": [
                    inputs[0].display().to_string(),
                    inputs[1].display().to_string(),
                ],
            },
        }),
        report,
    )
}

fn eval_dice(inputs: &[PathBuf], report: Option<&Path>) -> Result<()> {
    let files_a = png_set(&inputs[0])?;
    let files_b = png_set(&inputs[1])?;
    if files_a.len() != files_b.len() {
        bail!(
            "mask sets differ in size: {} vs {}",
            files_a.len(),
            files_b.len()
        );
    }
    let mut per_pair = Vec::with_capacity(files_a.len());
    for (a, b) in files_a.iter().zip(&files_b) {
        let mask_a = ComponentMask::load_png(a, DEFAULT_COLOR_TOLERANCE)
            .with_context(|| format!("loading {}", a.display()))?;
        let mask_b = ComponentMask::load_png(b, DEFAULT_COLOR_TOLERANCE)
            .with_context(|| format!("loading {}", b.display()))?;
        per_pair.push(dice(&gland_mask(&mask_a), &gland_mask(&mask_b))?);
    }
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    emit(
        &json!({
            "metric": "dice",
            "value": mean,
            "n": per_pair.len(),
            "per_pair": per_pair,
            "config": {
                "class": "gland",
                "inputs": [
                    inputs[0].display().to_string(),
                    inputs[1].display().to_string(),
                ],
            },
        }),
        report,
    )
}

fn eval_seam(input: &Path, preset: Preset, report: Option<&Path>) -> Result<()> {
    let image = load_image_png(input).with_context(|| format!("loading {}", input.display()))?;
    let (_, h, w) = image.dim();
    let geometry = preset.geometry();
    let grid = plan_grid(h, w, &geometry)?;
    let seams = seam_report(&image, &grid)?;
    emit(
        &json!({
            "metric": "seam",
            "value": seams.anomaly_ratio,
            "n": seams.junction_bands,
            "junction_mean": seams.junction_mean,
            "control_mean": seams.control_mean,
            "config": {
                "preset": preset.name(),
                "patch": geometry.patch,
                "overlap": geometry.overlap,
                "input": input.display().to_string(),
            },
        }),
        report,
    )
}

fn estimate(
    width: usize,
    height: usize,
    stride: usize,
    spec: Option<Preset>,
    format: Format,
) -> Result<()> {
    let per_patch = match spec {
        None => DEFAULT_GFLOPS_PER_PATCH,
        Some(preset) => count_generator_gflops(&preset.generator_spec())?,
    };
    let network = match spec {
        None => None,
        Some(preset) => {
            let geometry = preset.geometry();
            let tile_side = 2 * geometry.stride() + geometry.patch;
            let ram_bytes = estimate_train_ram(
                &preset.generator_spec(),
                &preset.discriminator_spec(),
                &geometry,
                tile_side,
            )?;
            Some((preset, ram_bytes as f64 / f64::from(1u32 << 30)))
        }
    };
    let requested = total_gflops(height as f64, width as f64, stride as f64, per_patch)?;
    match format {
        Format::Json => {
            let mut out = json!({
                "width": width,
                "height": height,
                "stride": stride,
                "n_patches": requested.n_patches,
                "per_patch_gflops": requested.per_patch_gflops,
                "total_gflops": requested.total_gflops,
                "mult_adds_g": requested.mult_adds_g,
            });
            if let Some((preset, ram_gb)) = network {
                out["network"] = json!({
                    "preset": preset.name(),
                    "generator_params": generator_param_count(&preset.generator_spec())?,
                    "discriminator_params":
                        discriminator_param_count(&preset.discriminator_spec())?,
                    "train_ram_gb": ram_gb,
                });
            }
            emit(&out, None)
        }
        Format::Table => {
            // One row per image scale so the quadratic arithmetic growth is
            // visible next to the scale-independent training memory.
            let ram = network.map(|(_, gb)| gb);
            println!(
                "{:>8} {:>8} {:>14} {:>16} {:>14} {:>14}",
                "height", "width", "patches", "total_gflops", "mult_adds_g", "train_ram_gb"
            );
            for shift in (0..4).rev() {
                let (h, w) = (height >> shift, width >> shift);
                if h == 0 || w == 0 {
                    continue;
                }
                let est = total_gflops(h as f64, w as f64, stride as f64, per_patch)?;
                let ram_cell = ram.map_or("-".to_string(), |gb| format!("{gb:.3}"));
                println!(
                    "{:>8} {:>8} {:>14.3} {:>16.3} {:>14.3} {:>14}",
                    h, w, est.n_patches, est.total_gflops, est.mult_adds_g, ram_cell
                );
            }
            Ok(())
        }
    }
}
