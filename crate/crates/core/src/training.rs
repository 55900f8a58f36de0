//! Adversarial training: the patch generator learns against a discriminator
//! that judges whole stitched tiles, so the gradient of the tile-level
//! realism score flows through the overlap-averaging stitch into every patch.
//!
//! One step = one tile. The discriminator updates first (real pair vs the
//! current fake tile), then the generator updates against the refreshed
//! discriminator on a combined objective: `lambda_rec * L1 + lambda_adv *
//! (-ln D(fake))`. An ablation mode judges raw patches instead of stitched
//! tiles, severing the seam-level pressure while leaving everything else
//! identical.

use crate::data::TrainingSample;
use crate::error::{Error, Result};
use crate::geometry::{plan_grid, stitch_backward_t, stitch_t, PatchGrid, TileGeometry};
use crate::nets::{
    save_checkpoint, Discriminator, Generator, GeneratorCache, ModelParameters,
};
use crate::nn::Scalar;
use ndarray::{s, Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD};
use std::io::Write;
use std::path::Path;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Column header of the metrics CSV written by [`train`].
pub const METRICS_CSV_HEADER: &str = "step,l_rec,l_adv_disc,l_adv_gen,d_real,d_fake";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What the discriminator judges during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgingLevel {
    /// Whole stitched tiles: seam artifacts are visible to the adversary.
    Tile,
    /// Independent generator patches: the ablation baseline.
    Patch,
}

impl JudgingLevel {
    /// Lowercase name: `"tile"` or `"patch"`.
    pub fn as_str(self) -> &'static str {
        match self {
            JudgingLevel::Tile => "tile",
            JudgingLevel::Patch => "patch",
        }
    }

    /// Parses `"tile"` or `"patch"`.
    pub fn parse(v: &str) -> Result<Self> {
        match v {
            "tile" => Ok(JudgingLevel::Tile),
            "patch" => Ok(JudgingLevel::Patch),
            other => Err(Error::Config(format!(
                "judging must be 'tile' or 'patch', got '{other}'"
            ))),
        }
    }
}

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Weight of the per-pixel L1 reconstruction term.
    pub lambda_rec: f64,
    /// Weight of the adversarial term.
    pub lambda_adv: f64,
    /// Adam learning rate (both networks).
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Full passes over the dataset.
    pub epochs: usize,
    /// Seed recorded with the run (weight init and corpus synthesis).
    pub seed: u64,
    /// Checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// What the discriminator judges.
    pub judging: JudgingLevel,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_rec: 1.0,
            lambda_adv: 100.0,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 100,
            seed: 0,
            checkpoint_every: 0,
            judging: JudgingLevel::Tile,
        }
    }
}

impl TrainingConfig {
    /// Checks ranges, returning a descriptive error.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec.is_finite() && self.lambda_rec >= 0.0) {
            return Err(Error::Config("lambda_rec must be finite and >= 0".into()));
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return Err(Error::Config("lambda_adv must be finite and >= 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be finite and > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets one field from its config-file key and string value.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            Error::Config(format!("invalid value '{value}' for key '{key}'"))
        };
        match key {
            "lambda_rec" => self.lambda_rec = value.parse().map_err(|_| bad(key, value))?,
            "lambda_adv" => self.lambda_adv = value.parse().map_err(|_| bad(key, value))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key, value))?,
            "beta1" => self.beta1 = value.parse().map_err(|_| bad(key, value))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| bad(key, value))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad(key, value))?
            }
            "judging" => self.judging = JudgingLevel::parse(value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses the flat `key = value` format ('#' starts a comment).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes to the flat `key = value` format parsed by
    /// [`TrainingConfig::from_key_values`].
    pub fn to_key_values(&self) -> String {
        format!(
            "lambda_rec = {}\nlambda_adv = {}\nlearning_rate = {}\nbeta1 = {}\n\
             beta2 = {}\nepochs = {}\nseed = {}\ncheckpoint_every = {}\njudging = {}\n",
            self.lambda_rec,
            self.lambda_adv,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epochs,
            self.seed,
            self.checkpoint_every,
            self.judging.as_str()
        )
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean absolute difference between two equally shaped rasters.
pub fn reconstruction_loss<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction loss over {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let sum = a
        .iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (&x, &y)| acc + (x.to_const() - y.to_const()).abs());
    Ok(sum / n)
}

fn check_probability(name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::Numeric(format!(
            "{name} must be a probability in [0, 1], got {v}"
        )));
    }
    Ok(v.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Discriminator loss `-(ln D_real + ln(1 - D_fake))`, clamped away from the
/// log singularities. `adversarial_loss(0.5, 0.5) = 2 ln 2`.
pub fn adversarial_loss(d_real: f64, d_fake: f64) -> Result<f64> {
    let r = check_probability("d_real", d_real)?;
    let f = check_probability("d_fake", d_fake)?;
    Ok(-(r.ln() + (1.0 - f).ln()))
}

/// Non-saturating generator term `-ln D_fake`.
pub fn generator_adversarial_term(d_fake: f64) -> Result<f64> {
    let f = check_probability("d_fake", d_fake)?;
    Ok(-f.ln())
}

/// Combined generator objective `lambda_rec * l_rec + lambda_adv * adv_term`.
///
/// With the default weights (1, 100), `l_rec = 0.2` and `adv_term = 0.5`
/// combine to `50.2`.
pub fn total_objective(l_rec: f64, adv_term: f64, config: &TrainingConfig) -> f64 {
    config.lambda_rec * l_rec + config.lambda_adv * adv_term
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    /// Builds an optimizer with zeroed moments shaped like `params`.
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &[ArrayViewD<'_, f32>]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// Applies one update. Gradients must align with the parameter list the
    /// optimizer was built from; non-finite gradients abort the run.
    pub fn step(
        &mut self,
        mut params: Vec<ArrayViewMutD<'_, f32>>,
        grads: &[ArrayD<f32>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer built for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {i} has shape {:?}, expected {:?}",
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor {i}; training diverged"
                )));
            }
        }
        self.steps += 1;
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.steps as i32));
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.steps as i32));
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (c1, c2) = (c1 as f32, c2 as f32);
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stitched generator forward and its gradients
// ---------------------------------------------------------------------------

/// One full-tile generator pass: context windows, per-patch outputs with
/// their activation caches, and the stitched tile.
pub struct StitchedForward<T> {
    /// The grid the tile was assembled on.
    pub grid: PatchGrid,
    /// Per-patch generator inputs (context windows of the mask).
    pub windows: Vec<Array3<T>>,
    /// Per-patch generator outputs.
    pub patches: Vec<Array3<T>>,
    /// The overlap-averaged tile.
    pub tile: Array3<T>,
    caches: Vec<GeneratorCache<T>>,
}

/// Cuts `mask_tile` (a one-hot `(3, h, w)` raster) into context windows:
/// window `i` spans `[origin_i - context, origin_i + patch + context)` with
/// zeros outside the tile.
pub fn mask_windows<T: Scalar>(
    mask_tile: &Array3<T>,
    grid: &PatchGrid,
    geometry: &TileGeometry,
) -> Vec<Array3<T>> {
    let side = geometry.input_side();
    let ctx = geometry.context as isize;
    let (_, h, w) = mask_tile.dim();
    let (h, w) = (h as isize, w as isize);
    grid.origins()
        .map(|(r, c)| {
            let top = r as isize - ctx;
            let left = c as isize - ctx;
            let mut win = Array3::<T>::zeros((3, side, side));
            let y0 = top.max(0);
            let y1 = (top + side as isize).min(h);
            let x0 = left.max(0);
            let x1 = (left + side as isize).min(w);
            if y0 < y1 && x0 < x1 {
                win.slice_mut(s![
                    ..,
                    (y0 - top) as usize..(y1 - top) as usize,
                    (x0 - left) as usize..(x1 - left) as usize
                ])
                .assign(&mask_tile.slice(s![.., y0 as usize..y1 as usize, x0 as usize..x1 as usize]));
            }
            win
        })
        .collect()
}

/// Runs the generator over every grid cell of `mask_tile` and stitches the
/// results, retaining activation caches for [`generator_grads_t`].
pub fn stitched_forward_t<T: Scalar>(
    generator: &Generator<T>,
    mask_tile: &Array3<T>,
    geometry: &TileGeometry,
) -> Result<StitchedForward<T>> {
    if generator.spec().output_side != geometry.patch
        || generator.spec().input_side != geometry.input_side()
    {
        return Err(Error::InvalidSpec(format!(
            "generator maps {} -> {} but the tile geometry needs {} -> {}",
            generator.spec().input_side,
            generator.spec().output_side,
            geometry.input_side(),
            geometry.patch
        )));
    }
    let (_, h, w) = mask_tile.dim();
    let grid = plan_grid(h, w, geometry)?;
    let windows = mask_windows(mask_tile, &grid, geometry);
    let mut patches = Vec::with_capacity(grid.len());
    let mut caches = Vec::with_capacity(grid.len());
    for win in &windows {
        let (y, cache) = generator.forward_cached(win)?;
        patches.push(y);
        caches.push(cache);
    }
    let tile = stitch_t(&patches, &grid)?;
    Ok(StitchedForward {
        grid,
        windows,
        patches,
        tile,
        caches,
    })
}

/// Everything the generator update needs, plus diagnostics.
pub struct GeneratorStep<T> {
    /// `lambda_rec * l_rec + lambda_adv * adv_term`.
    pub objective: f64,
    /// Mean absolute error of the stitched tile against the real tile.
    pub l_rec: f64,
    /// `-ln D(fake)` (mean over patches in patch-judging mode).
    pub adv_term: f64,
    /// Discriminator score on the fake (mean over patches in patch mode).
    pub d_fake: f64,
    /// Parameter gradients aligned with `Generator::parameters`.
    pub param_grads: Vec<ArrayD<T>>,
    /// L2 norm of the tile-loss gradient reaching each patch.
    pub patch_grad_norms: Vec<f64>,
}

fn add_grads<T: Scalar>(acc: &mut Option<Vec<ArrayD<T>>>, grads: Vec<ArrayD<T>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (dst, src) in a.iter_mut().zip(grads) {
                dst.zip_mut_with(&src, |x, &y| *x = *x + y);
            }
        }
    }
}

/// Computes the generator objective and its parameter gradients for one tile,
/// differentiating through the discriminator, the stitch, and every patch.
///
/// `real_tile` is the ground-truth image; `mask_tile` the one-hot condition.
/// The discriminator is read, never updated.
pub fn generator_grads_t<T: Scalar>(
    generator: &Generator<T>,
    discriminator: &Discriminator<T>,
    forward: &StitchedForward<T>,
    mask_tile: &Array3<T>,
    real_tile: &Array3<T>,
    lambda_rec: f64,
    lambda_adv: f64,
    judging: JudgingLevel,
) -> Result<GeneratorStep<T>> {
    let l_rec = reconstruction_loss(&forward.tile, real_tile)?;
    let n = forward.tile.len() as f64;
    // d(mean |fake - real|)/d(fake), scaled by lambda_rec
    let mut tile_grad = Array3::<T>::zeros(forward.tile.dim());
    tile_grad
        .iter_mut()
        .zip(forward.tile.iter().zip(real_tile.iter()))
        .for_each(|(g, (&f, &r))| {
            let sign = (f.to_const() - r.to_const()).signum();
            *g = T::from_const(lambda_rec * sign / n);
        });

    let patch = forward.grid.geometry().patch;
    let mut patch_adv_grads: Vec<Option<Array3<T>>> = vec![None; forward.grid.len()];
    let (adv_term, d_fake) = match judging {
        JudgingLevel::Tile => {
            let (map, score, cache) = discriminator.forward_cached(mask_tile, &forward.tile)?;
            let s = check_probability("d_fake", score.to_const())?;
            let adv = -s.ln();
            // dL/ds = -lambda_adv / s, spread uniformly over the map mean
            let m = map.dim().0;
            let gmap =
                Array2::<T>::from_elem((m, m), T::from_const(-lambda_adv / s / (m * m) as f64));
            let (grad_in, _) = discriminator.backward(&cache, &gmap);
            tile_grad.zip_mut_with(&grad_in.slice(s![3.., .., ..]).to_owned(), |a, &b| {
                *a = *a + b
            });
            (adv, s)
        }
        JudgingLevel::Patch => {
            if discriminator.spec().input_side != patch {
                return Err(Error::InvalidSpec(format!(
                    "patch judging needs a discriminator sized {patch}, got {}",
                    discriminator.spec().input_side
                )));
            }
            let np = forward.grid.len() as f64;
            let mut adv_sum = 0.0;
            let mut score_sum = 0.0;
            for (i, (r, c)) in forward.grid.origins().enumerate() {
                let mask_core = mask_tile.slice(s![.., r..r + patch, c..c + patch]).to_owned();
                let (map, score, cache) =
                    discriminator.forward_cached(&mask_core, &forward.patches[i])?;
                let s = check_probability("d_fake", score.to_const())?;
                adv_sum += -s.ln();
                score_sum += s;
                let m = map.dim().0;
                let gmap = Array2::<T>::from_elem
                    ((m, m), T::from_const(-lambda_adv / s / (np * (m * m) as f64)));
                let (grad_in, _) = discriminator.backward(&cache, &gmap);
                patch_adv_grads[i] = Some(grad_in.slice(s![3.., .., ..]).to_owned());
            }
            (adv_sum / np, score_sum / np)
        }
    };

    let per_patch = stitch_backward_t(&tile_grad, &forward.grid)?;
    let mut param_grads: Option<Vec<ArrayD<T>>> = None;
    let mut patch_grad_norms = Vec::with_capacity(per_patch.len());
    for (i, mut grad_patch) in per_patch.into_iter().enumerate() {
        if let Some(extra) = patch_adv_grads[i].take() {
            grad_patch.zip_mut_with(&extra, |a, &b| *a = *a + b);
        }
        patch_grad_norms.push(
            grad_patch
                .iter()
                .fold(0.0f64, |acc, &v| acc + v.to_const() * v.to_const())
                .sqrt(),
        );
        let (_, grads) = generator.backward(&forward.caches[i], &grad_patch);
        add_grads(&mut param_grads, grads);
    }
    Ok(GeneratorStep {
        objective: lambda_rec * l_rec + lambda_adv * adv_term,
        l_rec,
        adv_term,
        d_fake,
        param_grads: param_grads.expect("grids are never empty"),
        patch_grad_norms,
    })
}

// ---------------------------------------------------------------------------
// Training state and steps
// ---------------------------------------------------------------------------

/// Metrics of one training step, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based global step index.
    pub step: u64,
    /// Reconstruction loss of the stitched tile.
    pub l_rec: f64,
    /// Discriminator loss at its update.
    pub l_adv_disc: f64,
    /// Generator adversarial term against the refreshed discriminator.
    pub l_adv_gen: f64,
    /// Discriminator score on the real tile (before its update).
    pub d_real: f64,
    /// Discriminator score on the fake tile (before its update).
    pub d_fake: f64,
}

impl StepMetrics {
    /// One CSV row matching [`METRICS_CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_rec, self.l_adv_disc, self.l_adv_gen, self.d_real, self.d_fake
        )
    }
}

/// Networks, optimizers, and bookkeeping of a run.
pub struct TrainState {
    /// Both networks.
    pub params: ModelParameters,
    /// Hyper-parameters.
    pub config: TrainingConfig,
    /// Patch/tile layout used to window masks and stitch outputs.
    pub geometry: TileGeometry,
    /// Global step counter (1-based after the first step).
    pub step: u64,
    opt_g: Adam,
    opt_d: Adam,
}

impl TrainState {
    /// Validates that the networks, geometry, and config fit together.
    pub fn new(
        params: ModelParameters,
        config: TrainingConfig,
        geometry: TileGeometry,
    ) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        let gspec = params.generator.spec();
        if gspec.output_side != geometry.patch || gspec.input_side != geometry.input_side() {
            return Err(Error::InvalidSpec(format!(
                "generator maps {} -> {} but the geometry needs {} -> {}",
                gspec.input_side,
                gspec.output_side,
                geometry.input_side(),
                geometry.patch
            )));
        }
        let dspec = params.discriminator.spec();
        if dspec.input_channels != 6 {
            return Err(Error::InvalidSpec(format!(
                "training judges mask/image pairs (6 channels), got {}",
                dspec.input_channels
            )));
        }
        if config.judging == JudgingLevel::Patch && dspec.input_side != geometry.patch {
            return Err(Error::InvalidSpec(format!(
                "patch judging needs discriminator side {} (the patch), got {}",
                geometry.patch, dspec.input_side
            )));
        }
        let opt_g = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            &params.generator.parameters(),
        );
        let opt_d = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            &params.discriminator.parameters(),
        );
        Ok(TrainState {
            params,
            config,
            geometry,
            step: 0,
            opt_g,
            opt_d,
        })
    }

    fn check_sample(&self, sample: &TrainingSample) -> Result<()> {
        let (h, w) = (sample.mask.height(), sample.mask.width());
        if self.config.judging == JudgingLevel::Tile {
            let side = self.params.discriminator.spec().input_side;
            if h != side || w != side {
                return Err(Error::ShapeMismatch(format!(
                    "tile judging needs {side}x{side} samples, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }
}

/// Discriminator update on one (real, fake) pair; returns
/// `(l_adv_disc, d_real, d_fake)` measured before the update.
fn discriminator_update(
    state: &mut TrainState,
    mask_tile: &Array3<f32>,
    real_tile: &Array3<f32>,
    forward: &StitchedForward<f32>,
) -> Result<(f64, f64, f64)> {
    let disc = &state.params.discriminator;
    match state.config.judging {
        JudgingLevel::Tile => {
            let (map_r, s_r, cache_r) = disc.forward_cached(mask_tile, real_tile)?;
            let (_, s_f, cache_f) = disc.forward_cached(mask_tile, &forward.tile)?;
            let (s_r, s_f) = (f64::from(s_r), f64::from(s_f));
            let loss = adversarial_loss(s_r, s_f)?;
            let r = s_r.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let f = s_f.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let m = map_r.dim().0;
            let area = (m * m) as f64;
            let gmap_r = Array2::<f32>::from_elem((m, m), (-1.0 / r / area) as f32);
            let gmap_f = Array2::<f32>::from_elem((m, m), (1.0 / (1.0 - f) / area) as f32);
            let (_, grads_r) = disc.backward(&cache_r, &gmap_r);
            let (_, grads_f) = disc.backward(&cache_f, &gmap_f);
            let mut total = Some(grads_r);
            add_grads(&mut total, grads_f);
            state
                .opt_d
                .step(state.params.discriminator.parameters_mut(), &total.unwrap())?;
            Ok((loss, s_r, s_f))
        }
        JudgingLevel::Patch => {
            let patch = state.geometry.patch;
            let np = forward.grid.len() as f64;
            let mut total: Option<Vec<ArrayD<f32>>> = None;
            let (mut loss_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
            for (i, (r0, c0)) in forward.grid.origins().enumerate() {
                let span = s![.., r0..r0 + patch, c0..c0 + patch];
                let mask_core = mask_tile.slice(span).to_owned();
                let real_core = real_tile.slice(span).to_owned();
                let (map_r, s_r, cache_r) = disc.forward_cached(&mask_core, &real_core)?;
                let (_, s_f, cache_f) = disc.forward_cached(&mask_core, &forward.patches[i])?;
                let (s_r, s_f) = (f64::from(s_r), f64::from(s_f));
                loss_sum += adversarial_loss(s_r, s_f)?;
                r_sum += s_r;
                f_sum += s_f;
                let r = s_r.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let f = s_f.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let m = map_r.dim().0;
                let area = (m * m) as f64 * np;
                let gmap_r = Array2::<f32>::from_elem((m, m), (-1.0 / r / area) as f32);
                let gmap_f = Array2::<f32>::from_elem((m, m), (1.0 / (1.0 - f) / area) as f32);
                let (_, grads_r) = disc.backward(&cache_r, &gmap_r);
                let (_, grads_f) = disc.backward(&cache_f, &gmap_f);
                add_grads(&mut total, grads_r);
                add_grads(&mut total, grads_f);
            }
            state
                .opt_d
                .step(state.params.discriminator.parameters_mut(), &total.unwrap())?;
            Ok((loss_sum / np, r_sum / np, f_sum / np))
        }
    }
}

/// One optimization step on one sample: the discriminator updates on the
/// current fake tile, then the generator updates against the refreshed
/// discriminator. Deterministic: no randomness enters the step.
pub fn train_step(state: &mut TrainState, sample: &TrainingSample) -> Result<StepMetrics> {
    state.check_sample(sample)?;
    let mask_tile = sample.mask.to_input();
    let real_tile = sample.image.data().clone();
    let forward = stitched_forward_t(&state.params.generator, &mask_tile, &state.geometry)?;
    let (l_adv_disc, d_real, d_fake) =
        discriminator_update(state, &mask_tile, &real_tile, &forward)?;
    let step_out = generator_grads_t(
        &state.params.generator,
        &state.params.discriminator,
        &forward,
        &mask_tile,
        &real_tile,
        state.config.lambda_rec,
        state.config.lambda_adv,
        state.config.judging,
    )?;
    state
        .opt_g
        .step(state.params.generator.parameters_mut(), &step_out.param_grads)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        l_rec: step_out.l_rec,
        l_adv_disc,
        l_adv_gen: step_out.adv_term,
        d_real,
        d_fake,
    })
}

/// Optional side effects of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Append per-step metrics as CSV here (header written first).
    pub metrics_csv: Option<&'a Path>,
    /// Write periodic and final checkpoints into this directory.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Runs `config.epochs` passes over `dataset` (one step per sample, in
/// order), collecting per-step metrics, optionally streaming them to CSV and
/// checkpointing every `config.checkpoint_every` steps plus at the end.
pub fn train(
    state: &mut TrainState,
    dataset: &[TrainingSample],
    options: &TrainOptions<'_>,
) -> Result<Vec<StepMetrics>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut csv = match options.metrics_csv {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "{METRICS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(state.config.epochs * dataset.len());
    for _epoch in 0..state.config.epochs {
        for sample in dataset {
            let metrics = train_step(state, sample)?;
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", metrics.to_csv_row())?;
            }
            if let Some(dir) = options.checkpoint_dir {
                let every = state.config.checkpoint_every;
                if every > 0 && state.step % every as u64 == 0 {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step_{:06}.ckpt", state.step));
                    save_checkpoint(&path, &state.params, state.step)?;
                }
            }
            history.push(metrics);
        }
    }
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("final.ckpt"), &state.params, state.step)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToyStyle};
    use crate::nets::{init_params, DiscriminatorSpec, GeneratorSpec};
    use ndarray::Array1;

    /// Tiny end-to-end setup: 28x28 tiles, 2x2 patch grid.
    fn micro_geometry() -> TileGeometry {
        TileGeometry::new(16, 4, 4).unwrap()
    }

    fn micro_gen_spec() -> GeneratorSpec {
        GeneratorSpec {
            input_side: 24,
            output_side: 16,
            depth: 2,
            base_channels: 4,
            skip_connections: true,
        }
    }

    fn micro_disc_spec() -> DiscriminatorSpec {
        DiscriminatorSpec {
            input_side: 28,
            input_channels: 6,
            blocks: 2,
            base_channels: 4,
        }
    }

    fn micro_state(config: TrainingConfig) -> TrainState {
        let params = init_params(&micro_gen_spec(), &micro_disc_spec(), config.seed).unwrap();
        TrainState::new(params, config, micro_geometry()).unwrap()
    }

    fn micro_sample(seed: u64) -> TrainingSample {
        make_toy_dataset(1, 28, &ToyStyle::default(), seed)
            .unwrap()
            .samples
            .remove(0)
    }

    #[test]
    fn adversarial_loss_closed_forms() {
        let l = adversarial_loss(0.5, 0.5).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{l}");
        let l = adversarial_loss(1.0, 0.5).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6, "{l}");
        let g = generator_adversarial_term(0.5).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12, "{g}");
        // extremes survive through clamping rather than producing infinities
        assert!(adversarial_loss(0.0, 1.0).unwrap().is_finite());
        assert!(adversarial_loss(1.2, 0.5).is_err());
        assert!(adversarial_loss(0.5, -0.1).is_err());
        assert!(adversarial_loss(f64::NAN, 0.5).is_err());
        assert!(generator_adversarial_term(f64::INFINITY).is_err());
    }

    #[test]
    fn objective_combines_with_documented_weights() {
        let cfg = TrainingConfig::default();
        assert_eq!(total_objective(0.2, 0.5, &cfg), 50.2);
        assert_eq!(cfg.lambda_rec, 1.0);
        assert_eq!(cfg.lambda_adv, 100.0);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.beta1, 0.5);
        assert_eq!(cfg.epochs, 100);
    }

    #[test]
    fn reconstruction_loss_hand_oracle() {
        let a = Array3::from_shape_vec((1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![2.0f32, 0.0, 3.0, 5.0]).unwrap();
        // |1-2| + |2-0| + |3-3| + |4-5| = 4 over 4 elements
        assert!((reconstruction_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = Array3::<f32>::zeros((1, 2, 3));
        assert!(reconstruction_loss(&a, &c).is_err());
    }

    #[test]
    fn config_key_values_round_trip() {
        let mut cfg = TrainingConfig::default();
        cfg.lambda_adv = 25.0;
        cfg.epochs = 7;
        cfg.judging = JudgingLevel::Patch;
        let text = cfg.to_key_values();
        let back = TrainingConfig::from_key_values(&text).unwrap();
        assert_eq!(cfg, back);
        let with_comment = "epochs = 3 # short run\n\n# nothing else\n";
        assert_eq!(TrainingConfig::from_key_values(with_comment).unwrap().epochs, 3);
        assert!(TrainingConfig::from_key_values("no_such_key = 1").is_err());
        assert!(TrainingConfig::from_key_values("epochs = soon").is_err());
        assert!(TrainingConfig::from_key_values("beta1 = 1.5").is_err());
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut param = Array1::<f32>::zeros(1).into_dyn();
        let adam_views = vec![param.view()];
        let mut adam = Adam::new(0.01, 0.5, 0.999, &adam_views);
        drop(adam_views);
        let grad = Array1::<f32>::from_elem(1, 5.0).into_dyn();
        adam.step(vec![param.view_mut()], &[grad]).unwrap();
        assert!((param[[0]] + 0.01).abs() < 1e-6, "step ~= -lr, got {}", param[[0]]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut theta = Array1::<f32>::from_elem(1, -4.0).into_dyn();
        let views = vec![theta.view()];
        let mut adam = Adam::new(0.1, 0.5, 0.999, &views);
        drop(views);
        for _ in 0..500 {
            let g = 2.0 * (theta[[0]] - 3.0);
            let grad = Array1::<f32>::from_elem(1, g).into_dyn();
            adam.step(vec![theta.view_mut()], &[grad]).unwrap();
        }
        assert!((theta[[0]] - 3.0).abs() < 0.05, "converged to {}", theta[[0]]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut param = Array1::<f32>::zeros(2).into_dyn();
        let views = vec![param.view()];
        let mut adam = Adam::new(0.01, 0.5, 0.999, &views);
        drop(views);
        let grad = Array1::<f32>::from_vec(vec![1.0, f32::NAN]).into_dyn();
        assert!(adam.step(vec![param.view_mut()], &[grad]).is_err());
    }

    #[test]
    fn pure_reconstruction_training_descends() {
        let mut cfg = TrainingConfig::default();
        cfg.lambda_adv = 0.0;
        cfg.learning_rate = 1e-3;
        cfg.seed = 3;
        let mut state = micro_state(cfg);
        let sample = micro_sample(3);
        let first = train_step(&mut state, &sample).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = train_step(&mut state, &sample).unwrap();
        }
        assert!(
            last.l_rec < 0.5 * first.l_rec,
            "l_rec {} -> {} (expected at least a halving)",
            first.l_rec,
            last.l_rec
        );
    }

    #[test]
    fn gradient_reaches_every_patch() {
        let cfg = TrainingConfig::default();
        let state = micro_state(cfg.clone());
        let sample = micro_sample(5);
        let mask = sample.mask.to_input();
        let fwd = stitched_forward_t(&state.params.generator, &mask, &state.geometry).unwrap();
        assert_eq!(fwd.grid.len(), 4, "2x2 grid expected");
        let out = generator_grads_t(
            &state.params.generator,
            &state.params.discriminator,
            &fwd,
            &mask,
            sample.image.data(),
            cfg.lambda_rec,
            cfg.lambda_adv,
            JudgingLevel::Tile,
        )
        .unwrap();
        assert_eq!(out.patch_grad_norms.len(), 4);
        for (i, n) in out.patch_grad_norms.iter().enumerate() {
            assert!(*n > 0.0, "patch {i} received no gradient");
        }
        assert!(out.objective.is_finite());
        assert!(out.param_grads.iter().all(|g| g.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut cfg = TrainingConfig::default();
            cfg.seed = 9;
            let mut state = micro_state(cfg);
            let sample = micro_sample(9);
            let mut rows = Vec::new();
            for _ in 0..5 {
                rows.push(train_step(&mut state, &sample).unwrap().to_csv_row());
            }
            let bits: Vec<u32> = state
                .params
                .generator
                .parameters()
                .iter()
                .flat_map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect();
            (rows, bits)
        };
        let (rows_a, bits_a) = run();
        let (rows_b, bits_b) = run();
        assert_eq!(rows_a, rows_b);
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn patch_judging_trains_with_a_patch_sized_discriminator() {
        let mut cfg = TrainingConfig::default();
        cfg.judging = JudgingLevel::Patch;
        cfg.seed = 4;
        let disc = DiscriminatorSpec {
            input_side: 16,
            input_channels: 6,
            blocks: 2,
            base_channels: 4,
        };
        let params = init_params(&micro_gen_spec(), &disc, 4).unwrap();
        let mut state = TrainState::new(params, cfg, micro_geometry()).unwrap();
        let sample = micro_sample(4);
        for _ in 0..3 {
            let m = train_step(&mut state, &sample).unwrap();
            assert!(m.l_rec.is_finite() && m.l_adv_disc.is_finite() && m.l_adv_gen.is_finite());
        }
    }

    #[test]
    fn state_validation_catches_mismatched_shapes() {
        // geometry/generator mismatch
        let params = init_params(&micro_gen_spec(), &micro_disc_spec(), 0).unwrap();
        let bad_geometry = TileGeometry::new(16, 2, 4).unwrap();
        assert!(TrainState::new(params, TrainingConfig::default(), bad_geometry).is_err());
        // patch judging with a tile-sized discriminator
        let params = init_params(&micro_gen_spec(), &micro_disc_spec(), 0).unwrap();
        let mut cfg = TrainingConfig::default();
        cfg.judging = JudgingLevel::Patch;
        assert!(TrainState::new(params, cfg, micro_geometry()).is_err());
        // tile judging demands samples matching the discriminator side
        let mut state = micro_state(TrainingConfig::default());
        let small = TrainingSample::new(
            crate::geometry::ComponentMask::filled(16, 16, crate::geometry::TissueClass::Stroma),
            crate::geometry::Tile::new(Array3::<f32>::zeros((3, 16, 16))).unwrap(),
        )
        .unwrap();
        assert!(train_step(&mut state, &small).is_err());
    }

    #[test]
    fn train_loop_writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("metrics.csv");
        let ckpt_dir = dir.path().join("ckpts");
        let mut cfg = TrainingConfig::default();
        cfg.epochs = 3;
        cfg.checkpoint_every = 2;
        cfg.seed = 6;
        let mut state = micro_state(cfg);
        let dataset = vec![micro_sample(6), micro_sample(7)];
        let options = TrainOptions {
            metrics_csv: Some(&csv_path),
            checkpoint_dir: Some(&ckpt_dir),
        };
        let history = train(&mut state, &dataset, &options).unwrap();
        assert_eq!(history.len(), 6, "3 epochs x 2 samples");
        assert_eq!(state.step, 6);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(ckpt_dir.join("step_000002.ckpt").is_file());
        assert!(ckpt_dir.join("step_000004.ckpt").is_file());
        assert!(ckpt_dir.join("step_000006.ckpt").is_file());
        assert!(ckpt_dir.join("final.ckpt").is_file());
        let (restored, steps) =
            crate::nets::load_checkpoint(&ckpt_dir.join("final.ckpt")).unwrap();
        assert_eq!(steps, 6);
        assert_eq!(restored.generator.spec(), state.params.generator.spec());
        // empty dataset is an error
        assert!(train(&mut state, &[], &TrainOptions::default()).is_err());
    }

    #[test]
    fn generator_objective_matches_finite_differences_through_the_stitch() {
        // The same check the acceptance suite runs at full tolerance, kept
        // small here: f64 nets, loss = lambda_rec*L1 + lambda_adv*(-ln D).
        let gen_spec = GeneratorSpec {
            input_side: 12,
            output_side: 8,
            depth: 2,
            base_channels: 2,
            skip_connections: true,
        };
        let disc_spec = DiscriminatorSpec {
            input_side: 14,
            input_channels: 6,
            blocks: 2,
            base_channels: 2,
        };
        let geometry = TileGeometry::new(8, 2, 2).unwrap();
        let (gen, disc) =
            crate::nets::init_params_t::<f64>(&gen_spec, &disc_spec, 31).unwrap();
        // 14x14 tile -> 2x2 grid at stride 6
        let mut rng_mask = Array3::<f64>::zeros((3, 14, 14));
        for y in 0..14 {
            for x in 0..14 {
                rng_mask[((x + y) % 3, y, x)] = 1.0;
            }
        }
        let real = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
            Array3::from_shape_simple_fn((3, 14, 14), || rng.random_range(-1.0..1.0))
        };
        let objective = |g: &Generator<f64>| -> f64 {
            let fwd = stitched_forward_t(g, &rng_mask, &geometry).unwrap();
            generator_grads_t(
                g,
                &disc,
                &fwd,
                &rng_mask,
                &real,
                1.0,
                100.0,
                JudgingLevel::Tile,
            )
            .unwrap()
            .objective
        };
        let fwd = stitched_forward_t(&gen, &rng_mask, &geometry).unwrap();
        let out = generator_grads_t(
            &gen,
            &disc,
            &fwd,
            &rng_mask,
            &real,
            1.0,
            100.0,
            JudgingLevel::Tile,
        )
        .unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let eps = 1e-5;
        for probe in 0..6 {
            let t = (probe * 5 + 1) % out.param_grads.len();
            let j = rng.random_range(0..out.param_grads[t].len());
            let mut gp = gen.clone();
            *gp.parameters_mut()[t].iter_mut().nth(j).unwrap() += eps;
            let mut gm = gen.clone();
            *gm.parameters_mut()[t].iter_mut().nth(j).unwrap() -= eps;
            let num = (objective(&gp) - objective(&gm)) / (2.0 * eps);
            let ana = *out.param_grads[t].iter().nth(j).unwrap();
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "tensor {t} elem {j}: numeric {num} vs analytic {ana} (rel {rel})"
            );
        }
    }
}
