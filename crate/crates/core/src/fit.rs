//! Stage 1: fitting a Gaussian set to an image from a cold start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::image::ImageBuffer;
use crate::metrics::{ms_ssim, psnr};
use crate::raster::{backward, build_tiles, render_tiles, RasterOptions, DEFAULT_TILE_PX};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", state.m.len()),
            actual: format!("{} params / {} grads", params.len(), grads.len()),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Step decay: `lr0 · decay^⌊iter / every⌋`.
pub fn lr_schedule_step(lr0: f64, iter: usize, decay: f64, every: usize) -> f64 {
    lr0 * decay.powi((iter / every.max(1)) as i32)
}

/// Cosine annealing from `lr0` at `t = 0` to `floor_fraction · lr0` at `t = total`.
pub fn lr_schedule_cosine(lr0: f64, t: usize, total: usize, floor_fraction: f64) -> f64 {
    let lr_f = floor_fraction * lr0;
    if total == 0 {
        return lr0;
    }
    let progress = (t.min(total) as f64) / total as f64;
    lr_f + 0.5 * (lr0 - lr_f) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `(1 − λ)·mean|rendered − target| + λ·(1 − MS-SSIM(rendered, target))`
/// and its gradient with respect to `rendered`.
pub fn reconstruction_loss(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    lambda_ssim: f64,
) -> Result<(f64, ImageBuffer)> {
    rendered.ensure_same_shape(target)?;
    if !(0.0..=1.0).contains(&lambda_ssim) {
        return Err(Error::InvalidArgument(format!("lambda_ssim {lambda_ssim} outside [0, 1]")));
    }
    let n = rendered.data().len().max(1) as f64;
    let w_l1 = 1.0 - lambda_ssim;
    let mut l1 = 0.0;
    let mut grad = rendered.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            w_l1 / n
        } else if d < 0.0 {
            -w_l1 / n
        } else {
            0.0
        };
    }
    let mut loss = w_l1 * l1 / n;
    if lambda_ssim > 0.0 {
        let (ms, g_ms) = ms_ssim(rendered, target)?;
        loss += lambda_ssim * (1.0 - ms);
        for (g, d) in grad.data_mut().iter_mut().zip(g_ms.data()) {
            *g -= lambda_ssim * d;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_gaussians: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub step_decay: f64,
    pub step_every: usize,
    pub lambda_ssim: f64,
    pub tile_px: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 70_000,
            iterations: 30_000,
            lr0: 0.01,
            step_decay: 0.9,
            step_every: 7_000,
            lambda_ssim: 0.2,
            tile_px: DEFAULT_TILE_PX,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_gaussians == 0 {
            return bad("n_gaussians must be positive");
        }
        if self.tile_px == 0 {
            return bad("tile_px must be positive");
        }
        if self.step_every == 0 {
            return bad("step_every must be positive");
        }
        if !(self.lr0 > 0.0) || !(self.step_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return bad("lambda_ssim must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-iteration report handed to the progress sink.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitProgress {
    pub iter: usize,
    pub loss: f64,
    /// PSNR of the render this iteration's gradient was computed from.
    pub psnr: f64,
    pub lr: f64,
}

/// Fits `cfg.n_gaussians` primitives to `target`.
///
/// The returned set is rounded to `f32` storage precision so that it
/// serializes losslessly.
pub fn fit_image(target: &ImageBuffer, cfg: &FitConfig, mut progress: impl FnMut(&FitProgress)) -> Result<GaussianSet> {
    cfg.validate()?;
    if target.channels() != 3 {
        return Err(Error::InvalidArgument(format!("target must have 3 channels, got {}", target.channels())));
    }
    let mut set =
        GaussianSet::init_cold_start(cfg.n_gaussians, target.width() as u32, target.height() as u32, cfg.seed)?;
    let opts = RasterOptions::production(cfg.tile_px);
    let mut params = set.to_flat();
    let mut adam = AdamState::new(params.len());

    for iter in 0..cfg.iterations {
        let lr = lr_schedule_step(cfg.lr0, iter, cfg.step_decay, cfg.step_every);
        let tiles = build_tiles(&set, &opts)?;
        let rendered = render_tiles(&set, &tiles, &opts);
        let (loss, grad_img) = reconstruction_loss(&rendered, target, cfg.lambda_ssim)?;
        let grads = backward(&set, &tiles, &grad_img, &opts, false)?.to_flat();
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gaussian gradients"));
        }
        adam_step(&mut params, &grads, &mut adam, lr)?;
        set.assign_flat(&params)?;
        if !set.all_finite() {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        progress(&FitProgress { iter, loss, psnr: psnr(&rendered, target)?, lr });
    }
    set.round_to_storage();
    Ok(set)
}
