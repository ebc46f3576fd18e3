//! Anisotropic 2D Gaussian primitives: storage, activations, covariance and
//! conic math, and per-pixel response.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`; primitive
//! centers live in the same continuous frame, so `mu ∈ [0, W) × [0, H)`
//! covers the viewport.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Lower bound on activated scales, in pixels.
pub const SCALE_FLOOR: f64 = 0.3;
/// Determinant below which a covariance is treated as singular.
pub const DET_EPS: f64 = 1e-12;
/// Activated opacity of freshly initialized primitives.
pub const INIT_OPACITY: f64 = 0.1;
/// Number of raw scalars per primitive.
pub const PARAMS_PER_GAUSSIAN: usize = 9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of [`sigmoid`] for `p ∈ (0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A set of 2D Gaussians over a `width × height` viewport, stored as one
/// array per attribute. Scales and opacity are kept pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub width: u32,
    pub height: u32,
    pub mu: Vec<[f64; 2]>,
    pub scale_raw: Vec<[f64; 2]>,
    pub theta: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub opacity_raw: Vec<f64>,
}

/// Activated geometry and opacity of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activated {
    pub sx: f64,
    pub sy: f64,
    pub theta: f64,
    pub opacity: f64,
}

impl GaussianSet {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            mu: Vec::new(),
            scale_raw: Vec::new(),
            theta: Vec::new(),
            color: Vec::new(),
            opacity_raw: Vec::new(),
        }
    }

    pub fn with_capacity(width: u32, height: u32, n: usize) -> Self {
        Self {
            width,
            height,
            mu: Vec::with_capacity(n),
            scale_raw: Vec::with_capacity(n),
            theta: Vec::with_capacity(n),
            color: Vec::with_capacity(n),
            opacity_raw: Vec::with_capacity(n),
        }
    }

    /// Cold start: centers uniform over the viewport, isotropic scale
    /// `√(HW/N)`, zero rotation, black color and opacity [`INIT_OPACITY`].
    pub fn init_cold_start(count: usize, width: u32, height: u32, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(invalid("gaussian count must be at least 1"));
        }
        if width == 0 || height == 0 {
            return Err(invalid(format!("viewport {width}x{height} has zero area")));
        }
        let (w, h) = (width as f64, height as f64);
        let init_scale = (w * h / count as f64).sqrt();
        let raw_scale = softplus_inv((init_scale - SCALE_FLOOR).max(1e-3));
        let raw_opacity = logit(INIT_OPACITY);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::with_capacity(width, height, count);
        for _ in 0..count {
            let x = rng.gen_range(0.0..w);
            let y = rng.gen_range(0.0..h);
            set.push([x, y], [raw_scale, raw_scale], 0.0, [0.0; 3], raw_opacity);
        }
        Ok(set)
    }

    pub fn push(&mut self, mu: [f64; 2], scale_raw: [f64; 2], theta: f64, color: [f64; 3], opacity_raw: f64) {
        self.mu.push(mu);
        self.scale_raw.push(scale_raw);
        self.theta.push(theta);
        self.color.push(color);
        self.opacity_raw.push(opacity_raw);
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Checks that all attribute arrays agree in length and hold finite values.
    pub fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if self.scale_raw.len() != n || self.theta.len() != n || self.color.len() != n || self.opacity_raw.len() != n {
            return Err(invalid("attribute arrays differ in length"));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.mu.iter().flatten().all(|v| v.is_finite())
            && self.scale_raw.iter().flatten().all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite())
            && self.color.iter().flatten().all(|v| v.is_finite())
            && self.opacity_raw.iter().all(|v| v.is_finite())
    }

    pub fn activate(&self, index: usize) -> Result<Activated> {
        if index >= self.len() {
            return Err(invalid(format!("index {index} out of range for {} gaussians", self.len())));
        }
        Ok(self.activated(index))
    }

    #[inline]
    pub(crate) fn activated(&self, i: usize) -> Activated {
        let [rx, ry] = self.scale_raw[i];
        Activated {
            sx: SCALE_FLOOR + softplus(rx),
            sy: SCALE_FLOOR + softplus(ry),
            theta: self.theta[i],
            opacity: sigmoid(self.opacity_raw[i]),
        }
    }

    /// Raw parameters as one vector in attribute blocks:
    /// `[mu (2N) | scale_raw (2N) | theta (N) | color (3N) | opacity_raw (N)]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * PARAMS_PER_GAUSSIAN);
        out.extend(self.mu.iter().flatten());
        out.extend(self.scale_raw.iter().flatten());
        out.extend(&self.theta);
        out.extend(self.color.iter().flatten());
        out.extend(&self.opacity_raw);
        out
    }

    /// Inverse of [`GaussianSet::to_flat`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.len();
        if flat.len() != n * PARAMS_PER_GAUSSIAN {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", n * PARAMS_PER_GAUSSIAN),
                actual: format!("{} values", flat.len()),
            });
        }
        let (mu, rest) = flat.split_at(2 * n);
        let (scale, rest) = rest.split_at(2 * n);
        let (theta, rest) = rest.split_at(n);
        let (color, opacity) = rest.split_at(3 * n);
        for i in 0..n {
            self.mu[i] = [mu[2 * i], mu[2 * i + 1]];
            self.scale_raw[i] = [scale[2 * i], scale[2 * i + 1]];
            self.theta[i] = theta[i];
            self.color[i] = [color[3 * i], color[3 * i + 1], color[3 * i + 2]];
            self.opacity_raw[i] = opacity[i];
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_storage(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.mu.iter_mut().flatten().for_each(r);
        self.scale_raw.iter_mut().flatten().for_each(r);
        self.theta.iter_mut().for_each(r);
        self.color.iter_mut().flatten().for_each(r);
        self.opacity_raw.iter_mut().for_each(r);
    }
}

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn mul(&self, other: &Sym2) -> [[f64; 2]; 2] {
        [
            [self.xx * other.xx + self.xy * other.xy, self.xx * other.xy + self.xy * other.yy],
            [self.xy * other.xx + self.yy * other.xy, self.xy * other.xy + self.yy * other.yy],
        ]
    }
}

/// Inverse covariance `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Conic {
    pub fn as_sym(&self) -> Sym2 {
        Sym2 { xx: self.a, xy: self.b, yy: self.c }
    }

    /// Conic of `R diag(sx², sy²) Rᵀ` computed directly as `R diag(sx⁻², sy⁻²) Rᵀ`.
    #[inline]
    pub fn from_scale_rotation(sx: f64, sy: f64, theta: f64) -> Conic {
        let (s, c) = theta.sin_cos();
        let u = 1.0 / (sx * sx);
        let v = 1.0 / (sy * sy);
        Conic { a: u * c * c + v * s * s, b: (u - v) * s * c, c: u * s * s + v * c * c }
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `R` the rotation by `theta` and `S = diag(sx, sy)`.
pub fn covariance(sx: f64, sy: f64, theta: f64) -> Result<Sym2> {
    if !(sx > 0.0 && sy > 0.0) {
        return Err(invalid(format!("scales must be positive, got ({sx}, {sy})")));
    }
    let (s, c) = theta.sin_cos();
    let (x2, y2) = (sx * sx, sy * sy);
    Ok(Sym2 { xx: x2 * c * c + y2 * s * s, xy: (x2 - y2) * s * c, yy: x2 * s * s + y2 * c * c })
}

pub fn conic_of(sigma: &Sym2) -> Result<Conic> {
    let det = sigma.det();
    if !(det > DET_EPS) || sigma.xx <= 0.0 {
        return Err(Error::NearSingular { det });
    }
    let inv = 1.0 / det;
    Ok(Conic { a: sigma.yy * inv, b: -sigma.xy * inv, c: sigma.xx * inv })
}

/// Gaussian response `exp(-½ Δᵀ Q Δ)` with `Δ = pixel − center`.
#[inline]
pub fn response(conic: &Conic, center: [f64; 2], pixel: [f64; 2]) -> f64 {
    let dx = pixel[0] - center[0];
    let dy = pixel[1] - center[1];
    (-0.5 * (conic.a * dx * dx + 2.0 * conic.b * dx * dy + conic.c * dy * dy)).exp()
}
