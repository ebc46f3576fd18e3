//! Image quality metrics and the Gaussian compression ratio.
//!
//! SSIM-family metrics operate on BT.601 luminance with an 11×11 Gaussian
//! window (σ = 1.5) and valid-region filtering. MS-SSIM drops scales when
//! the image is too small for five dyadic levels and renormalizes the
//! remaining weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{luminance, LUMA};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Contrast-structure terms are floored here before the fractional power.
pub const MS_SSIM_FLOOR: f64 = 1e-4;
pub const EME_EPS: f64 = 1e-4;
pub const LOE_MAX_SIDE: usize = 100;

/// Peak signal-to-noise ratio for unit peak. Identical images give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self { w, h, v: vec![0.0; w * h] }
    }

    fn from_image(img: &ImageBuffer) -> Self {
        let y = luminance(img);
        Self { w: y.width(), h: y.height(), v: y.into_data() }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// 2×2 mean pooling; a trailing odd row or column is dropped.
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                out.v[y * w + x] = 0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]);
            }
        }
        out
    }

    /// Adjoint of [`Plane::downsample`] onto a `w × h` plane.
    fn downsample_adjoint(&self, w: usize, h: usize) -> Plane {
        let mut out = Plane::zeros(w, h);
        for y in 0..self.h {
            for x in 0..self.w {
                let g = 0.25 * self.v[y * self.w + x];
                let i = 2 * y * w + 2 * x;
                out.v[i] += g;
                out.v[i + 1] += g;
                out.v[i + w] += g;
                out.v[i + w + 1] += g;
            }
        }
        out
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-region correlation.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (ow, oh) = (p.w + 1 - n, p.h + 1 - n);
    let mut tmp = Plane::zeros(ow, p.h);
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp.v[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = Plane::zeros(ow, oh);
    for y in 0..oh {
        for (j, &kj) in k.iter().enumerate() {
            let src = &tmp.v[(y + j) * ow..(y + j + 1) * ow];
            for (o, s) in out.v[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kj * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-space gradient back to a
/// `w × h` input plane.
fn filter_valid_adjoint(g: &Plane, k: &[f64], w: usize, h: usize) -> Plane {
    let mut tmp = Plane::zeros(g.w, h);
    for y in 0..g.h {
        for (j, &kj) in k.iter().enumerate() {
            let dst = &mut tmp.v[(y + j) * g.w..(y + j + 1) * g.w];
            for (d, s) in dst.iter_mut().zip(&g.v[y * g.w..(y + 1) * g.w]) {
                *d += kj * s;
            }
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        let src = &tmp.v[y * g.w..(y + 1) * g.w];
        let dst = &mut out.v[y * w..(y + 1) * w];
        for (x, &s) in src.iter().enumerate() {
            for (j, &kj) in k.iter().enumerate() {
                dst[x + j] += kj * s;
            }
        }
    }
    out
}

/// Window actually used for an image whose smaller side is `min_side`.
fn window_size(min_side: usize) -> usize {
    let w = SSIM_WINDOW.min(min_side);
    if w % 2 == 0 { w - 1 } else { w }.max(1)
}

/// Number of MS-SSIM scales that fit an image of the given smaller side.
pub fn ms_ssim_levels(min_side: usize) -> usize {
    let win = window_size(min_side);
    let mut levels = MS_SSIM_WEIGHTS.len();
    while levels > 1 && (min_side >> (levels - 1)) < win {
        levels -= 1;
    }
    levels
}

struct ScaleStats {
    mu_x: Plane,
    mu_y: Plane,
    sxx: Plane,
    syy: Plane,
    sxy: Plane,
}

impl ScaleStats {
    fn new(x: &Plane, y: &Plane, k: &[f64]) -> Self {
        Self {
            mu_x: filter_valid(x, k),
            mu_y: filter_valid(y, k),
            sxx: filter_valid(&x.zip(x, |a, b| a * b), k),
            syy: filter_valid(&y.zip(y, |a, b| a * b), k),
            sxy: filter_valid(&x.zip(y, |a, b| a * b), k),
        }
    }

    /// Mean SSIM and mean contrast-structure over the valid map.
    fn means(&self) -> (f64, f64) {
        let n = self.mu_x.v.len() as f64;
        debug_assert!(n > 0.0);
        let (mut ssim, mut cs) = (0.0, 0.0);
        for i in 0..self.mu_x.v.len() {
            let (l, c) = self.terms(i);
            ssim += l * c;
            cs += c;
        }
        (ssim / n, cs / n)
    }

    #[inline]
    fn terms(&self, i: usize) -> (f64, f64) {
        let (mx, my) = (self.mu_x.v[i], self.mu_y.v[i]);
        let vx = self.sxx.v[i] - mx * mx;
        let vy = self.syy.v[i] - my * my;
        let cxy = self.sxy.v[i] - mx * my;
        let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
        let cs = (2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2);
        (l, cs)
    }

    /// Gradient of `d_ssim · mean(ssim) + d_cs · mean(cs)` w.r.t. `x`.
    fn grad_x(&self, x: &Plane, y: &Plane, k: &[f64], d_ssim: f64, d_cs: f64) -> Plane {
        let m = self.mu_x.v.len();
        let count = m as f64;
        let (ow, oh) = (self.mu_x.w, self.mu_x.h);
        let mut g_mu = Plane::zeros(ow, oh);
        let mut g_sxx = Plane::zeros(ow, oh);
        let mut g_sxy = Plane::zeros(ow, oh);
        for i in 0..m {
            let (mx, my) = (self.mu_x.v[i], self.mu_y.v[i]);
            let vx = self.sxx.v[i] - mx * mx;
            let vy = self.syy.v[i] - my * my;
            let cxy = self.sxy.v[i] - mx * my;
            let ln = 2.0 * mx * my + SSIM_C1;
            let ld = mx * mx + my * my + SSIM_C1;
            let cn = 2.0 * cxy + SSIM_C2;
            let cd = vx + vy + SSIM_C2;
            let l = ln / ld;
            let cs = cn / cd;
            // Partials of l and cs in terms of (mu_x, Sxx, Sxy).
            let dl_dmu = 2.0 * my / ld - ln * 2.0 * mx / (ld * ld);
            let dcs_dsxy = 2.0 / cd;
            let dcs_dsxx = -cn / (cd * cd);
            let dcs_dmu = -2.0 * my / cd + cn * 2.0 * mx / (cd * cd);
            let a = d_ssim / count;
            let b = d_cs / count;
            g_mu.v[i] = a * (dl_dmu * cs + l * dcs_dmu) + b * dcs_dmu;
            g_sxx.v[i] = (a * l + b) * dcs_dsxx;
            g_sxy.v[i] = (a * l + b) * dcs_dsxy;
        }
        let gm = filter_valid_adjoint(&g_mu, k, x.w, x.h);
        let gs = filter_valid_adjoint(&g_sxx, k, x.w, x.h);
        let gc = filter_valid_adjoint(&g_sxy, k, x.w, x.h);
        let mut out = Plane::zeros(x.w, x.h);
        for i in 0..out.v.len() {
            out.v[i] = gm.v[i] + 2.0 * x.v[i] * gs.v[i] + y.v[i] * gc.v[i];
        }
        out
    }
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width() == 0 || a.height() == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    if a.channels() != 1 && a.channels() != 3 {
        return Err(Error::InvalidArgument(format!("unsupported channel count {}", a.channels())));
    }
    Ok(())
}

/// Mean single-scale SSIM on luminance.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let (x, y) = (Plane::from_image(a), Plane::from_image(b));
    let k = gaussian_kernel(window_size(x.w.min(x.h)), SSIM_SIGMA);
    Ok(ScaleStats::new(&x, &y, &k).means().0)
}

/// MS-SSIM on luminance and its gradient with respect to `a`.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    check_pair(a, b)?;
    let min_side = a.width().min(a.height());
    let levels = ms_ssim_levels(min_side);
    let k = gaussian_kernel(window_size(min_side), SSIM_SIGMA);
    let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..levels].iter().map(|w| w / wsum).collect();

    let mut xs = vec![Plane::from_image(a)];
    let mut ys = vec![Plane::from_image(b)];
    for _ in 1..levels {
        let (nx, ny) = (xs.last().unwrap().downsample(), ys.last().unwrap().downsample());
        xs.push(nx);
        ys.push(ny);
    }
    let stats: Vec<ScaleStats> = xs.iter().zip(&ys).map(|(x, y)| ScaleStats::new(x, y, &k)).collect();
    // Per-scale factor: cs at every scale but the last, full SSIM at the last.
    let raw: Vec<f64> = stats
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let (ss, cs) = s.means();
            if j + 1 == levels {
                ss
            } else {
                cs
            }
        })
        .collect();
    let clamped: Vec<f64> = raw.iter().map(|&v| v.max(MS_SSIM_FLOOR)).collect();
    let value: f64 = clamped.iter().zip(&weights).map(|(v, w)| v.powf(*w)).product();

    let mut grad: Option<Plane> = None;
    for j in (0..levels).rev() {
        let d_factor = if raw[j] >= MS_SSIM_FLOOR { value * weights[j] / clamped[j] } else { 0.0 };
        let (d_ss, d_cs) = if j + 1 == levels { (d_factor, 0.0) } else { (0.0, d_factor) };
        let mut g = stats[j].grad_x(&xs[j], &ys[j], &k, d_ss, d_cs);
        if let Some(coarse) = grad.take() {
            let up = coarse.downsample_adjoint(xs[j].w, xs[j].h);
            g.v.iter_mut().zip(&up.v).for_each(|(a, b)| *a += b);
        }
        grad = Some(g);
    }
    let g = grad.unwrap();
    let grad_img = if a.channels() == 3 {
        ImageBuffer::from_fn(a.width(), a.height(), 3, |x, y, c| LUMA[c] * g.v[y * g.w + x])
    } else {
        ImageBuffer::from_vec(a.width(), a.height(), 1, g.v)?
    };
    Ok((value, grad_img))
}

/// Shannon entropy in bits of the 8-bit quantized luminance histogram.
pub fn discrete_entropy(img: &ImageBuffer) -> f64 {
    let y = luminance(img);
    let mut hist = [0usize; 256];
    for &v in y.data() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = y.data().len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean block-wise Weber contrast `20·log10((max + ε)/(min + ε))` over
/// non-overlapping luminance blocks; edge blocks may be partial.
pub fn eme(img: &ImageBuffer, block_px: usize) -> Result<f64> {
    if block_px == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    let y = luminance(img);
    let (w, h) = (y.width(), y.height());
    let (bx, by) = (w.div_ceil(block_px), h.div_ceil(block_px));
    if bx * by == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..by {
        for i in 0..bx {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for yy in j * block_px..((j + 1) * block_px).min(h) {
                for xx in i * block_px..((i + 1) * block_px).min(w) {
                    let v = y.get(xx, yy, 0);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            total += 20.0 * ((hi + EME_EPS) / (lo + EME_EPS)).log10();
        }
    }
    Ok(total / (bx * by) as f64)
}

/// Lightness-order error ×100 between an enhanced image and its original.
///
/// Both images are subsampled so the longer side is at most
/// [`LOE_MAX_SIDE`]; lightness is the channel maximum.
pub fn loe(enh: &ImageBuffer, orig: &ImageBuffer) -> Result<f64> {
    check_pair(enh, orig)?;
    let (w, h) = (enh.width(), enh.height());
    let step = w.max(h).div_ceil(LOE_MAX_SIDE).max(1);
    let lightness = |img: &ImageBuffer| -> Vec<f64> {
        let mut out = Vec::new();
        for y in (0..h).step_by(step) {
            for x in (0..w).step_by(step) {
                out.push(img.pixel(x, y).iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
        out
    };
    let (ue, uo) = (lightness(enh), lightness(orig));
    let m = ue.len();
    let mut mismatches = 0usize;
    for p in 0..m {
        for q in 0..m {
            if (ue[p] >= ue[q]) != (uo[p] >= uo[q]) {
                mismatches += 1;
            }
        }
    }
    Ok(100.0 * mismatches as f64 / (m * m) as f64)
}

/// Degrees of freedom of the pixel grid over those of the Gaussian set:
/// `3HW / 9N`.
pub fn compression_ratio(width: usize, height: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("compression ratio undefined for zero gaussians".into()));
    }
    Ok((width * height) as f64 / (3 * n) as f64)
}

/// Metrics computed for one image pair; absent entries were not requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", with = "psnr_serde")]
    #[serde(default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub de: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eme: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loe: Option<f64>,
}

// JSON has no infinity; identical images serialize PSNR as the string "inf".
mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => Repr::Text("inf".into()).serialize(s),
            Some(x) => Repr::Num(*x).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Repr::Text(t)) => return Err(serde::de::Error::custom(format!("bad psnr {t}"))),
        })
    }
}

impl MetricReport {
    /// Full-reference metrics of `test` against `reference`, plus the
    /// no-reference metrics of `test` and LOE relative to `reference`.
    pub fn compute(reference: &ImageBuffer, test: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            psnr: Some(psnr(test, reference)?),
            ssim: Some(ssim(test, reference)?),
            ms_ssim: Some(ms_ssim(test, reference)?.0),
            de: Some(discrete_entropy(test)),
            eme: Some(eme(test, 8)?),
            loe: Some(loe(test, reference)?),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                if v.is_infinite() {
                    out.push_str(&format!("{k}: inf\n"));
                } else {
                    out.push_str(&format!("{k}: {v:.6}\n"));
                }
            }
        };
        line("psnr", self.psnr);
        line("ssim", self.ssim);
        line("ms_ssim", self.ms_ssim);
        line("de", self.de);
        line("eme", self.eme);
        line("loe", self.loe);
        out
    }
}
