//! Unsupervised enhancement objective: exposure, hue preservation, spatial
//! consistency, colorfulness, contrast, and weight-map regularization.
//!
//! Every term returns its scalar value together with the analytic gradient
//! with respect to the enhanced image (or the softmaxed weight map).
//! Reference-image quantities such as the saturation mask and σ_orig are
//! treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// BT.601 luma coefficients.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const HUE_EPS: f64 = 1e-6;
pub const COLOR_EPS: f64 = 1e-8;
pub const ENTROPY_EPS: f64 = 1e-8;

/// How pixel-summed terms (spatial, TV, entropy) are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(self, count: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / count.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Loss weights λ₁..λ₇ and term hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// exp, hue, spa, col, con, tv, ent.
    pub lambdas: [f64; 7],
    pub exposure_target: f64,
    pub saturation_threshold: f64,
    pub contrast_gamma: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: [50.0, 25.0, 32.5, 2.91, 0.44, 500.0, 0.01],
            exposure_target: 0.7,
            saturation_threshold: 0.1,
            contrast_gamma: 1.05,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub exp: f64,
    pub hue: f64,
    pub spa: f64,
    pub col: f64,
    pub con: f64,
    pub tv: f64,
    pub ent: f64,
    pub lambdas: [f64; 7],
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,total,exp,hue,spa,col,con,tv,ent";

    pub fn terms(&self) -> [f64; 7] {
        [self.exp, self.hue, self.spa, self.col, self.con, self.tv, self.ent]
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms().iter().zip(&self.lambdas).map(|(t, l)| t * l).sum()
    }

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{},{},{},{},{},{},{},{}",
            self.total, self.exp, self.hue, self.spa, self.col, self.con, self.tv, self.ent
        )
    }
}

fn require_rgb(img: &ImageBuffer) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {}", img.channels())));
    }
    Ok(())
}

/// Per-pixel BT.601 luminance; single-channel inputs pass through.
pub fn luminance(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 1 {
        return img.clone();
    }
    ImageBuffer::from_fn(img.width(), img.height(), 1, |x, y, _| {
        let p = img.pixel(x, y);
        LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(mean Y − E_h)²`.
pub fn exposure_loss(enh: &ImageBuffer, target: f64) -> Result<(f64, ImageBuffer)> {
    require_rgb(enh)?;
    let y = luminance(enh);
    let n = y.data().len().max(1) as f64;
    let diff = y.mean() - target;
    let g = 2.0 * diff / n;
    let grad = ImageBuffer::from_fn(enh.width(), enh.height(), 3, |_, _, c| g * LUMA[c]);
    Ok((diff * diff, grad))
}

/// Hexagonal hue in `[0, 1)` and its gradient with respect to `(r, g, b)`.
/// The maximum channel wins ties in R, G, B order; grays have hue 0.
pub fn hue_with_grad(rgb: [f64; 3]) -> (f64, [f64; 3]) {
    let [r, g, b] = rgb;
    let hi = if r >= g && r >= b {
        0
    } else if g >= b {
        1
    } else {
        2
    };
    let lo = match hi {
        0 => {
            if g <= b {
                1
            } else {
                2
            }
        }
        1 => {
            if r <= b {
                0
            } else {
                2
            }
        }
        _ => {
            if r <= g {
                0
            } else {
                1
            }
        }
    };
    let d = rgb[hi] - rgb[lo];
    if d <= 0.0 {
        return (0.0, [0.0; 3]);
    }
    let (n, dn, offset) = match hi {
        0 => (g - b, [0.0, 1.0, -1.0], 0.0),
        1 => (b - r, [-1.0, 0.0, 1.0], 2.0),
        _ => (r - g, [1.0, -1.0, 0.0], 4.0),
    };
    let mut h = (n / d + offset) / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    let mut dd = [0.0; 3];
    dd[hi] = 1.0;
    dd[lo] = -1.0;
    let grad = [0, 1, 2].map(|k| (dn[k] / d - n * dd[k] / (d * d)) / 6.0);
    (h, grad)
}

/// HSV saturation `(max − min)/max`, zero for black.
pub fn saturation(rgb: [f64; 3]) -> f64 {
    let hi = rgb[0].max(rgb[1]).max(rgb[2]);
    let lo = rgb[0].min(rgb[1]).min(rgb[2]);
    if hi <= 0.0 {
        0.0
    } else {
        (hi - lo) / hi
    }
}

/// Hue and saturation planes.
pub fn rgb_to_hs(img: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    require_rgb(img)?;
    let px = |x, y| {
        let p = img.pixel(x, y);
        [p[0], p[1], p[2]]
    };
    let h = ImageBuffer::from_fn(img.width(), img.height(), 1, |x, y, _| hue_with_grad(px(x, y)).0);
    let s = ImageBuffer::from_fn(img.width(), img.height(), 1, |x, y, _| saturation(px(x, y)));
    Ok((h, s))
}

/// Masked mean circular hue distance to `orig`, over pixels whose original
/// saturation exceeds `tau`.
pub fn hue_loss(enh: &ImageBuffer, orig: &ImageBuffer, tau: f64) -> Result<(f64, ImageBuffer)> {
    require_rgb(enh)?;
    enh.ensure_same_shape(orig)?;
    let mut grad = ImageBuffer::zeros(enh.width(), enh.height(), 3);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut dists = Vec::new();
    for y in 0..enh.height() {
        for x in 0..enh.width() {
            let o = orig.pixel(x, y);
            let o = [o[0], o[1], o[2]];
            if saturation(o) <= tau {
                continue;
            }
            count += 1;
            let e = enh.pixel(x, y);
            let (he, dh) = hue_with_grad([e[0], e[1], e[2]]);
            let (ho, _) = hue_with_grad(o);
            let diff = he - ho;
            let delta = diff.abs();
            let (dist, slope) = if delta <= 0.5 {
                (delta, diff.signum() * (delta > 0.0) as u8 as f64)
            } else {
                (1.0 - delta, -diff.signum())
            };
            sum += dist;
            dists.push((x, y, slope, dh));
        }
    }
    let denom = count as f64 + HUE_EPS;
    for (x, y, slope, dh) in dists {
        for c in 0..3 {
            grad.set(x, y, c, slope * dh[c] / denom);
        }
    }
    Ok((sum / denom, grad))
}

/// `−√(σ_rg² + σ_yb² + ε)` with `rg = R − G`, `yb = ½(R + G) − B`.
pub fn colorfulness_loss(enh: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    require_rgb(enh)?;
    let n = enh.pixel_count();
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    for p in enh.data().chunks_exact(3) {
        rg.push(p[0] - p[1]);
        yb.push(0.5 * (p[0] + p[1]) - p[2]);
    }
    let (m_rg, s_rg) = mean_std(&rg);
    let (m_yb, s_yb) = mean_std(&yb);
    let root = (s_rg * s_rg + s_yb * s_yb + COLOR_EPS).sqrt();
    let nf = n.max(1) as f64;
    // d(−root)/d(var) = −1/(2 root); d var/d v_p = 2 (v_p − mean)/n.
    let k = -1.0 / (root * nf);
    let mut grad = ImageBuffer::zeros(enh.width(), enh.height(), 3);
    for (i, g) in grad.data_mut().chunks_exact_mut(3).enumerate() {
        let a = k * (rg[i] - m_rg);
        let b = k * (yb[i] - m_yb);
        g[0] = a + 0.5 * b;
        g[1] = -a + 0.5 * b;
        g[2] = -b;
    }
    Ok((-root, grad))
}

/// `ReLU(γ·σ_orig − σ_enh)` on global luminance standard deviation.
pub fn contrast_loss(enh: &ImageBuffer, orig: &ImageBuffer, gamma: f64) -> Result<(f64, ImageBuffer)> {
    require_rgb(enh)?;
    enh.ensure_same_shape(orig)?;
    let ye = luminance(enh);
    let (_, s_orig) = mean_std(luminance(orig).data());
    let (m_e, s_e) = mean_std(ye.data());
    let gap = gamma * s_orig - s_e;
    let mut grad = ImageBuffer::zeros(enh.width(), enh.height(), 3);
    if gap <= 0.0 {
        return Ok((0.0, grad));
    }
    if s_e > 0.0 {
        let n = ye.data().len() as f64;
        for (i, g) in grad.data_mut().chunks_exact_mut(3).enumerate() {
            let d = -(ye.data()[i] - m_e) / (n * s_e);
            for c in 0..3 {
                g[c] = d * LUMA[c];
            }
        }
    }
    Ok((gap, grad))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Reflect index `i` into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Per-channel 3×3 correlation with reflection padding.
pub fn sobel(img: &ImageBuffer, vertical: bool) -> ImageBuffer {
    let k = if vertical { &SOBEL_Y } else { &SOBEL_X };
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    ImageBuffer::from_fn(w, h, ch, |x, y, c| {
        let mut acc = 0.0;
        for (j, row) in k.iter().enumerate() {
            let yy = reflect(y as isize + j as isize - 1, h);
            for (i, &kv) in row.iter().enumerate() {
                if kv != 0.0 {
                    acc += kv * img.get(reflect(x as isize + i as isize - 1, w), yy, c);
                }
            }
        }
        acc
    })
}

fn sobel_adjoint(g: &ImageBuffer, vertical: bool, out: &mut ImageBuffer) {
    let k = if vertical { &SOBEL_Y } else { &SOBEL_X };
    let (w, h, ch) = (g.width(), g.height(), g.channels());
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let s = g.get(x, y, c);
                if s == 0.0 {
                    continue;
                }
                for (j, row) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - 1, h);
                    for (i, &kv) in row.iter().enumerate() {
                        if kv != 0.0 {
                            let xx = reflect(x as isize + i as isize - 1, w);
                            let idx = out.index(xx, yy, c);
                            out.data_mut()[idx] += kv * s;
                        }
                    }
                }
            }
        }
    }
}

/// L1 distance between Sobel gradient maps of `enh` and `orig`, x plus y.
pub fn spatial_loss(enh: &ImageBuffer, orig: &ImageBuffer, reduction: Reduction) -> Result<(f64, ImageBuffer)> {
    enh.ensure_same_shape(orig)?;
    let diff = ImageBuffer::from_vec(
        enh.width(),
        enh.height(),
        enh.channels(),
        enh.data().iter().zip(orig.data()).map(|(a, b)| a - b).collect(),
    )?;
    let scale = reduction.scale(diff.data().len());
    let mut grad = ImageBuffer::zeros(enh.width(), enh.height(), enh.channels());
    let mut loss = 0.0;
    for vertical in [false, true] {
        let d = sobel(&diff, vertical);
        loss += d.data().iter().map(|v| v.abs()).sum::<f64>() * scale;
        let sign = d.map(|v| v.signum() * (v != 0.0) as u8 as f64 * scale);
        sobel_adjoint(&sign, vertical, &mut grad);
    }
    Ok((loss, grad))
}

/// Regularization of a per-pixel softmaxed weight map.
#[derive(Clone, Debug)]
pub struct WeightRegularization {
    pub tv: f64,
    pub ent: f64,
    pub grad_tv: ImageBuffer,
    pub grad_ent: ImageBuffer,
}

/// Total variation (forward differences, x plus y) and per-pixel entropy of
/// a `H' × W' × K` weight map.
pub fn weight_regularization(map: &ImageBuffer, reduction: Reduction) -> WeightRegularization {
    let (w, h, k) = (map.width(), map.height(), map.channels());
    let mut grad_tv = ImageBuffer::zeros(w, h, k);
    let mut tv = 0.0;
    let sx = reduction.scale(h * w.saturating_sub(1) * k);
    let sy = reduction.scale(h.saturating_sub(1) * w * k);
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let v = map.get(x, y, c);
                if x + 1 < w {
                    let d = map.get(x + 1, y, c) - v;
                    tv += d.abs() * sx;
                    let s = d.signum() * (d != 0.0) as u8 as f64 * sx;
                    let i0 = grad_tv.index(x, y, c);
                    let i1 = grad_tv.index(x + 1, y, c);
                    grad_tv.data_mut()[i0] -= s;
                    grad_tv.data_mut()[i1] += s;
                }
                if y + 1 < h {
                    let d = map.get(x, y + 1, c) - v;
                    tv += d.abs() * sy;
                    let s = d.signum() * (d != 0.0) as u8 as f64 * sy;
                    let i0 = grad_tv.index(x, y, c);
                    let i1 = grad_tv.index(x, y + 1, c);
                    grad_tv.data_mut()[i0] -= s;
                    grad_tv.data_mut()[i1] += s;
                }
            }
        }
    }
    let se = reduction.scale(w * h);
    let ent: f64 = map.data().iter().map(|&p| -p * (p + ENTROPY_EPS).ln()).sum::<f64>() * se;
    let grad_ent = map.map(|p| -((p + ENTROPY_EPS).ln() + p / (p + ENTROPY_EPS)) * se);
    WeightRegularization { tv, ent, grad_tv, grad_ent }
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct TotalGrads {
    pub image: ImageBuffer,
    pub map: ImageBuffer,
}

/// Weighted sum of all terms. `orig` is the reference (un-enhanced) render.
pub fn total_loss(
    enh: &ImageBuffer,
    orig: &ImageBuffer,
    map: &ImageBuffer,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, TotalGrads)> {
    require_rgb(enh)?;
    enh.ensure_same_shape(orig)?;
    let l = cfg.lambdas;
    let (exp, g_exp) = exposure_loss(enh, cfg.exposure_target)?;
    let (hue, g_hue) = hue_loss(enh, orig, cfg.saturation_threshold)?;
    let (spa, g_spa) = spatial_loss(enh, orig, cfg.reduction)?;
    let (col, g_col) = colorfulness_loss(enh)?;
    let (con, g_con) = contrast_loss(enh, orig, cfg.contrast_gamma)?;
    let reg = weight_regularization(map, cfg.reduction);

    let mut image = ImageBuffer::zeros(enh.width(), enh.height(), 3);
    for (i, g) in image.data_mut().iter_mut().enumerate() {
        *g = l[0] * g_exp.data()[i]
            + l[1] * g_hue.data()[i]
            + l[2] * g_spa.data()[i]
            + l[3] * g_col.data()[i]
            + l[4] * g_con.data()[i];
    }
    let mut map_grad = reg.grad_tv;
    for (g, e) in map_grad.data_mut().iter_mut().zip(reg.grad_ent.data()) {
        *g = l[5] * *g + l[6] * e;
    }
    let mut breakdown = LossBreakdown { total: 0.0, exp, hue, spa, col, con, tv: reg.tv, ent: reg.ent, lambdas: l };
    breakdown.total = breakdown.weighted_sum();
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok((breakdown, TotalGrads { image, map: map_grad }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-6;

    fn gray(w: usize, h: usize, g: f64) -> ImageBuffer {
        ImageBuffer::filled(w, h, &[g, g, g])
    }

    fn textured(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, |x, y, c| {
            0.2 + 0.6 * (0.5 + 0.5 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.4).cos()))
        })
    }

    #[test]
    fn luminance_examples() {
        assert!((luminance(&gray(2, 2, 0.37)).get(1, 1, 0) - 0.37).abs() < 1e-15);
        let red = ImageBuffer::filled(1, 1, &[1.0, 0.0, 0.0]);
        assert_eq!(luminance(&red).get(0, 0, 0), 0.299);
        let a = textured(5, 4);
        let b = a.map(|v| 3.0 * v);
        let (la, lb) = (luminance(&a), luminance(&b));
        assert!(la.data().iter().zip(lb.data()).all(|(x, y)| (3.0 * x - y).abs() < 1e-12));
    }

    #[test]
    fn exposure_examples() {
        assert!(exposure_loss(&gray(4, 4, 0.7), 0.7).unwrap().0.abs() < TOL);
        assert!((exposure_loss(&gray(4, 4, 0.2), 0.7).unwrap().0 - 0.25).abs() < TOL);
    }

    #[test]
    fn hs_examples() {
        let (h, s) = rgb_to_hs(&ImageBuffer::filled(1, 1, &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!((h.get(0, 0, 0), s.get(0, 0, 0)), (0.0, 1.0));
        let (h, s) = rgb_to_hs(&ImageBuffer::filled(1, 1, &[0.0, 1.0, 1.0])).unwrap();
        assert!((h.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(s.get(0, 0, 0), 1.0);
        let (h, s) = rgb_to_hs(&gray(1, 1, 0.4)).unwrap();
        assert_eq!((h.get(0, 0, 0), s.get(0, 0, 0)), (0.0, 0.0));
        let (_, s) = rgb_to_hs(&gray(1, 1, 0.0)).unwrap();
        assert_eq!(s.get(0, 0, 0), 0.0);
    }

    #[test]
    fn hue_examples() {
        let a = textured(6, 5);
        assert_eq!(hue_loss(&a, &a, 0.1).unwrap().0, 0.0);
        assert_eq!(hue_loss(&a, &gray(6, 5, 0.5), 0.1).unwrap().0, 0.0);
        let red = ImageBuffer::filled(4, 4, &[1.0, 0.0, 0.0]);
        let cyan = ImageBuffer::filled(4, 4, &[0.0, 1.0, 1.0]);
        assert!((hue_loss(&cyan, &red, 0.1).unwrap().0 - 0.5).abs() < TOL);
    }

    #[test]
    fn hue_wraps_around_red() {
        // Hues 0.95 and 0.05 are 0.1 apart on the circle.
        let a = ImageBuffer::filled(1, 1, &[1.0, 0.0, 0.3]);
        let b = ImageBuffer::filled(1, 1, &[1.0, 0.3, 0.0]);
        let (ha, _) = hue_with_grad([1.0, 0.0, 0.3]);
        let (hb, _) = hue_with_grad([1.0, 0.3, 0.0]);
        let expect = 1.0 - (ha - hb).abs();
        assert!((hue_loss(&a, &b, 0.1).unwrap().0 - expect).abs() < TOL);
        assert!(expect < 0.2);
    }

    #[test]
    fn colorfulness_examples() {
        assert!((colorfulness_loss(&gray(4, 4, 0.3)).unwrap().0 + 1e-4).abs() < TOL);
        let img = ImageBuffer::from_fn(4, 4, 3, |x, _, c| match (x < 2, c) {
            (true, 0) | (false, 1) => 1.0,
            _ => 0.0,
        });
        assert!((colorfulness_loss(&img).unwrap().0 + 1.0).abs() < TOL);
    }

    #[test]
    fn contrast_examples() {
        let orig = ImageBuffer::from_fn(4, 4, 3, |x, _, _| if x < 2 { 0.4 } else { 0.6 });
        let enh = ImageBuffer::from_fn(4, 4, 3, |x, _, _| if x < 2 { 0.3 } else { 0.7 });
        assert_eq!(contrast_loss(&enh, &orig, 1.05).unwrap().0, 0.0);
        assert_eq!(contrast_loss(&orig, &orig, 1.0).unwrap().0, 0.0);
        // σ_orig = 1 (values 0 and 2), σ_enh = 0.
        let orig = ImageBuffer::from_fn(4, 4, 3, |x, _, _| if x < 2 { 0.0 } else { 2.0 });
        let (v, g) = contrast_loss(&gray(4, 4, 0.5), &orig, 1.05).unwrap();
        assert!((v - 1.05).abs() < TOL);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_examples() {
        let a = textured(9, 7);
        assert_eq!(spatial_loss(&a, &a, Reduction::Mean).unwrap().0, 0.0);
        let shifted = a.map(|v| v + 0.25);
        assert!(spatial_loss(&shifted, &a, Reduction::Mean).unwrap().0.abs() < 1e-12);
        let mean_grad: f64 = [false, true]
            .iter()
            .map(|&v| sobel(&a, v).data().iter().map(|x| x.abs()).sum::<f64>() / a.data().len() as f64)
            .sum();
        for alpha in [0.5, 1.7] {
            let scaled = a.map(|v| alpha * v);
            let loss = spatial_loss(&scaled, &a, Reduction::Mean).unwrap().0;
            assert!((loss - (alpha - 1.0f64).abs() * mean_grad).abs() < TOL);
        }
    }

    #[test]
    fn sobel_adjoint_is_transpose() {
        let x = textured(7, 6);
        let g = ImageBuffer::from_fn(7, 6, 3, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 - 3.0);
        for vertical in [false, true] {
            let lhs: f64 = sobel(&x, vertical).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let mut at = ImageBuffer::zeros(7, 6, 3);
            sobel_adjoint(&g, vertical, &mut at);
            let rhs: f64 = x.data().iter().zip(at.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(2, 2), 0);
    }

    #[test]
    fn regularization_examples() {
        let one_hot = ImageBuffer::from_fn(5, 4, 16, |_, _, c| if c == 3 { 1.0 } else { 0.0 });
        let r = weight_regularization(&one_hot, Reduction::Mean);
        assert_eq!(r.tv, 0.0);
        assert!(r.ent.abs() < TOL);
        let uniform = ImageBuffer::filled(5, 4, &[1.0 / 16.0; 16]);
        let r = weight_regularization(&uniform, Reduction::Mean);
        assert_eq!(r.tv, 0.0);
        assert!((r.ent - 16f64.ln()).abs() < TOL);
        let checker = ImageBuffer::from_fn(4, 4, 2, |x, y, c| if (x + y + c) % 2 == 0 { 1.0 } else { 0.0 });
        assert!(weight_regularization(&checker, Reduction::Mean).tv > 0.0);
    }

    #[test]
    fn sum_reduction_scales_by_count() {
        let a = textured(6, 6);
        let b = a.map(|v| v * 0.5);
        let mean = spatial_loss(&b, &a, Reduction::Mean).unwrap().0;
        let sum = spatial_loss(&b, &a, Reduction::Sum).unwrap().0;
        assert!((sum - mean * 108.0).abs() < 1e-9);
        let uniform = ImageBuffer::filled(3, 2, &[0.25; 4]);
        let r = weight_regularization(&uniform, Reduction::Sum);
        assert!((r.ent - 6.0 * 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn total_examples() {
        let img = textured(8, 8);
        let one_hot = ImageBuffer::from_fn(2, 2, 4, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        let cfg = LossConfig::default();
        let (b, _) = total_loss(&img, &img, &one_hot, &cfg).unwrap();
        assert_eq!((b.hue, b.spa, b.tv), (0.0, 0.0, 0.0));
        assert!(b.ent.abs() < TOL);
        // With γ > 1 the contrast hinge stays active at identity: (γ − 1)·σ.
        let (_, sigma) = mean_std(luminance(&img).data());
        assert!((b.con - (cfg.contrast_gamma - 1.0) * sigma).abs() < 1e-12);
        let expect = cfg.lambdas[0] * b.exp + cfg.lambdas[3] * b.col + cfg.lambdas[4] * b.con + cfg.lambdas[6] * b.ent;
        assert!((b.total - expect).abs() < 1e-9);
        assert!((b.total - b.weighted_sum()).abs() < 1e-9);

        let zero = LossConfig { lambdas: [0.0; 7], ..cfg };
        let (b, g) = total_loss(&img, &img.map(|v| v * 0.3), &one_hot, &zero).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.image.data().iter().chain(g.map.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_images_are_resolution_invariant() {
        let cfg = LossConfig::default();
        let small =
            total_loss(&gray(8, 8, 0.3), &gray(8, 8, 0.1), &ImageBuffer::filled(1, 1, &[0.25; 4]), &cfg).unwrap().0;
        let large =
            total_loss(&gray(32, 24, 0.3), &gray(32, 24, 0.1), &ImageBuffer::filled(4, 3, &[0.25; 4]), &cfg).unwrap().0;
        assert!((small.total - large.total).abs() < 1e-9);
    }

    #[test]
    fn csv_row_has_all_terms() {
        let b = LossBreakdown { total: 1.0, exp: 2.0, ent: 8.0, ..Default::default() };
        assert_eq!(b.csv_row(3), "3,1,2,0,0,0,0,0,8");
        assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), 9);
    }
}
