//! Deterministic procedural test images.

use crate::image::ImageBuffer;

fn hash(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash(ix, iy, seed);
    let b = hash(ix + 1, iy, seed);
    let c = hash(ix, iy + 1, seed);
    let d = hash(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

/// Fractal value noise in `[0, 1)`.
pub fn fbm(x: f64, y: f64, octaves: u32, seed: u64) -> f64 {
    let (mut amp, mut freq, mut sum, mut norm) = (0.5, 1.0, 0.0, 0.0);
    for o in 0..octaves {
        sum += amp * value_noise(x * freq, y * freq, seed.wrapping_add(o as u64));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// A landscape-like scene: graded sky, sun, two ridgelines, a lake with a
/// reflection, foliage texture and a red-roofed house. Values lie in [0, 1].
pub fn natural_scene(width: usize, height: usize) -> ImageBuffer {
    let (w, h) = (width as f64, height as f64);
    ImageBuffer::from_fn(width, height, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / w;
        let v = (y as f64 + 0.5) / h;
        let mut rgb = [0.35 + 0.3 * v, 0.55 + 0.2 * v, 0.9 - 0.15 * v];

        let clouds = fbm(u * 6.0, v * 12.0, 4, 11);
        if clouds > 0.55 {
            let k = ((clouds - 0.55) * 4.0).min(1.0);
            rgb = rgb.map(|t| t * (1.0 - k) + 0.95 * k);
        }
        let sun = ((u - 0.75).powi(2) + (v - 0.18).powi(2)).sqrt();
        if sun < 0.07 {
            rgb = [1.0, 0.92, 0.6];
        } else if sun < 0.12 {
            let k = (0.12 - sun) / 0.05;
            rgb = [rgb[0] + 0.4 * k, rgb[1] + 0.3 * k, rgb[2]];
        }

        let far = 0.45 + 0.08 * (u * 9.0).sin() + 0.1 * fbm(u * 5.0, 0.0, 3, 3);
        if v > far {
            let t = fbm(u * 20.0, v * 20.0, 3, 5);
            rgb = [0.35 + 0.1 * t, 0.4 + 0.1 * t, 0.55 + 0.1 * t];
        }
        let near = 0.6 + 0.06 * (u * 5.0 + 1.0).cos() + 0.08 * fbm(u * 8.0, 1.0, 3, 4);
        if v > near {
            let t = fbm(u * 30.0, v * 30.0, 4, 7);
            rgb = [0.15 + 0.2 * t, 0.35 + 0.3 * t, 0.1 + 0.1 * t];
        }

        if v > 0.8 && u < 0.55 {
            let ripple = 0.05 * (v * 90.0 + 3.0 * fbm(u * 10.0, v * 10.0, 2, 9)).sin();
            rgb = [0.2 + ripple, 0.35 + ripple, 0.55 + ripple];
        }

        let (hx, hy) = (0.62, 0.7);
        if (hx..hx + 0.16).contains(&u) && (hy..hy + 0.12).contains(&v) {
            rgb = if ((u - hx) * 40.0) as i32 % 3 == 0 && v > hy + 0.04 { [0.3, 0.2, 0.1] } else { [0.85, 0.8, 0.65] };
        }
        let roof = hy - (0.08 - (u - (hx + 0.08)).abs());
        if (hx - 0.02..hx + 0.18).contains(&u) && v >= roof && v < hy {
            rgb = [0.7, 0.12, 0.1];
        }
        rgb[c].clamp(0.0, 1.0)
    })
}

/// Scales every sample by `factor`.
pub fn darken(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    img.map(|v| v * factor)
}
