//! Tile-based front-to-back α-blending of 2D Gaussians, a brute-force
//! reference renderer, and the analytic backward pass.
//!
//! Blending order is ascending primitive index. Each pixel is owned by
//! exactly one tile, and per-tile gradient partials are merged in tile
//! order, so results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{conic_of, covariance, sigmoid, Conic, GaussianSet};
use crate::image::ImageBuffer;

/// Contributions with α below this are skipped.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// A pixel stops blending once its transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEFAULT_TILE_PX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterOptions {
    pub tile_px: usize,
    pub alpha_cutoff: f64,
    pub min_transmittance: f64,
    /// Restrict each primitive to the tiles its bounding box touches.
    pub cull: bool,
}

impl RasterOptions {
    /// Cutoffs, early termination and culling enabled.
    pub fn production(tile_px: usize) -> Self {
        Self { tile_px, alpha_cutoff: ALPHA_CUTOFF, min_transmittance: MIN_TRANSMITTANCE, cull: true }
    }

    /// Every primitive blended at every pixel; matches [`render_reference`]
    /// up to floating-point reassociation.
    pub fn exact(tile_px: usize) -> Self {
        Self { tile_px, alpha_cutoff: 0.0, min_transmittance: 0.0, cull: false }
    }
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self::production(DEFAULT_TILE_PX)
    }
}

/// Per-tile primitive lists in compressed-row form. Lists are ascending by
/// primitive index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileIndex {
    pub tile_px: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl TileIndex {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile(&self, t: usize) -> &[u32] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn tile_at(&self, tx: usize, ty: usize) -> &[u32] {
        self.tile(ty * self.tiles_x + tx)
    }

    /// Total number of (tile, primitive) pairs.
    pub fn entries(&self) -> usize {
        self.indices.len()
    }
}

/// Culling radius for a primitive: the distance along its widest axis at
/// which α drops below the cutoff. With no cutoff the radius is unbounded.
fn bounding_radius(sx: f64, sy: f64, opacity: f64, alpha_cutoff: f64) -> Option<f64> {
    if alpha_cutoff <= 0.0 {
        return None;
    }
    if opacity <= alpha_cutoff {
        return Some(-1.0);
    }
    Some(sx.max(sy) * (2.0 * (opacity / alpha_cutoff).ln()).sqrt())
}

/// Axis-aligned inclusive tile range for a primitive, or `None` if it
/// touches no tile.
fn tile_range(
    center: [f64; 2],
    radius: f64,
    tile_px: usize,
    tiles_x: usize,
    tiles_y: usize,
) -> Option<(usize, usize, usize, usize)> {
    if radius < 0.0 {
        return None;
    }
    let tp = tile_px as f64;
    // Pixel centers sit at integer + 0.5.
    let lo_x = ((center[0] - radius - 0.5) / tp).floor();
    let hi_x = ((center[0] + radius - 0.5) / tp).floor();
    let lo_y = ((center[1] - radius - 0.5) / tp).floor();
    let hi_y = ((center[1] + radius - 0.5) / tp).floor();
    if hi_x < 0.0 || hi_y < 0.0 || lo_x >= tiles_x as f64 || lo_y >= tiles_y as f64 {
        return None;
    }
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
    Some((clamp(lo_x, tiles_x), clamp(hi_x, tiles_x), clamp(lo_y, tiles_y), clamp(hi_y, tiles_y)))
}

pub fn build_tiles(set: &GaussianSet, opts: &RasterOptions) -> Result<TileIndex> {
    if opts.tile_px == 0 {
        return Err(Error::InvalidArgument("tile size must be at least 1 pixel".into()));
    }
    let tp = opts.tile_px;
    let tiles_x = (set.width as usize).div_ceil(tp);
    let tiles_y = (set.height as usize).div_ceil(tp);
    let n_tiles = tiles_x * tiles_y;
    let n = set.len();

    if !opts.cull {
        let mut offsets = Vec::with_capacity(n_tiles + 1);
        let mut indices = Vec::with_capacity(n_tiles * n);
        offsets.push(0);
        for _ in 0..n_tiles {
            indices.extend(0..n as u32);
            offsets.push(indices.len());
        }
        return Ok(TileIndex { tile_px: tp, tiles_x, tiles_y, offsets, indices });
    }

    let ranges: Vec<_> = (0..n)
        .map(|i| {
            let act = set.activated(i);
            let r = bounding_radius(act.sx, act.sy, act.opacity, opts.alpha_cutoff).unwrap_or(f64::INFINITY);
            if n_tiles == 0 {
                None
            } else {
                tile_range(set.mu[i], r, tp, tiles_x, tiles_y)
            }
        })
        .collect();

    let mut counts = vec![0usize; n_tiles];
    for (x0, x1, y0, y1) in ranges.iter().flatten().copied() {
        for ty in y0..=y1 {
            for c in &mut counts[ty * tiles_x + x0..=ty * tiles_x + x1] {
                *c += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(n_tiles + 1);
    offsets.push(0);
    for c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut cursor = offsets[..n_tiles].to_vec();
    let mut indices = vec![0u32; *offsets.last().unwrap()];
    for (i, range) in ranges.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = *range {
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    let t = ty * tiles_x + tx;
                    indices[cursor[t]] = i as u32;
                    cursor[t] += 1;
                }
            }
        }
    }
    Ok(TileIndex { tile_px: tp, tiles_x, tiles_y, offsets, indices })
}

#[derive(Clone, Copy, Debug)]
struct Prepared {
    mx: f64,
    my: f64,
    conic: Conic,
    opacity: f64,
    color: [f64; 3],
    /// `ln(cutoff / opacity)`: exponents below this give α under the cutoff.
    log_cut: f64,
    /// Culling radius; pixels farther along either axis are skipped.
    radius: f64,
}

fn prepare(set: &GaussianSet, opts: &RasterOptions) -> Vec<Prepared> {
    (0..set.len())
        .map(|i| {
            let act = set.activated(i);
            let (log_cut, radius) = if opts.alpha_cutoff > 0.0 {
                let r = bounding_radius(act.sx, act.sy, act.opacity, opts.alpha_cutoff).unwrap_or(f64::INFINITY);
                ((opts.alpha_cutoff / act.opacity).ln(), r)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            Prepared {
                mx: set.mu[i][0],
                my: set.mu[i][1],
                conic: Conic::from_scale_rotation(act.sx, act.sy, act.theta),
                opacity: act.opacity,
                color: set.color[i],
                log_cut,
                radius,
            }
        })
        .collect()
}

/// Evaluated contribution of one primitive at one pixel.
struct Sample {
    alpha: f64,
    weight: f64,
    dx: f64,
    dy: f64,
}

/// `None` when the contribution falls under the α cutoff.
#[inline(always)]
fn sample(g: &Prepared, px: f64, py: f64, alpha_cutoff: f64) -> Option<Sample> {
    let dx = px - g.mx;
    let dy = py - g.my;
    if dx.abs() > g.radius || dy.abs() > g.radius {
        return None;
    }
    let power = -0.5 * (g.conic.a * dx * dx + 2.0 * g.conic.b * dx * dy + g.conic.c * dy * dy);
    if power < g.log_cut {
        return None;
    }
    let weight = power.exp();
    let alpha = g.opacity * weight;
    if alpha < alpha_cutoff {
        return None;
    }
    Some(Sample { alpha, weight, dx, dy })
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` of one tile.
#[derive(Clone, Copy)]
struct TileRect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl TileRect {
    fn of(tiles: &TileIndex, t: usize, w: usize, h: usize) -> Self {
        let tp = tiles.tile_px;
        let (tx, ty) = (t % tiles.tiles_x, t / tiles.tiles_x);
        TileRect { x0: tx * tp, x1: ((tx + 1) * tp).min(w), y0: ty * tp, y1: ((ty + 1) * tp).min(h) }
    }

    fn width(&self) -> usize {
        self.x1 - self.x0
    }

    fn len(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Inclusive pixel-index span of `[center + lo, center + hi]` (pixel centers
/// at index + 0.5), padded by one pixel and clipped to `[start, end)`.
#[inline]
fn span(center: f64, lo: f64, hi: f64, start: usize, end: usize) -> Option<(usize, usize)> {
    let a = (center + lo - 0.5).ceil() - 1.0;
    let b = (center + hi - 0.5).floor() + 1.0;
    let a = a.max(start as f64);
    let b = b.min(end as f64 - 1.0);
    if a > b {
        None
    } else {
        Some((a as usize, b as usize))
    }
}

/// Walks one tile in blending order, calling `visit(pixel, slot, sample, t)`
/// for every contribution that passes the cutoff, where `pixel` is the
/// tile-local index, `slot` the position in the tile list and `t` the
/// transmittance before blending. Returns the final per-pixel transmittance.
///
/// Each pixel sees primitives in ascending index order, stopping once its
/// transmittance drops below the termination threshold.
fn walk_tile(
    prep: &[Prepared],
    list: &[u32],
    rect: TileRect,
    opts: &RasterOptions,
    trans: &mut Vec<f64>,
    mut visit: impl FnMut(usize, usize, &Sample, f64),
) {
    let tw = rect.width();
    trans.clear();
    trans.resize(rect.len(), 1.0);
    for (slot, &i) in list.iter().enumerate() {
        let g = &prep[i as usize];
        // α ≥ cutoff inside the ellipse Δᵀ Q Δ ≤ k.
        let k = -2.0 * g.log_cut;
        let det = g.conic.a * g.conic.c - g.conic.b * g.conic.b;
        let rows = if k.is_finite() {
            let ext = (k * g.conic.a / det).sqrt();
            span(g.my, -ext, ext, rect.y0, rect.y1)
        } else {
            Some((rect.y0, rect.y1 - 1))
        };
        let Some((ya, yb)) = rows else { continue };
        for y in ya..=yb {
            let py = y as f64 + 0.5;
            let cols = if k.is_finite() {
                let dy = py - g.my;
                let bdy = g.conic.b * dy;
                let disc = bdy * bdy - g.conic.a * (g.conic.c * dy * dy - k);
                if disc < 0.0 {
                    continue;
                }
                let root = disc.sqrt();
                span(g.mx, (-bdy - root) / g.conic.a, (-bdy + root) / g.conic.a, rect.x0, rect.x1)
            } else {
                Some((rect.x0, rect.x1 - 1))
            };
            let Some((xa, xb)) = cols else { continue };
            let row = (y - rect.y0) * tw;
            for x in xa..=xb {
                let p = row + x - rect.x0;
                let t = trans[p];
                if t < opts.min_transmittance {
                    continue;
                }
                let Some(smp) = sample(g, x as f64 + 0.5, py, opts.alpha_cutoff) else {
                    continue;
                };
                visit(p, slot, &smp, t);
                trans[p] = t * (1.0 - smp.alpha);
            }
        }
    }
}

/// Forward render through the tile index.
pub fn render(set: &GaussianSet, opts: &RasterOptions) -> Result<ImageBuffer> {
    let tiles = build_tiles(set, opts)?;
    Ok(render_tiles(set, &tiles, opts))
}

pub fn render_tiles(set: &GaussianSet, tiles: &TileIndex, opts: &RasterOptions) -> ImageBuffer {
    let (w, h) = (set.width as usize, set.height as usize);
    let mut img = ImageBuffer::zeros(w, h, 3);
    if w == 0 || h == 0 {
        return img;
    }
    let prep = prepare(set, opts);
    let tp = tiles.tile_px;
    let row_stride = w * 3;
    img.data_mut().par_chunks_mut(tp * row_stride).enumerate().for_each(|(ty, band)| {
        let mut trans = Vec::new();
        let mut acc: Vec<[f64; 3]> = Vec::new();
        for tx in 0..tiles.tiles_x {
            let t = ty * tiles.tiles_x + tx;
            let rect = TileRect::of(tiles, t, w, h);
            acc.clear();
            acc.resize(rect.len(), [0.0; 3]);
            walk_tile(&prep, tiles.tile(t), rect, opts, &mut trans, |p, slot, smp, tr| {
                let c = prep[tiles.tile(t)[slot] as usize].color;
                let wgt = smp.alpha * tr;
                let a = &mut acc[p];
                a[0] += c[0] * wgt;
                a[1] += c[1] * wgt;
                a[2] += c[2] * wgt;
            });
            let tw = rect.width();
            for (p, a) in acc.iter().enumerate() {
                let (lx, ly) = (p % tw, p / tw);
                let o = ly * row_stride + (rect.x0 + lx) * 3;
                band[o..o + 3].copy_from_slice(a);
            }
        }
    });
    img
}

/// Brute-force oracle: every primitive at every pixel in index order, no
/// tiling or cutoffs, conics via explicit matrix inversion.
pub fn render_reference(set: &GaussianSet) -> Result<ImageBuffer> {
    let (w, h) = (set.width as usize, set.height as usize);
    let mut conics = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let act = set.activate(i)?;
        conics.push(conic_of(&covariance(act.sx, act.sy, act.theta)?)?);
    }
    Ok(ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        let p = [x as f64 + 0.5, y as f64 + 0.5];
        let mut t = 1.0;
        let mut out = 0.0;
        for (i, q) in conics.iter().enumerate() {
            let alpha = sigmoid(set.opacity_raw[i]) * crate::gaussian::response(q, set.mu[i], p);
            out += set.color[i][c] * alpha * t;
            t *= 1.0 - alpha;
        }
        out
    }))
}

/// Gradients with respect to the raw parameters of every primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGradients {
    pub d_mu: Vec<[f64; 2]>,
    pub d_scale_raw: Vec<[f64; 2]>,
    pub d_theta: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    pub d_opacity_raw: Vec<f64>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![[0.0; 2]; n],
            d_scale_raw: vec![[0.0; 2]; n],
            d_theta: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            d_opacity_raw: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }

    /// Same block layout as [`GaussianSet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 9);
        out.extend(self.d_mu.iter().flatten());
        out.extend(self.d_scale_raw.iter().flatten());
        out.extend(&self.d_theta);
        out.extend(self.d_color.iter().flatten());
        out.extend(&self.d_opacity_raw);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

// Per-entry partials in intermediate space:
// [d_mx, d_my, d_a, d_b, d_c, d_r, d_g, d_b, d_opacity].
type Partial = [f64; 9];

struct Contribution {
    pixel: u32,
    slot: u32,
    alpha: f64,
    weight: f64,
    t: f64,
    dx: f64,
    dy: f64,
}

/// Backpropagates `grad_image = dL/dC` to the raw parameters.
pub fn backward(
    set: &GaussianSet,
    tiles: &TileIndex,
    grad_image: &ImageBuffer,
    opts: &RasterOptions,
    freeze_geometry: bool,
) -> Result<GaussianGradients> {
    let (w, h) = (set.width as usize, set.height as usize);
    if grad_image.width() != w || grad_image.height() != h || grad_image.channels() != 3 {
        return Err(Error::DimensionMismatch { expected: format!("{w}x{h}x3"), actual: grad_image.shape_string() });
    }
    let n = set.len();
    let prep = prepare(set, opts);

    let partials: Vec<Vec<Partial>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| {
            let list = tiles.tile(t);
            let mut part = vec![[0.0; 9]; list.len()];
            if list.is_empty() {
                return part;
            }
            let rect = TileRect::of(tiles, t, w, h);
            let tw = rect.width();
            let upstream: Vec<[f64; 3]> = (0..rect.len())
                .map(|p| {
                    let g = grad_image.pixel(rect.x0 + p % tw, rect.y0 + p / tw);
                    [g[0], g[1], g[2]]
                })
                .collect();
            // Contributions in blending order; walking them backwards visits
            // each pixel's primitives back to front.
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut trans = Vec::new();
            walk_tile(&prep, list, rect, opts, &mut trans, |p, slot, smp, tr| {
                if upstream[p] != [0.0; 3] {
                    contribs.push(Contribution {
                        pixel: p as u32,
                        slot: slot as u32,
                        alpha: smp.alpha,
                        weight: smp.weight,
                        t: tr,
                        dx: smp.dx,
                        dy: smp.dy,
                    });
                }
            });
            let mut behind = vec![[0.0f64; 3]; rect.len()];
            for c in contribs.iter().rev() {
                let gp = upstream[c.pixel as usize];
                let bh = &mut behind[c.pixel as usize];
                let g = &prep[list[c.slot as usize] as usize];
                let p = &mut part[c.slot as usize];
                let at = c.alpha * c.t;
                p[5] += gp[0] * at;
                p[6] += gp[1] * at;
                p[7] += gp[2] * at;
                let d_alpha =
                    c.t * (gp[0] * (g.color[0] - bh[0]) + gp[1] * (g.color[1] - bh[1]) + gp[2] * (g.color[2] - bh[2]));
                for k in 0..3 {
                    bh[k] = c.alpha * g.color[k] + (1.0 - c.alpha) * bh[k];
                }
                p[8] += d_alpha * c.weight;
                if !freeze_geometry {
                    let d_power = d_alpha * g.opacity * c.weight;
                    let q = &g.conic;
                    p[0] += d_power * (q.a * c.dx + q.b * c.dy);
                    p[1] += d_power * (q.b * c.dx + q.c * c.dy);
                    p[2] += d_power * (-0.5 * c.dx * c.dx);
                    p[3] += d_power * (-c.dx * c.dy);
                    p[4] += d_power * (-0.5 * c.dy * c.dy);
                }
            }
            part
        })
        .collect();

    let mut acc = vec![[0.0f64; 9]; n];
    for (t, part) in partials.iter().enumerate() {
        for (&i, p) in tiles.tile(t).iter().zip(part) {
            let a = &mut acc[i as usize];
            for k in 0..9 {
                a[k] += p[k];
            }
        }
    }

    let mut grads = GaussianGradients::zeros(n);
    for (i, a) in acc.iter().enumerate() {
        let act = set.activated(i);
        grads.d_color[i] = [a[5], a[6], a[7]];
        grads.d_opacity_raw[i] = a[8] * act.opacity * (1.0 - act.opacity);
        if freeze_geometry {
            continue;
        }
        grads.d_mu[i] = [a[0], a[1]];
        let (s, c) = act.theta.sin_cos();
        let (s2, c2) = (2.0 * act.theta).sin_cos();
        let u = 1.0 / (act.sx * act.sx);
        let v = 1.0 / (act.sy * act.sy);
        let (da, db, dc) = (a[2], a[3], a[4]);
        let d_u = da * c * c + db * s * c + dc * s * s;
        let d_v = da * s * s - db * s * c + dc * c * c;
        grads.d_theta[i] = (v - u) * s2 * da + (u - v) * c2 * db + (u - v) * s2 * dc;
        let d_sx = d_u * (-2.0 / (act.sx * act.sx * act.sx));
        let d_sy = d_v * (-2.0 / (act.sy * act.sy * act.sy));
        let [rx, ry] = set.scale_raw[i];
        grads.d_scale_raw[i] = [d_sx * sigmoid(rx), d_sy * sigmoid(ry)];
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gaussian::logit;

    pub(crate) fn random_set(rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32) -> GaussianSet {
        let mut set = GaussianSet::empty(w, h);
        for _ in 0..n {
            set.push(
                [rng.gen_range(-2.0..w as f64 + 2.0), rng.gen_range(-2.0..h as f64 + 2.0)],
                [rng.gen_range(-1.0..2.5), rng.gen_range(-1.0..2.5)],
                rng.gen_range(-3.2..3.2),
                [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                rng.gen_range(-2.0..3.0),
            );
        }
        set
    }

    #[test]
    fn empty_set_renders_black() {
        let set = GaussianSet::empty(20, 13);
        let tiles = build_tiles(&set, &RasterOptions::default()).unwrap();
        assert_eq!(tiles.entries(), 0);
        assert!(render(&set, &RasterOptions::default()).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(render_reference(&set).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_tile_size_is_rejected() {
        let set = GaussianSet::empty(4, 4);
        let opts = RasterOptions { tile_px: 0, ..Default::default() };
        assert!(matches!(build_tiles(&set, &opts), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn small_gaussian_stays_in_its_tile() {
        let mut set = GaussianSet::empty(64, 64);
        // sx = sy = 0.3 + softplus(-3) ≈ 0.349; radius ≈ 1.2 px.
        set.push([24.0, 40.0], [-3.0, -3.0], 0.0, [1.0; 3], logit(0.9));
        let tiles = build_tiles(&set, &RasterOptions::production(16)).unwrap();
        for t in 0..tiles.tile_count() {
            let expect: &[u32] = if t == 2 * 4 + 1 { &[0] } else { &[] };
            assert_eq!(tiles.tile(t), expect, "tile {t}");
        }
    }

    #[test]
    fn straddling_gaussian_hits_both_tiles() {
        let mut set = GaussianSet::empty(32, 16);
        set.push([16.0, 8.0], [0.0, 0.0], 0.0, [1.0; 3], logit(0.9));
        let tiles = build_tiles(&set, &RasterOptions::production(16)).unwrap();
        assert_eq!(tiles.tile_at(0, 0), &[0]);
        assert_eq!(tiles.tile_at(1, 0), &[0]);
    }

    #[test]
    fn tile_lists_are_sorted_and_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 200, 70, 45);
        let tiles = build_tiles(&set, &RasterOptions::production(16)).unwrap();
        for t in 0..tiles.tile_count() {
            assert!(tiles.tile(t).windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn every_visible_contribution_is_binned() {
        // Any pixel where α ≥ cutoff must find the primitive in its tile.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 60, 50, 37);
        let opts = RasterOptions::production(8);
        let tiles = build_tiles(&set, &opts).unwrap();
        for i in 0..set.len() {
            let act = set.activated(i);
            let q = Conic::from_scale_rotation(act.sx, act.sy, act.theta);
            for y in 0..37 {
                for x in 0..50 {
                    let r = crate::gaussian::response(&q, set.mu[i], [x as f64 + 0.5, y as f64 + 0.5]);
                    if act.opacity * r >= ALPHA_CUTOFF {
                        assert!(tiles.tile_at(x / 8, y / 8).contains(&(i as u32)));
                    }
                }
            }
        }
    }

    #[test]
    fn single_primitive_at_center() {
        let mut set = GaussianSet::empty(16, 16);
        set.push([8.5, 8.5], [0.5, 0.5], 0.0, [1.0, 0.0, 0.0], logit(0.999));
        let img = render(&set, &RasterOptions::default()).unwrap();
        let o = sigmoid(set.opacity_raw[0]);
        assert!((img.get(8, 8, 0) - o).abs() < 1e-12);
        assert_eq!(img.get(8, 8, 1), 0.0);
        assert_eq!(img.get(8, 8, 2), 0.0);
    }

    #[test]
    fn reference_matches_closed_form_single_primitive() {
        let mut set = GaussianSet::empty(9, 7);
        set.push([4.5, 3.5], [1.0, 0.2], 0.6, [0.2, 0.5, 0.9], 1.5);
        let img = render_reference(&set).unwrap();
        let act = set.activated(0);
        let sigma = covariance(act.sx, act.sy, act.theta).unwrap();
        let det = sigma.det();
        for y in 0..7 {
            for x in 0..9 {
                let dx = x as f64 + 0.5 - 4.5;
                let dy = y as f64 + 0.5 - 3.5;
                // Δᵀ Σ⁻¹ Δ through the adjugate.
                let m = (sigma.yy * dx * dx - 2.0 * sigma.xy * dx * dy + sigma.xx * dy * dy) / det;
                let alpha = act.opacity * (-0.5 * m).exp();
                for c in 0..3 {
                    assert!((img.get(x, y, c) - set.color[0][c] * alpha).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn reference_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = random_set(&mut rng, 10, 24, 24);
        for s in &mut set.scale_raw {
            *s = [s[0].min(0.5), s[1].min(0.5)];
        }
        let base = render_reference(&set).unwrap();
        let mut shifted = set.clone();
        for m in &mut shifted.mu {
            m[0] += 3.0;
            m[1] += 2.0;
        }
        let moved = render_reference(&shifted).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                for c in 0..3 {
                    assert!((base.get(x, y, c) - moved.get(x + 3, y + 2, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiled_exact_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.gen_range(0..50);
            let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
            let set = random_set(&mut rng, n, w, h);
            let a = render(&set, &RasterOptions::exact(16)).unwrap();
            let b = render_reference(&set).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5);
        }
    }

    /// Per-pixel blending over every primitive with the production α cutoff
    /// and early termination, without tiles or culling.
    fn reference_with_cutoffs(set: &GaussianSet) -> ImageBuffer {
        let (w, h) = (set.width as usize, set.height as usize);
        let mut out = ImageBuffer::zeros(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let mut t = 1.0;
                for i in 0..set.len() {
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                    let act = set.activated(i);
                    let conic = conic_of(&covariance(act.sx, act.sy, act.theta).unwrap()).unwrap();
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    let alpha = act.opacity * crate::gaussian::response(&conic, set.mu[i], p);
                    if alpha < ALPHA_CUTOFF {
                        continue;
                    }
                    for c in 0..3 {
                        let idx = out.index(x, y, c);
                        out.data_mut()[idx] += set.color[i][c] * alpha * t;
                    }
                    t *= 1.0 - alpha;
                }
            }
        }
        out
    }

    #[test]
    fn production_culling_matches_brute_force_cutoffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut culled, mut cutoff): (f64, f64) = (0.0, 0.0);
        for _ in 0..100 {
            let n = rng.gen_range(0..=50);
            let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
            let set = random_set(&mut rng, n, w, h);
            let a = render(&set, &RasterOptions::production(16)).unwrap();
            culled = culled.max(a.max_abs_diff(&reference_with_cutoffs(&set)));
            cutoff = cutoff.max(a.max_abs_diff(&render_reference(&set).unwrap()));
        }
        assert!(culled <= 1e-12, "culling changed the render by {culled}");
        println!("production vs cutoff-free reference: max-abs {cutoff:.3e}");
    }

    #[test]
    fn one_adam_step_along_the_gradient_decreases_l2_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = RasterOptions::default();
        for _ in 0..20 {
            let mut set = random_set(&mut rng, 15, 24, 20);
            let target = ImageBuffer::from_fn(24, 20, 3, |_, _, _| rng.gen_range(0.0..1.0));
            let l2 = |set: &GaussianSet| -> (f64, ImageBuffer) {
                let img = render(set, &opts).unwrap();
                let diff: Vec<f64> = img.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
                let loss = diff.iter().map(|d| d * d).sum();
                (loss, ImageBuffer::from_vec(24, 20, 3, diff.iter().map(|d| 2.0 * d).collect()).unwrap())
            };
            let (before, grad) = l2(&set);
            let tiles = build_tiles(&set, &opts).unwrap();
            let g = backward(&set, &tiles, &grad, &opts, false).unwrap().to_flat();
            let mut params = set.to_flat();
            let mut adam = crate::fit::AdamState::new(params.len());
            crate::fit::adam_step(&mut params, &g, &mut adam, 1e-5).unwrap();
            set.assign_flat(&params).unwrap();
            assert!(l2(&set).0 < before);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 12, 20, 20);
        let opts = RasterOptions::default();
        let tiles = build_tiles(&set, &opts).unwrap();
        let g = backward(&set, &tiles, &ImageBuffer::zeros(20, 20, 3), &opts, false).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_primitive_color_gradient() {
        let mut set = GaussianSet::empty(12, 12);
        set.push([5.0, 6.0], [1.0, 0.5], 0.3, [0.4, 0.4, 0.4], 0.7);
        let opts = RasterOptions::exact(16);
        let tiles = build_tiles(&set, &opts).unwrap();
        let grad = ImageBuffer::from_fn(12, 12, 3, |x, y, c| if c == 0 { (x + 2 * y) as f64 * 0.01 } else { 0.0 });
        let g = backward(&set, &tiles, &grad, &opts, false).unwrap();
        let alpha = render_reference(&{
            let mut s = set.clone();
            s.color[0] = [1.0, 0.0, 0.0];
            s
        })
        .unwrap();
        let expect: f64 = (0..12)
            .flat_map(|y| (0..12).map(move |x| (x, y)))
            .map(|(x, y)| grad.get(x, y, 0) * alpha.get(x, y, 0))
            .sum();
        assert!((g.d_color[0][0] - expect).abs() < 1e-12);
        assert_eq!(g.d_color[0][1], 0.0);
        assert_eq!(g.d_color[0][2], 0.0);
    }

    #[test]
    fn frozen_geometry_zeroes_geometry_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 15, 20, 20);
        let opts = RasterOptions::default();
        let tiles = build_tiles(&set, &opts).unwrap();
        let grad = ImageBuffer::from_fn(20, 20, 3, |x, y, c| ((x * 7 + y * 3 + c) % 5) as f64 - 2.0);
        let g = backward(&set, &tiles, &grad, &opts, true).unwrap();
        assert!(g.d_mu.iter().flatten().all(|&v| v == 0.0));
        assert!(g.d_scale_raw.iter().flatten().all(|&v| v == 0.0));
        assert!(g.d_theta.iter().all(|&v| v == 0.0));
        assert!(g.d_color.iter().flatten().any(|&v| v != 0.0));
        let free = backward(&set, &tiles, &grad, &opts, false).unwrap();
        assert_eq!(free.d_color, g.d_color);
        assert_eq!(free.d_opacity_raw, g.d_opacity_raw);
    }

    #[test]
    fn mismatched_gradient_image_is_rejected() {
        let set = GaussianSet::empty(8, 8);
        let opts = RasterOptions::default();
        let tiles = build_tiles(&set, &opts).unwrap();
        let err = backward(&set, &tiles, &ImageBuffer::zeros(8, 7, 3), &opts, false);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn render_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let set = random_set(&mut rng, 300, 64, 48);
        let opts = RasterOptions::default();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let img = render(&set, &opts).unwrap();
                let tiles = build_tiles(&set, &opts).unwrap();
                let g = backward(&set, &tiles, &img, &opts, false).unwrap();
                (img, g)
            })
        };
        let (i1, g1) = run(1);
        let (i4, g4) = run(4);
        assert_eq!(i1, i4);
        assert_eq!(g1, g4);
    }
}
