//! Persistence: `.gs2d` Gaussian sets, 8-bit PNG images, enhancer tensor
//! containers and plain-text run configurations.
//!
//! All binary integers and floats are little-endian.

use std::fmt::Write as _;
use std::path::Path;

use crate::enhance::{EncoderParams, EnhanceConfig, EnhancerParams, Tensor, TensorView};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::gaussian::{GaussianSet, PARAMS_PER_GAUSSIAN};
use crate::image::ImageBuffer;
use crate::losses::Reduction;

pub const GS2D_MAGIC: [u8; 4] = *b"GS2D";
pub const GS2D_VERSION: u32 = 1;
pub const GS2D_HEADER_LEN: usize = 24;
/// Flags bit 0: raw parameters use the v1 activation convention.
pub const FLAG_ACTIVATION_V1: u32 = 1;
const RECORD_LEN: usize = PARAMS_PER_GAUSSIAN * 4;

pub const TENSOR_MAGIC: [u8; 4] = *b"GSTN";
pub const TENSOR_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

/// Little-endian cursor that reports running out of bytes as corruption.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!(
                "truncated {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], kind: &str) -> Result<()> {
    let n = bytes.len().min(4);
    if bytes[..n] != magic[..n] {
        return Err(Error::Format(format!("not a {kind} file (bad magic)")));
    }
    if n < 4 {
        return Err(Error::Corrupt(format!("truncated {kind} magic")));
    }
    Ok(())
}

fn finite(v: f32, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::Corrupt(format!("non-finite {what}")))
    }
}

// ---------------------------------------------------------------------------
// .gs2d

/// Serializes raw parameters as `f32`. Lossless for sets whose values are
/// already `f32`-representable (see [`GaussianSet::round_to_storage`]).
pub fn encode(set: &GaussianSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(GS2D_HEADER_LEN + n * RECORD_LEN);
    out.extend_from_slice(&GS2D_MAGIC);
    for v in [GS2D_VERSION, set.width, set.height, n as u32, FLAG_ACTIVATION_V1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        let [mx, my] = set.mu[i];
        let [sx, sy] = set.scale_raw[i];
        let [r, g, b] = set.color[i];
        for v in [mx, my, sx, sy, set.theta[i], r, g, b, set.opacity_raw[i]] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<GaussianSet> {
    check_magic(bytes, &GS2D_MAGIC, "gs2d")?;
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32("header")?;
    if version != GS2D_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let width = r.u32("header")?;
    let height = r.u32("header")?;
    let count = r.u32("header")? as usize;
    let flags = r.u32("header")?;
    if flags != FLAG_ACTIVATION_V1 {
        return Err(Error::Format(format!("unsupported flags {flags:#x}")));
    }
    let expected = count as u64 * RECORD_LEN as u64;
    if (r.remaining() as u64) < expected {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes but {count} records need {expected}",
            r.remaining()
        )));
    }
    if r.remaining() as u64 > expected {
        return Err(Error::Corrupt(format!("{} trailing bytes after payload", r.remaining() as u64 - expected)));
    }
    let mut set = GaussianSet::with_capacity(width, height, count);
    for _ in 0..count {
        let mut v = [0.0f64; PARAMS_PER_GAUSSIAN];
        for slot in &mut v {
            *slot = finite(r.f32("record")?, "gaussian parameter")?;
        }
        set.push([v[0], v[1]], [v[2], v[3]], v[4], [v[5], v[6], v[7]], v[8]);
    }
    Ok(set)
}

pub fn save_gs2d(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode(set))?)
}

pub fn load_gs2d(path: impl AsRef<Path>) -> Result<GaussianSet> {
    decode(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Images

/// Loads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) as a 3-channel image
/// in `[0, 1]`. Alpha is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    use image::DynamicImage as D;
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgb8(_) | D::ImageRgba8(_) => img.to_rgb8(),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported pixel format {:?} (8-bit only)",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageBuffer::from_vec(w as usize, h as usize, 3, data)
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Saves a 1- or 3-channel image as an 8-bit PNG.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Image(format!("cannot save a {c}-channel image as PNG"))),
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Tensor containers

/// Serializes named tensors: magic, version, count, then per tensor the
/// name length, name, rank, dims and `f32` data.
pub fn encode_tensors(tensors: &[TensorView<'_>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in *data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    check_magic(bytes, &TENSOR_MAGIC, "tensor container")?;
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32("header")?;
    if version != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("header")? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank} > {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = r.u32("tensor dims")?;
            len = len.saturating_mul(d as u64);
            dims.push(d as usize);
        }
        if len.saturating_mul(4) > r.remaining() as u64 {
            return Err(Error::Corrupt(format!("tensor {name:?} data truncated")));
        }
        let data = (0..len).map(|_| finite(r.f32("tensor data")?, "tensor value")).collect::<Result<Vec<f64>>>()?;
        out.push((name, dims, data));
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes after tensors", r.remaining())));
    }
    Ok(out)
}

pub fn encode_enhancer(params: &EnhancerParams) -> Result<Vec<u8>> {
    if params.operators.is_empty() {
        return Err(Error::InvalidArgument("enhancer needs at least one operator (K ≥ 2)".into()));
    }
    Ok(encode_tensors(&params.tensors()))
}

pub fn decode_enhancer(bytes: &[u8]) -> Result<EnhancerParams> {
    EnhancerParams::from_tensors(decode_tensors(bytes)?)
}

pub fn save_enhancer(params: &EnhancerParams, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_enhancer(params)?)?)
}

pub fn load_enhancer(path: impl AsRef<Path>) -> Result<EnhancerParams> {
    decode_enhancer(&std::fs::read(path)?)
}

/// Loads only the encoder tensors of a container (other tensors ignored).
pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderParams> {
    EncoderParams::from_tensors(decode_tensors(&std::fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Run configuration

/// Every Stage-1 and Stage-2 setting, stored as `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub enhance: EnhanceConfig,
}

const LAMBDA_KEYS: [&str; 7] = [
    "enhance.lambda1",
    "enhance.lambda2",
    "enhance.lambda3",
    "enhance.lambda4",
    "enhance.lambda5",
    "enhance.lambda6",
    "enhance.lambda7",
];

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

impl RunConfig {
    /// All keys with their current values, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let (f, e) = (&self.fit, &self.enhance);
        let mut v: Vec<(String, String)> = vec![
            ("fit.gaussians".into(), f.n_gaussians.to_string()),
            ("fit.iterations".into(), f.iterations.to_string()),
            ("fit.lr".into(), f.lr0.to_string()),
            ("fit.step_decay".into(), f.step_decay.to_string()),
            ("fit.step_every".into(), f.step_every.to_string()),
            ("fit.lambda_ssim".into(), f.lambda_ssim.to_string()),
            ("fit.tile".into(), f.tile_px.to_string()),
            ("fit.seed".into(), f.seed.to_string()),
            ("enhance.iterations".into(), e.iterations.to_string()),
            ("enhance.lr".into(), e.lr0.to_string()),
            ("enhance.lr_floor_fraction".into(), e.lr_floor_fraction.to_string()),
            ("enhance.k".into(), e.k.to_string()),
            ("enhance.hidden".into(), e.hidden.to_string()),
        ];
        for (key, l) in LAMBDA_KEYS.iter().zip(e.loss.lambdas) {
            v.push((key.to_string(), l.to_string()));
        }
        v.extend([
            ("enhance.eh".into(), e.loss.exposure_target.to_string()),
            ("enhance.tau".into(), e.loss.saturation_threshold.to_string()),
            ("enhance.gamma".into(), e.loss.contrast_gamma.to_string()),
            ("enhance.reduction".into(), reduction_name(e.loss.reduction).to_string()),
            ("enhance.seed".into(), e.seed.to_string()),
            ("enhance.tile".into(), e.tile_px.to_string()),
        ]);
        v
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let (f, e) = (&mut self.fit, &mut self.enhance);
        match key {
            "fit.gaussians" => f.n_gaussians = num(key, value)?,
            "fit.iterations" => f.iterations = num(key, value)?,
            "fit.lr" => f.lr0 = num(key, value)?,
            "fit.step_decay" => f.step_decay = num(key, value)?,
            "fit.step_every" => f.step_every = num(key, value)?,
            "fit.lambda_ssim" => f.lambda_ssim = num(key, value)?,
            "fit.tile" => f.tile_px = num(key, value)?,
            "fit.seed" => f.seed = num(key, value)?,
            "enhance.iterations" => e.iterations = num(key, value)?,
            "enhance.lr" => e.lr0 = num(key, value)?,
            "enhance.lr_floor_fraction" => e.lr_floor_fraction = num(key, value)?,
            "enhance.k" => e.k = num(key, value)?,
            "enhance.hidden" => e.hidden = num(key, value)?,
            "enhance.eh" => e.loss.exposure_target = num(key, value)?,
            "enhance.tau" => e.loss.saturation_threshold = num(key, value)?,
            "enhance.gamma" => e.loss.contrast_gamma = num(key, value)?,
            "enhance.reduction" => {
                e.loss.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("{key}: expected mean or sum, got {value:?}"))),
                }
            }
            "enhance.seed" => e.seed = num(key, value)?,
            "enhance.tile" => e.tile_px = num(key, value)?,
            _ => match LAMBDA_KEYS.iter().position(|k| *k == key) {
                Some(i) => e.loss.lambdas[i] = num(key, value)?,
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.fit.validate().map_err(wrap)?;
        self.enhance.validate().map_err(wrap)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_set(n: usize, seed: u64) -> GaussianSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut set = GaussianSet::with_capacity(40, 30, n);
        for _ in 0..n {
            let mut f = || r.gen_range(-50.0f32..50.0) as f64;
            set.push([f(), f()], [f(), f()], f(), [f(), f(), f()], f());
        }
        set
    }

    #[test]
    fn empty_set_is_a_bare_header() {
        let set = GaussianSet::empty(4, 4);
        let bytes = encode(&set);
        assert_eq!(bytes.len(), GS2D_HEADER_LEN);
        assert_eq!(&bytes[..4], b"GS2D");
        assert_eq!(decode(&bytes).unwrap(), set);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&random_set(3, 1));
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!([word(0), word(1), word(2), word(3), word(4)], [1, 40, 30, 3, 1]);
        assert_eq!(bytes.len(), GS2D_HEADER_LEN + 3 * 36);
        // First record starts with μx.
        let set = random_set(3, 1);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()) as f64, set.mu[0][0]);
        assert_eq!(f32::from_le_bytes(bytes[56..60].try_into().unwrap()) as f64, set.opacity_raw[0]);
    }

    #[test]
    fn random_sets_round_trip_bitwise() {
        for seed in 0..20 {
            let set = random_set(100, seed);
            assert_eq!(decode(&encode(&set)).unwrap(), set);
        }
    }

    #[test]
    fn decode_reports_typed_errors() {
        let good = encode(&random_set(2, 3));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format(_))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&good[..10]), Err(Error::Corrupt(_))));
        assert!(matches!(decode(b"GS"), Err(Error::Corrupt(_))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::UnsupportedVersion(2))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_payload_byte_still_decodes() {
        let set = random_set(5, 4);
        let mut bytes = encode(&set);
        // Lowest mantissa byte of the first color value.
        bytes[24 + 5 * 4] ^= 0x01;
        let decoded = decode(&bytes).unwrap();
        assert_ne!(decoded, set);
        assert_eq!(decoded.mu, set.mu);
    }

    #[test]
    fn image_quantization_is_a_fixpoint_after_one_round() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let img = ImageBuffer::from_fn(13, 7, 3, |_, _, _| r.gen_range(-0.1..1.1));
        let p1 = dir.path().join("a.png");
        save_image(&img, &p1).unwrap();
        let once = load_image(&p1).unwrap();
        let p2 = dir.path().join("b.png");
        save_image(&once, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_image(&p2).unwrap(), once);
    }

    #[test]
    fn eight_bit_values_map_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.png");
        image::save_buffer(&p, &[255, 128, 0], 1, 1, image::ExtendedColorType::Rgb8).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn gray_images_save_and_sixteen_bit_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        save_image(&ImageBuffer::filled(3, 2, &[0.5]), &p).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[128.0 / 255.0; 18]);
        assert!(save_image(&ImageBuffer::zeros(2, 2, 2), &p).is_err());

        let p16 = dir.path().join("deep.png");
        image::save_buffer(&p16, &[0u8; 12], 2, 1, image::ExtendedColorType::Rgb16).unwrap();
        assert!(matches!(load_image(&p16), Err(Error::Image(_))));
        assert!(load_image(dir.path().join("missing.png")).is_err());
    }

    fn random_params(k: usize, seed: u64) -> EnhancerParams {
        let mut p = EnhancerParams::init(k, 6, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        p.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v = r.gen_range(-2.0f32..2.0) as f64));
        p
    }

    #[test]
    fn enhancer_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_params(4, 6);
        let path = dir.path().join("e.bin");
        save_enhancer(&p, &path).unwrap();
        assert_eq!(load_enhancer(&path).unwrap(), p);
        assert_eq!(load_encoder(&path).unwrap(), p.encoder);

        let mut none = p.clone();
        none.operators.clear();
        assert!(encode_enhancer(&none).is_err());

        let mut views = p.tensors();
        views.push(views[0].clone());
        assert!(matches!(decode_enhancer(&encode_tensors(&views)), Err(Error::Format(_))));

        // A container whose head declares K = 1.
        let mut k1 = p.tensors();
        k1.retain(|t| !t.0.starts_with("operator."));
        let w = vec![0.0; 32];
        let b = vec![0.0; 1];
        for t in &mut k1 {
            if t.0 == "head.weight" {
                *t = ("head.weight".into(), vec![1, 32], &w[..]);
            } else if t.0 == "head.bias" {
                *t = ("head.bias".into(), vec![1], &b[..]);
            }
        }
        assert!(matches!(decode_enhancer(&encode_tensors(&k1)), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_decoder_rejects_malformed_input() {
        let bytes = encode_enhancer(&random_params(2, 7)).unwrap();
        assert!(matches!(decode_tensors(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(decode_tensors(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_tensors(&v), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn mutation_fuzz_never_panics() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let gs = encode(&random_set(6, 9));
        let en = encode_enhancer(&random_params(3, 10)).unwrap();
        for _ in 0..2000 {
            for base in [&gs, &en] {
                let mut m = base.clone();
                for _ in 0..r.gen_range(1..4) {
                    match r.gen_range(0..3) {
                        0 => {
                            let i = r.gen_range(0..m.len());
                            m[i] = r.gen();
                        }
                        1 => m.truncate(r.gen_range(0..m.len())),
                        _ => m.push(r.gen()),
                    }
                    if m.is_empty() {
                        break;
                    }
                }
                let _ = decode(&m);
                let _ = decode_enhancer(&m);
            }
        }
    }

    #[test]
    fn run_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.fit.n_gaussians = 1234;
        cfg.fit.lambda_ssim = 0.35;
        cfg.enhance.loss.lambdas[5] = 300.0;
        cfg.enhance.loss.reduction = Reduction::Sum;
        cfg.enhance.lr0 = 0.1 + 0.2;
        let text = cfg.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().enhance.loss.lambdas[5], 500.0);
    }

    #[test]
    fn run_config_rejects_bad_input() {
        let err = |t: &str| matches!(RunConfig::parse(t), Err(Error::Config(_)));
        assert!(err("fit.unknown = 3"));
        assert!(err("fit.gaussians = many"));
        assert!(err("fit.gaussians = 10\nfit.gaussians = 20"));
        assert!(err("no equals sign"));
        assert!(err("enhance.k = 1"));
        assert!(err("enhance.reduction = median"));
        let ok = RunConfig::parse("# comment\n\n  fit.seed = 7  \nenhance.lambda6 = 300").unwrap();
        assert_eq!(ok.fit.seed, 7);
        assert_eq!(ok.enhance.loss.lambdas[5], 300.0);
    }
}
