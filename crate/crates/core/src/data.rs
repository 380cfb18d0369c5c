//! Training data: procedural texture generation, PPM image I/O, resizing,
//! and the center-crop + zero-pad input construction.
//!
//! Images are `[3,S,S]` tensors in [-1,1] (the decoder's tanh output range
//! forces this normalization). Zero-padding happens in normalized space, so
//! the padded frame is mid-gray.

use crate::rng::{fnv1a, hash2, stream_for, SplitMix64};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
    #[error("pattern period {period} is invalid for size {size}")]
    InvalidPeriod { period: usize, size: usize },
    #[error("size {0} too small (minimum 32)")]
    TooSmall(usize),
    #[error("image size {0} is not divisible by 4")]
    NotDivisibleBy4(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("degenerate resize: {0}")]
    BadResize(String),
}

pub type Image = Tensor<f32>;

/// An (input, target) training pair: the input is the target's central
/// S/2 x S/2 crop zero-padded back to S x S.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturePair {
    pub input: Image,
    pub target: Image,
}

impl TexturePair {
    /// Check the structural invariants (zero frame, bit-equal center).
    pub fn validate(&self) -> bool {
        let [_, s, _] = *self.target.shape() else { return false };
        if self.input.shape() != self.target.shape() || s % 4 != 0 {
            return false;
        }
        let (lo, hi) = (s / 4, s / 4 + s / 2);
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let i = c * s * s + y * s + x;
                    let inside = (lo..hi).contains(&y) && (lo..hi).contains(&x);
                    if inside {
                        if self.input.data()[i] != self.target.data()[i] {
                            return false;
                        }
                    } else if self.input.data()[i] != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Procedural texture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    Bricks,
    ValueNoise,
    BlobLattice,
}

impl TextureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "checker" => Some(TextureKind::Checker),
            "stripes" => Some(TextureKind::Stripes),
            "bricks" => Some(TextureKind::Bricks),
            "value_noise" => Some(TextureKind::ValueNoise),
            "blob_lattice" => Some(TextureKind::BlobLattice),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Checker => "checker",
            TextureKind::Stripes => "stripes",
            TextureKind::Bricks => "bricks",
            TextureKind::ValueNoise => "value_noise",
            TextureKind::BlobLattice => "blob_lattice",
        }
    }

    fn is_periodic(self) -> bool {
        matches!(self, TextureKind::Checker | TextureKind::Stripes | TextureKind::Bricks)
    }
}

/// Fully determines one procedural texture: same spec, same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralSpec {
    pub kind: TextureKind,
    pub seed: u64,
    /// Cell extent in pixels; the full pattern period is `2 * period` for
    /// the periodic kinds.
    pub period: usize,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
}

impl ProceduralSpec {
    /// Seed-derived contrasting palette.
    pub fn new(kind: TextureKind, seed: u64, period: usize) -> Self {
        let mut rng = stream_for(seed, "palette");
        let fg = [rng.uniform(0.1, 1.0) as f32, rng.uniform(0.1, 1.0) as f32, rng.uniform(0.1, 1.0) as f32];
        let bg = [rng.uniform(-1.0, -0.1) as f32, rng.uniform(-1.0, -0.1) as f32, rng.uniform(-1.0, -0.1) as f32];
        ProceduralSpec { kind, seed, period, fg, bg }
    }
}

fn unit_noise(seed: u64, x: i64, y: i64) -> f64 {
    // [-1, 1) from the stateless coordinate hash.
    ((hash2(seed, x, y) >> 11) as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise_at(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let x0 = gx.floor() as i64;
    let y0 = gy.floor() as i64;
    let tx = smoothstep(gx - x0 as f64);
    let ty = smoothstep(gy - y0 as f64);
    let v00 = unit_noise(seed, x0, y0);
    let v10 = unit_noise(seed, x0 + 1, y0);
    let v01 = unit_noise(seed, x0, y0 + 1);
    let v11 = unit_noise(seed, x0 + 1, y0 + 1);
    let top = v00 + tx * (v10 - v00);
    let bot = v01 + tx * (v11 - v01);
    top + ty * (bot - top)
}

/// Render a procedural texture at `size x size`.
pub fn generate(spec: &ProceduralSpec, size: usize) -> Result<Image, DataError> {
    if size < 32 {
        return Err(DataError::TooSmall(size));
    }
    if spec.kind.is_periodic() {
        let full = 2 * spec.period;
        if spec.period == 0 || size % full != 0 {
            return Err(DataError::InvalidPeriod { period: spec.period, size });
        }
    } else if spec.period < 2 {
        return Err(DataError::InvalidPeriod { period: spec.period, size });
    }
    let mut img = Tensor::zeros(&[3, size, size]);
    let p = spec.period;
    let blend = |t: f32, c: usize| spec.bg[c] + (spec.fg[c] - spec.bg[c]) * t;
    for y in 0..size {
        for x in 0..size {
            let t: f32 = match spec.kind {
                TextureKind::Checker => ((x / p + y / p) % 2) as f32,
                TextureKind::Stripes => ((x / p) % 2) as f32,
                TextureKind::Bricks => {
                    let row = y / p;
                    let offset = if row % 2 == 1 { p } else { 0 };
                    let in_mortar = y % p == 0 || (x + offset) % (2 * p) == 0;
                    if in_mortar {
                        0.0
                    } else {
                        // Per-brick tint variation keeps neighboring bricks
                        // distinguishable.
                        let bx = (x + offset) / (2 * p);
                        0.7 + 0.3 * ((hash2(spec.seed, bx as i64, row as i64) % 1000) as f32 / 1000.0)
                    }
                }
                TextureKind::ValueNoise => {
                    let mut v = 0.0;
                    let weights = [0.5, 0.3, 0.2];
                    for (o, w) in weights.iter().enumerate() {
                        let cell = (p as f64 / (1 << o) as f64).max(2.0);
                        v += w * value_noise_at(spec.seed ^ (o as u64 + 1), x as f64, y as f64, cell);
                    }
                    ((v + 1.0) / 2.0) as f32
                }
                TextureKind::BlobLattice => {
                    let cell = p as f64;
                    let gx = (x as f64 / cell).floor() as i64;
                    let gy = (y as f64 / cell).floor() as i64;
                    let mut cover: f64 = 0.0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (cx, cy) = (gx + dx, gy + dy);
                            let jx = 0.5 + 0.35 * unit_noise(spec.seed ^ 0xB10B, cx, cy);
                            let jy = 0.5 + 0.35 * unit_noise(spec.seed ^ 0xB10C, cx, cy);
                            let r = cell * (0.25 + 0.12 * (0.5 + 0.5 * unit_noise(spec.seed ^ 0xB10D, cx, cy)));
                            let px = (cx as f64 + jx) * cell;
                            let py = (cy as f64 + jy) * cell;
                            let dist = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                            let edge = cell * 0.12;
                            let c = ((r - dist) / edge).clamp(0.0, 1.0);
                            cover = cover.max(smoothstep(c));
                        }
                    }
                    cover as f32
                }
            };
            for c in 0..3 {
                img.data_mut()[c * size * size + y * size + x] = blend(t, c);
            }
        }
    }
    Ok(img)
}

// ---- PPM P6 ---------------------------------------------------------------

/// Encode as binary PPM: `P6\n<w> <h>\n255\n` + interleaved RGB bytes.
/// Bytes are round-half-up of the [-1,1] -> [0,255] mapping.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let [_, h, w] = *img.shape() else {
        panic!("encode_ppm expects [3,H,W], got {:?}", img.shape());
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * h * w + y * w + x];
                let byte = ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8;
                out.push(byte);
            }
        }
    }
    out
}

fn skip_ppm_whitespace(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn read_ppm_int(bytes: &[u8], i: usize) -> Result<(u32, usize), DataError> {
    let start = skip_ppm_whitespace(bytes, i);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(DataError::BadHeader("expected an integer".into()));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("digits are utf8");
    let v: u32 = text.parse().map_err(|_| DataError::BadHeader(format!("bad integer {text}")))?;
    Ok((v, end))
}

/// Decode binary PPM; byte b maps to `2b/255 - 1`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(DataError::BadHeader("missing P6 magic".into()));
    }
    let (w, i) = read_ppm_int(bytes, 2)?;
    let (h, i) = read_ppm_int(bytes, i)?;
    let (maxval, i) = read_ppm_int(bytes, i)?;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(DataError::BadHeader("missing separator before payload".into()));
    }
    let payload = &bytes[i + 1..];
    let (w, h) = (w as usize, h as usize);
    let expected = 3 * w * h;
    if payload.len() < expected {
        return Err(DataError::Truncated { expected, got: payload.len() });
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = payload[(y * w + x) * 3 + c] as f32;
                img.data_mut()[c * h * w + y * w + x] = 2.0 * b / 255.0 - 1.0;
            }
        }
    }
    Ok(img)
}

pub fn save_image(img: &Image, path: &Path) -> Result<(), DataError> {
    let bytes = encode_ppm(img);
    let mut f = std::fs::File::create(path).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    f.write_all(&bytes).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if !ext.eq_ignore_ascii_case("ppm") {
        return Err(DataError::UnsupportedFormat(format!("{} (only binary PPM is supported)", path.display())));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    decode_ppm(&bytes)
}

// ---- resizing and pair construction ---------------------------------------

/// Half-pixel-center bilinear resize (independent of the autodiff upsampler;
/// the two implementations cross-check each other in tests).
pub fn resize_bilinear(img: &Image, target: usize) -> Result<Image, DataError> {
    let [c, h, w] = *img.shape() else {
        return Err(DataError::BadResize(format!("expected [C,H,W], got {:?}", img.shape())));
    };
    if h < 2 || w < 2 || target == 0 {
        return Err(DataError::BadResize(format!("{h}x{w} -> {target}")));
    }
    let mut out = Tensor::zeros(&[c, target, target]);
    let map = |i: usize, src_n: usize| -> (usize, usize, f32) {
        let s = ((i as f64 + 0.5) * src_n as f64 / target as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..target {
            let (y0, y1, fy) = map(oy, h);
            for ox in 0..target {
                let (x0, x1, fx) = map(ox, w);
                let a = plane[y0 * w + x0];
                let b = plane[y0 * w + x1];
                let cc = plane[y1 * w + x0];
                let d = plane[y1 * w + x1];
                let top = a + fx * (b - a);
                let bot = cc + fx * (d - cc);
                out.data_mut()[ci * target * target + oy * target + ox] = top + fy * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Build the training input from a target: keep the central S/2 x S/2 crop,
/// zero the border frame.
pub fn make_pair(target: &Image) -> Result<TexturePair, DataError> {
    let [_, s, s2] = *target.shape() else {
        return Err(DataError::BadResize(format!("expected [3,S,S], got {:?}", target.shape())));
    };
    if s != s2 || s % 4 != 0 {
        return Err(DataError::NotDivisibleBy4(s));
    }
    let mut input = Tensor::zeros(&[3, s, s]);
    let (lo, hi) = (s / 4, s / 4 + s / 2);
    for c in 0..3 {
        for y in lo..hi {
            let src = c * s * s + y * s + lo;
            let n = s / 2;
            input.data_mut()[src..src + n].copy_from_slice(&target.data()[src..src + n]);
        }
    }
    Ok(TexturePair { input, target: target.clone() })
}

/// Deterministic shuffled batch index stream for one epoch. The last
/// partial batch is dropped.
pub fn batches(dataset_len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if dataset_len == 0 {
        return Err(DataError::EmptyDataset);
    }
    if batch_size == 0 || batch_size > dataset_len {
        return Err(DataError::BatchTooLarge { batch: batch_size, len: dataset_len });
    }
    let mut order: Vec<usize> = (0..dataset_len).collect();
    SplitMix64::new(epoch_seed).shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

// ---- datasets --------------------------------------------------------------

/// A corpus of target textures, each `[3,S,S]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub targets: Vec<Image>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn pair(&self, idx: usize) -> Result<TexturePair, DataError> {
        make_pair(&self.targets[idx])
    }
}

/// Load every `.ppm` in a flat directory (sorted by filename), resized to
/// `size x size`.
pub fn load_dir(dir: &Path, size: usize) -> Result<Dataset, DataError> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("ppm")).unwrap_or(false))
        .collect();
    paths.sort();
    let mut names = Vec::new();
    let mut targets = Vec::new();
    for p in paths {
        let img = load_image(&p)?;
        let img = if img.shape()[1] == size && img.shape()[2] == size { img } else { resize_bilinear(&img, size)? };
        names.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
        targets.push(img);
    }
    if targets.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset { names, targets })
}

/// Parse a manifest of one `key=value` record per line. Keys: `kind`
/// (required), `seed`, `period`, `fg`, `bg` (colors as `r,g,b` bytes).
/// Blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ProceduralSpec>, DataError> {
    let mut specs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut kind: Option<TextureKind> = None;
        let mut seed: u64 = 0;
        let mut period: usize = 16;
        let mut fg: Option<[f32; 3]> = None;
        let mut bg: Option<[f32; 3]> = None;
        let err = |msg: String| DataError::BadManifest { line: lineno + 1, msg };
        for tok in line.split_whitespace() {
            let (key, value) = tok.split_once('=').ok_or_else(|| err(format!("expected key=value, got {tok}")))?;
            match key {
                "kind" => kind = Some(TextureKind::parse(value).ok_or_else(|| err(format!("unknown kind {value}")))?),
                "seed" => seed = value.parse().map_err(|_| err(format!("bad seed {value}")))?,
                "period" => period = value.parse().map_err(|_| err(format!("bad period {value}")))?,
                "fg" | "bg" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(err(format!("color needs r,g,b, got {value}")));
                    }
                    let mut col = [0.0f32; 3];
                    for (i, p) in parts.iter().enumerate() {
                        let byte: u8 = p.parse().map_err(|_| err(format!("bad color byte {p}")))?;
                        col[i] = 2.0 * byte as f32 / 255.0 - 1.0;
                    }
                    if key == "fg" {
                        fg = Some(col);
                    } else {
                        bg = Some(col);
                    }
                }
                other => return Err(err(format!("unknown key {other}"))),
            }
        }
        let kind = kind.ok_or_else(|| err("missing kind".into()))?;
        let mut spec = ProceduralSpec::new(kind, seed, period);
        if let Some(c) = fg {
            spec.fg = c;
        }
        if let Some(c) = bg {
            spec.bg = c;
        }
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(specs)
}

/// Render a manifest's textures at `size x size`.
pub fn generate_corpus(specs: &[ProceduralSpec], size: usize) -> Result<Dataset, DataError> {
    let mut names = Vec::new();
    let mut targets = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        names.push(format!("{}-{:03}-s{}", spec.kind.name(), i, spec.seed));
        targets.push(generate(spec, size)?);
    }
    Ok(Dataset { names, targets })
}

/// Manifest text from specs (inverse of [`parse_manifest`], used by tests
/// and example corpora).
pub fn manifest_line(spec: &ProceduralSpec) -> String {
    let byte = |v: f32| (((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0)) as u8;
    format!(
        "kind={} seed={} period={} fg={},{},{} bg={},{},{}",
        spec.kind.name(),
        spec.seed,
        spec.period,
        byte(spec.fg[0]),
        byte(spec.fg[1]),
        byte(spec.fg[2]),
        byte(spec.bg[0]),
        byte(spec.bg[1]),
        byte(spec.bg[2])
    )
}

/// Digest of an image's bytes (test helper for bit-stability claims).
pub fn image_digest(img: &Image) -> u64 {
    let mut bytes = Vec::with_capacity(img.len() * 4);
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_pattern_definition() {
        let spec = ProceduralSpec::new(TextureKind::Checker, 3, 16);
        let img = generate(&spec, 128).unwrap();
        let at = |c: usize, y: usize, x: usize| img.data()[c * 128 * 128 + y * 128 + x];
        for c in 0..3 {
            assert_eq!(at(c, 0, 0), at(c, 16, 16));
            assert_ne!(at(c, 0, 0), at(c, 0, 16));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [TextureKind::Checker, TextureKind::Stripes, TextureKind::Bricks, TextureKind::ValueNoise, TextureKind::BlobLattice] {
            let spec = ProceduralSpec::new(kind, 9, 16);
            let a = generate(&spec, 64).unwrap();
            let b = generate(&spec, 64).unwrap();
            assert_eq!(image_digest(&a), image_digest(&b), "{kind:?}");
        }
    }

    #[test]
    fn value_noise_mean_is_centered() {
        let spec = ProceduralSpec {
            kind: TextureKind::ValueNoise,
            seed: 4,
            period: 16,
            fg: [1.0; 3],
            bg: [-1.0; 3],
        };
        let img = generate(&spec, 128).unwrap();
        let mean: f32 = img.data().iter().sum::<f32>() / img.len() as f32;
        assert!(mean.abs() < 0.3, "mean {mean}");
    }

    #[test]
    fn invalid_period_is_rejected() {
        let spec = ProceduralSpec::new(TextureKind::Checker, 1, 24);
        assert!(matches!(generate(&spec, 128), Err(DataError::InvalidPeriod { .. })));
        let small = ProceduralSpec::new(TextureKind::Checker, 1, 8);
        assert!(matches!(generate(&small, 16), Err(DataError::TooSmall(_))));
    }

    #[test]
    fn ppm_endpoint_mapping() {
        let mut img = Tensor::zeros(&[3, 1, 2]);
        img.data_mut()[0] = -1.0; // R of pixel 0
        img.data_mut()[1] = 1.0; // R of pixel 1
        let bytes = encode_ppm(&img);
        let header_len = b"P6\n2 1\n255\n".len();
        assert_eq!(&bytes[..header_len], b"P6\n2 1\n255\n");
        assert_eq!(bytes[header_len], 0);
        assert_eq!(bytes[header_len + 3], 255);

        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.data()[0], -1.0);
        assert_eq!(back.data()[1], 1.0);

        // byte 128 -> 2*128/255 - 1
        let one = decode_ppm(b"P6\n1 1\n255\nxxx".map(|b| b).as_slice());
        let _ = one; // placeholder guard below constructs properly
        let mut raw = b"P6\n1 1\n255\n".to_vec();
        raw.extend_from_slice(&[128, 128, 128]);
        let img128 = decode_ppm(&raw).unwrap();
        assert!((img128.data()[0] - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn ppm_save_is_byte_stable_after_one_round_trip() {
        let mut rng = crate::rng::SplitMix64::new(21);
        let img = Tensor::<f32>::uniform(&[3, 9, 7], -1.0, 1.0, &mut rng);
        let first = encode_ppm(&img);
        let loaded = decode_ppm(&first).unwrap();
        let second = encode_ppm(&loaded);
        assert_eq!(first, second);
    }

    #[test]
    fn ppm_rejects_malformed_inputs() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\nxxx"), Err(DataError::BadHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\nxx"), Err(DataError::Truncated { .. })));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\nxx"), Err(DataError::UnsupportedMaxval(_))));
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut raw = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        raw.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        let img = decode_ppm(&raw).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = crate::rng::SplitMix64::new(22);
        let img = Tensor::<f32>::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let same = resize_bilinear(&img, 8).unwrap();
        assert!(same.max_abs_diff(&img) < 1e-6);

        let c = Tensor::<f32>::full(&[3, 8, 8], 0.25);
        let up = resize_bilinear(&c, 16).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn resize_2x_agrees_with_autodiff_upsampler() {
        let mut rng = crate::rng::SplitMix64::new(23);
        let img = Tensor::<f32>::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let a = resize_bilinear(&img, 16).unwrap();

        let mut g: crate::graph::Graph<f32> = crate::graph::Graph::new();
        let x = g.leaf(img.reshaped(vec![1, 3, 8, 8]).unwrap(), false);
        let up = g.bilinear_up2x(x).unwrap();
        let b = g.detach(up).reshaped(vec![3, 16, 16]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn make_pair_geometry_at_128() {
        let spec = ProceduralSpec::new(TextureKind::Checker, 5, 16);
        let target = generate(&spec, 128).unwrap();
        let pair = make_pair(&target).unwrap();
        assert!(pair.validate());
        let at = |t: &Image, c: usize, y: usize, x: usize| t.data()[c * 128 * 128 + y * 128 + x];
        // Nonzero region is rows/cols 32..=95.
        assert_eq!(at(&pair.input, 0, 0, 0), 0.0);
        assert_eq!(at(&pair.input, 0, 31, 64), 0.0);
        assert_eq!(at(&pair.input, 0, 96, 64), 0.0);
        assert_eq!(at(&pair.input, 1, 32, 32), at(&pair.target, 1, 32, 32));
        assert_eq!(at(&pair.input, 2, 95, 95), at(&pair.target, 2, 95, 95));
        assert_eq!(at(&pair.input, 0, 64, 64), at(&pair.target, 0, 64, 64));

        let odd = Tensor::<f32>::zeros(&[3, 30, 30]);
        assert!(matches!(make_pair(&odd), Err(DataError::NotDivisibleBy4(_))));
    }

    #[test]
    fn batches_are_seeded_and_drop_partials() {
        let a = batches(20, 8, 7).unwrap();
        let b = batches(20, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|batch| batch.len() == 8));

        let c = batches(20, 8, 8).unwrap();
        assert_ne!(a, c);
        // Coverage across epochs is seed-dependent (partial batches drop);
        // seeds 0 and 1 were checked to cover all 20 indices together.
        let e0 = batches(20, 8, 0).unwrap();
        let e1 = batches(20, 8, 1).unwrap();
        let mut seen: std::collections::BTreeSet<usize> = e0.iter().flatten().copied().collect();
        seen.extend(e1.iter().flatten().copied());
        assert_eq!(seen.len(), 20);

        assert!(matches!(batches(4, 8, 1), Err(DataError::BatchTooLarge { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let text = "\n# corpus\nkind=checker seed=3 period=16\nkind=value_noise seed=9 period=8 fg=255,0,0 bg=0,0,64\n";
        let specs = parse_manifest(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].kind, TextureKind::Checker);
        assert_eq!(specs[1].fg[0], 1.0);
        let line = manifest_line(&specs[1]);
        let re = parse_manifest(&line).unwrap();
        assert_eq!(re[0], specs[1]);

        assert!(parse_manifest("kind=bogus").is_err());
        assert!(parse_manifest("period=3").is_err());
        assert!(parse_manifest("").is_err());
    }

    #[test]
    fn dataset_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (i, seed) in [3u64, 4, 5].iter().enumerate() {
            let img = generate(&ProceduralSpec::new(TextureKind::Stripes, *seed, 8), 64).unwrap();
            save_image(&img, &dir.path().join(format!("t{i}.ppm"))).unwrap();
        }
        let ds = load_dir(dir.path(), 32).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.targets[0].shape(), &[3, 32, 32]);
        let pair = ds.pair(0).unwrap();
        assert!(pair.validate());
    }
}
