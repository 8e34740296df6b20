//! Synthetic samples, PPM/PGM rasters, patch cropping and label remapping.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::IGNORE_LABEL;
use crate::tensor::Tensor4;

/// Fine class names, ids 0..15.
pub const FINE_CLASSES: [&str; 15] = [
    "paddy field",
    "irrigated land",
    "dry cropland",
    "garden land",
    "arbor forest",
    "shrub land",
    "natural meadow",
    "artificial meadow",
    "industrial land",
    "urban residential",
    "rural residential",
    "traffic land",
    "river",
    "lake",
    "pond",
];

pub const COARSE_CLASSES: [&str; 5] = ["farmland", "forest", "meadow", "built-up", "water"];

/// An RGB image in `[0, 1]` with its label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)`.
    pub image: Tensor4,
    /// Row-major `h * w` class ids, 255 for ignored pixels.
    pub labels: Vec<u8>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor4, labels: Vec<u8>, id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Data(format!("sample image must be (1, 3, h, w), got {s}")));
        }
        if labels.len() != s.plane() {
            return Err(Error::Data(format!("{} labels for a {}x{} image", labels.len(), s.h, s.w)));
        }
        Ok(Self {
            image,
            labels,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Mirrors image and labels together.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Sample {
        let (h, w) = (self.height(), self.width());
        let src = |y: usize, x: usize| {
            (if vertical { h - 1 - y } else { y }, if horizontal { w - 1 - x } else { x })
        };
        let image = Tensor4::from_fn(self.image.shape(), |_, c, y, x| {
            let (sy, sx) = src(y, x);
            self.image.at(0, c, sy, sx)
        });
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                labels.push(self.labels[sy * w + sx]);
            }
        }
        Sample {
            image,
            labels,
            id: self.id.clone(),
        }
    }
}

/// Generator settings. Regions come from a Voronoi partition of
/// `min_regions..=max_regions` random sites with uniformly drawn classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Probability that a region-boundary pixel is labelled 255.
    pub boundary_ignore: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, size: usize) -> Self {
        Self {
            classes,
            size,
            min_regions: 4,
            max_regions: 8,
            boundary_ignore: 0.2,
        }
    }
}

/// Appearance of one class: a base colour shared with its partner class,
/// separated from it by stripe frequency and noise level.
#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    color: [f64; 3],
    stripe_freq: f64,
    stripe_amp: f64,
    angle: f64,
    noise: f64,
}

fn class_style(k: usize, classes: usize) -> ClassStyle {
    let pairs = classes.div_ceil(2);
    let hue = (k / 2) as f64 / pairs as f64;
    let channel = |offset: f64| 0.5 + 0.3 * (std::f64::consts::TAU * (hue + offset)).cos();
    let color = [channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)];
    let textured = k % 2 == 1;
    ClassStyle {
        color,
        stripe_freq: if textured { 0.35 } else { 0.06 },
        stripe_amp: if textured { 0.12 } else { 0.04 },
        angle: 0.4 + 1.1 * (k / 2) as f64,
        noise: if textured { 0.08 } else { 0.02 },
    }
}

fn generate_one(cfg: &SynthConfig, seed: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = cfg.size;
    let regions = rng.gen_range(cfg.min_regions..=cfg.max_regions);
    let sites: Vec<(f64, f64, u8)> = (0..regions)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0..cfg.classes) as u8,
            )
        })
        .collect();
    let mut owner = vec![0usize; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(sx, sy, _)) in sites.iter().enumerate() {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            owner[y * n + x] = best.1;
        }
    }
    let class_at = |i: usize| sites[owner[i]].2;

    let phases: Vec<f64> = (0..regions).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let brightness: f64 = rng.gen_range(-0.05..0.05);
    let mut image = Tensor4::zeros((1, 3, n, n));
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let class = class_at(i);
            let st = class_style(class as usize, cfg.classes);
            let t = x as f64 * st.angle.cos() + y as f64 * st.angle.sin();
            let stripe = st.stripe_amp * (std::f64::consts::TAU * st.stripe_freq * t + phases[owner[i]]).sin();
            for c in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * st.noise;
                *image.at_mut(0, c, y, x) = (st.color[c] + brightness + stripe + noise).clamp(0.0, 1.0);
            }
            let boundary = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n && class_at(yy as usize * n + xx as usize) != class
            });
            labels[i] = if boundary && rng.gen_bool(cfg.boundary_ignore) { IGNORE_LABEL } else { class };
        }
    }
    Sample {
        image,
        labels,
        id: format!("synth{index:05}"),
    }
}

/// `count` seeded samples; sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic(count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    if cfg.classes < 2 || cfg.classes > 255 {
        return Err(Error::Config(format!("classes must be in 2..=255, got {}", cfg.classes)));
    }
    if cfg.size < 16 {
        return Err(Error::Config(format!("size must be at least 16, got {}", cfg.size)));
    }
    if cfg.min_regions == 0 || cfg.min_regions > cfg.max_regions {
        return Err(Error::Config("region count range is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.boundary_ignore) {
        return Err(Error::Config(format!("boundary_ignore must be in [0, 1], got {}", cfg.boundary_ignore)));
    }
    Ok((0..count).into_par_iter().map(|i| generate_one(cfg, seed, i)).collect())
}

/// Non-overlapping `patch x patch` tiles in row-major order; remainders
/// at the right and bottom edges are dropped.
pub fn crop_patches(sample: &Sample, patch: usize) -> Result<Vec<Sample>> {
    let (h, w) = (sample.height(), sample.width());
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Contract(format!("patch {patch} does not fit a {h}x{w} sample")));
    }
    let mut out = Vec::new();
    for ty in 0..h / patch {
        for tx in 0..w / patch {
            let (oy, ox) = (ty * patch, tx * patch);
            let image = Tensor4::from_fn((1, 3, patch, patch), |_, c, y, x| sample.image.at(0, c, oy + y, ox + x));
            let labels = (0..patch)
                .flat_map(|y| (0..patch).map(move |x| (y, x)))
                .map(|(y, x)| sample.labels[(oy + y) * w + ox + x])
                .collect();
            out.push(Sample {
                image,
                labels,
                id: format!("{}_{ty}_{tx}", sample.id),
            });
        }
    }
    Ok(out)
}

/// Fine-to-coarse class table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHierarchy {
    pub fine_to_coarse: Vec<u8>,
    pub fine_names: Vec<String>,
    pub coarse_names: Vec<String>,
}

impl LabelHierarchy {
    /// The 15-class to 5-class land-cover hierarchy.
    pub fn land_cover() -> Self {
        Self {
            fine_to_coarse: vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 3, 4, 4, 4],
            fine_names: FINE_CLASSES.iter().map(|s| s.to_string()).collect(),
            coarse_names: COARSE_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn identity(classes: usize) -> Self {
        let names: Vec<String> = (0..classes).map(|i| format!("class{i}")).collect();
        Self {
            fine_to_coarse: (0..classes as u8).collect(),
            fine_names: names.clone(),
            coarse_names: names,
        }
    }

    pub fn map(&self, label: u8) -> Result<u8> {
        if label == IGNORE_LABEL {
            return Ok(IGNORE_LABEL);
        }
        self.fine_to_coarse
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("label {label} has no coarse class")))
    }
}

pub fn remap_labels(labels: &[u8], hierarchy: &LabelHierarchy) -> Result<Vec<u8>> {
    labels.iter().map(|&l| hierarchy.map(l)).collect()
}

// ---- PNM -------------------------------------------------------------

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Parses a binary PNM with the given magic (`b"P5"` or `b"P6"`) and
/// channel count. Returns `(width, height, payload)`.
fn parse_pnm(bytes: &[u8], path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = HeaderReader { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(r.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.err(format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err("expected a whitespace byte after maxval")),
    }
    let len = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| r.err("image dimensions overflow"))?;
    let payload = &bytes[r.pos..];
    if payload.len() < len {
        r.pos = bytes.len();
        return Err(r.err(format!("truncated payload: {} of {len} bytes", payload.len())));
    }
    Ok((width, height, payload[..len].to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, payload: &[u8]) -> Result<()> {
    let mut buf = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a P5 graymap as `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_pnm(&read_file(path)?, path, b"P5", 1)
}

/// Reads a P6 pixmap as `(width, height, interleaved rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_pnm(&read_file(path)?, path, b"P6", 3)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!("{} pixels for a {width}x{height} graymap", pixels.len())));
    }
    write_pnm(path, "P5", width, height, pixels)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Contract(format!("{} bytes for a {width}x{height} pixmap", rgb.len())));
    }
    write_pnm(path, "P6", width, height, rgb)
}

/// Quantizes a `(1, 3, h, w)` image to interleaved 8-bit RGB.
pub fn image_to_rgb(image: &Tensor4) -> Vec<u8> {
    let s = image.shape();
    let mut out = Vec::with_capacity(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn rgb_to_image(width: usize, height: usize, rgb: &[u8]) -> Tensor4 {
    Tensor4::from_fn((1, 3, height, width), |_, c, y, x| rgb[(y * width + x) * 3 + c] as f64 / 255.0)
}

/// Writes `{id}.ppm` and `{id}_label.pgm` into `dir`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<(PathBuf, PathBuf)> {
    let (w, h) = (sample.width(), sample.height());
    let img = dir.join(format!("{}.ppm", sample.id));
    let lab = dir.join(format!("{}_label.pgm", sample.id));
    write_ppm(&img, w, h, &image_to_rgb(&sample.image))?;
    write_pgm(&lab, w, h, &sample.labels)?;
    Ok((img, lab))
}

pub fn read_sample(image: &Path, labels: &Path) -> Result<Sample> {
    let (w, h, rgb) = read_ppm(image)?;
    let (lw, lh, lab) = read_pgm(labels)?;
    if (w, h) != (lw, lh) {
        return Err(Error::Data(format!(
            "{} is {w}x{h} but {} is {lw}x{lh}",
            image.display(),
            labels.display()
        )));
    }
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(rgb_to_image(w, h, &rgb), lab, id)
}

/// Writes every sample plus `manifest.txt` listing `image,label` paths
/// relative to `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lines: Vec<String> = samples
        .par_iter()
        .map(|s| {
            write_sample(dir, s)?;
            Ok(format!("{}.ppm,{}_label.pgm", s.id, s.id))
        })
        .collect::<Result<_>>()?;
    let manifest = dir.join("manifest.txt");
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a manifest of `image,label` lines; relative paths resolve
/// against the manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let (a, b) = trimmed.split_once(',').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset,
                message: "expected `image_path,label_path`".into(),
            })?;
            out.push((base.join(a.trim()), base.join(b.trim())));
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    read_manifest(manifest)?
        .par_iter()
        .map(|(i, l)| read_sample(i, l))
        .collect()
}
