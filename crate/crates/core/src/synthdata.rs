//! Procedural human-matting-style dataset.
//!
//! Foregrounds are a head-and-shoulders silhouette with a feathered edge plus
//! thin anti-aliased strands leaving the head; backgrounds are
//! procedural textures or user-supplied images. Every foreground is composited
//! onto `N` backgrounds, each background used exactly once.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{composite, crop, resize, AlphaMatte, Image, Raster};

pub const GENERATOR_VERSION: &str = "shm-synth/1";
pub const MIN_SIDE: usize = 32;

/// SplitMix64-style mixing of `(master seed, stream, index)` into an independent seed.
pub fn mix_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Procedural,
    External,
}

#[derive(Debug, Clone)]
pub struct ForegroundAsset {
    pub id: String,
    pub color: Image,
    pub alpha: AlphaMatte,
    pub source_tag: SourceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForegroundStyle {
    pub min_filaments: usize,
    pub max_filaments: usize,
    /// Edge feather standard deviation range, pixels.
    pub feather_sigma: (f64, f64),
    /// Strand length as a fraction of the shorter side.
    pub filament_length: (f64, f64),
    /// Strand width range, pixels.
    pub filament_width: (f64, f64),
    pub filament_opacity: (f64, f64),
}

impl Default for ForegroundStyle {
    fn default() -> Self {
        Self {
            min_filaments: 5,
            max_filaments: 50,
            feather_sigma: (0.7, 1.8),
            filament_length: (0.05, 0.18),
            filament_width: (0.6, 1.6),
            filament_opacity: (0.45, 0.9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    Constant,
    Gradient,
    Noise,
    Clutter,
    /// Gradient plus multi-octave noise plus geometric clutter.
    Mixed,
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| < 1.5e-7
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 {
        y
    } else {
        -y
    }
}

/// Gaussian edge profile for signed distance `d` (negative inside), truncated
/// at `3 sigma` and renormalized so it reaches exactly 0 and 1.
fn feather(d: f64, sigma: f64) -> f32 {
    if d <= -3.0 * sigma {
        return 1.0;
    }
    if d >= 3.0 * sigma {
        return 0.0;
    }
    let cdf = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let lo = cdf(-3.0);
    ((cdf(-d / sigma) - lo) / (cdf(3.0) - lo)).clamp(0.0, 1.0) as f32
}

/// Smooth value noise on a lattice of `cell`-pixel spacing, values in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f32> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()) as f32);
        for x in 0..w {
            let fx = x as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()) as f32);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn octave_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, base_cell: f64, octaves: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; h * w];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cell = base_cell;
    for _ in 0..octaves {
        let layer = value_noise(rng, h, w, cell.max(1.5));
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += amp * v;
        }
        total += amp;
        amp *= 0.5;
        cell /= 2.0;
    }
    acc.iter_mut().for_each(|v| *v /= total);
    acc
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "synthetic rasters need at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Procedural foreground: a head-and-shoulders silhouette with a feathered edge
/// plus hair-like strands leaving the top of the head.
pub fn gen_foreground(seed: u64, height: usize, width: usize, style: &ForegroundStyle) -> Result<ForegroundAsset> {
    check_size(height, width)?;
    if style.min_filaments > style.max_filaments {
        return Err(Error::InvalidArgument("filament range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let short = h.min(w);

    // head ellipse
    let cy = h * rng.random_range(0.30..0.40);
    let cx = w * rng.random_range(0.42..0.58);
    let ry = h * rng.random_range(0.14..0.19);
    let rx = (ry * rng.random_range(0.72..0.85)).min(w * 0.3);
    // torso: rounded box from the shoulders down past the bottom edge
    let shoulder_y = cy + ry * rng.random_range(1.15..1.35);
    let torso_half = (rx * rng.random_range(2.2..2.9)).min(w * 0.46);
    let torso_cx = cx + w * rng.random_range(-0.04..0.04);
    let corner = rx * rng.random_range(0.8..1.3);
    let neck_half = rx * rng.random_range(0.38..0.5);
    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            let k = k as f64;
            (k, rng.random_range(0.0..0.05) / k.sqrt(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let radius_at = |theta: f64| -> f64 {
        1.0 + harmonics
            .iter()
            .map(|&(k, a, phase)| a * (k * theta + phase).cos())
            .sum::<f64>()
    };
    let sigma = rng.random_range(style.feather_sigma.0..=style.feather_sigma.1);
    let scale = rx.min(ry);
    let rounded_box = |py: f64, px: f64, by: f64, bx: f64, hy: f64, hx: f64, r: f64| -> f64 {
        let qy = (py - by).abs() - (hy - r);
        let qx = (px - bx).abs() - (hx - r);
        let outside = (qy.max(0.0).powi(2) + qx.max(0.0).powi(2)).sqrt();
        outside + qy.max(qx).min(0.0) - r
    };
    let big = h;

    let mut body = vec![0.0f32; height * width];
    let mut is_head = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            let (ny, nx) = ((fy - cy) / ry, (fx - cx) / rx);
            let rho = (ny * ny + nx * nx).sqrt();
            let theta = ny.atan2(nx);
            let d_head = (rho - radius_at(theta)) * scale;
            let d_torso = rounded_box(fy, fx, shoulder_y + big, torso_cx, big, torso_half, corner);
            let d_neck = rounded_box(fy, fx, (cy + shoulder_y) / 2.0 + ry * 0.2, cx, (shoulder_y - cy) / 2.0, neck_half, 0.0);
            let d = d_head.min(d_torso).min(d_neck);
            let i = y * width + x;
            body[i] = feather(d, sigma);
            is_head[i] = d_head.min(d_neck) < d_torso;
        }
    }

    // Strands: stamped anti-aliased discs along curved paths leaving the silhouette.
    let count = rng.random_range(style.min_filaments..=style.max_filaments);
    let mut strand_cover = vec![0.0f32; height * width];
    let mut strand_keep = vec![1.0f32; height * width];
    for _ in 0..count {
        // bias strands toward the upper half, where hair lives
        let theta0 = -PI / 2.0 + rng.random_range(-1.3..1.3);
        let r0 = radius_at(theta0) * 0.97;
        let (mut py, mut px) = (cy + r0 * ry * theta0.sin(), cx + r0 * rx * theta0.cos());
        let mut dir = theta0 + rng.random_range(-0.5..0.5);
        let curvature = rng.random_range(-0.02..0.02);
        let length = short * rng.random_range(style.filament_length.0..=style.filament_length.1);
        let half = rng.random_range(style.filament_width.0..=style.filament_width.1) / 2.0;
        let opacity = rng.random_range(style.filament_opacity.0..=style.filament_opacity.1) as f32;
        strand_cover.iter_mut().for_each(|v| *v = 0.0);
        let mut touched = Vec::new();
        let steps = (length / 0.5).ceil() as usize;
        for _ in 0..steps {
            let (y0, y1) = ((py - half - 1.0).floor(), (py + half + 1.0).ceil());
            let (x0, x1) = ((px - half - 1.0).floor(), (px + half + 1.0).ceil());
            for yy in (y0.max(0.0) as usize)..=(y1.min(h - 1.0).max(0.0) as usize) {
                for xx in (x0.max(0.0) as usize)..=(x1.min(w - 1.0).max(0.0) as usize) {
                    let dist = ((yy as f64 - py).powi(2) + (xx as f64 - px).powi(2)).sqrt();
                    let cov = (half + 0.5 - dist).clamp(0.0, 1.0) as f32;
                    let i = yy * width + xx;
                    if cov > strand_cover[i] {
                        if strand_cover[i] == 0.0 {
                            touched.push(i);
                        }
                        strand_cover[i] = cov;
                    }
                }
            }
            py += 0.5 * dir.sin();
            px += 0.5 * dir.cos();
            dir += curvature;
        }
        for i in touched {
            strand_keep[i] *= 1.0 - opacity * strand_cover[i];
        }
    }

    let alpha_data: Vec<f32> = body
        .iter()
        .zip(&strand_keep)
        .map(|(&b, &k)| {
            let a = 1.0 - (1.0 - b) * k;
            // keep an exact 0/1 where nothing fractional contributed
            if a < 1e-6 {
                0.0
            } else if a > 1.0 - 1e-6 {
                1.0
            } else {
                a
            }
        })
        .collect();

    // Color: skin tone on head and neck, textured clothing on the torso, hair where strands dominate.
    let skin = {
        let r = rng.random_range(0.45..0.95f32);
        [r, r * rng.random_range(0.62..0.8f32), r * rng.random_range(0.45..0.65f32)]
    };
    let base = random_color(&mut rng);
    let accent = random_color(&mut rng);
    let hair = {
        let v = rng.random_range(0.05..0.45f32);
        [v * rng.random_range(0.8..1.2f32), v * 0.85, v * 0.7].map(|c| c.clamp(0.0, 1.0))
    };
    let texture = octave_noise(&mut rng, height, width, short / 6.0, 3);
    let stripe_period = rng.random_range(6.0..18.0f64);
    let stripe_angle = rng.random_range(0.0..PI);
    let hw = height * width;
    let mut color = vec![0.0f32; 3 * hw];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let phase = (x as f64 * stripe_angle.cos() + y as f64 * stripe_angle.sin()) / stripe_period;
            let stripe = (0.5 + 0.5 * (2.0 * PI * phase).sin()) as f32;
            let strand = 1.0 - strand_keep[i];
            for c in 0..3 {
                let fill = if is_head[i] {
                    skin[c] * (0.85 + 0.15 * texture[i])
                } else {
                    base[c] * (0.6 + 0.4 * texture[i]) * (1.0 - 0.35 * stripe) + accent[c] * 0.35 * stripe
                };
                let v = fill * (1.0 - strand) + hair[c] * strand;
                color[c * hw + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(ForegroundAsset {
        id: String::new(),
        color: Image::new(height, width, color)?,
        alpha: AlphaMatte::new(height, width, alpha_data)?,
        source_tag: SourceTag::Procedural,
    })
}

/// Procedural background for the given style.
pub fn gen_background(seed: u64, height: usize, width: usize, style: BackgroundStyle) -> Result<Image> {
    check_size(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = height * width;
    let mut data = vec![0.0f32; 3 * hw];
    let (h, w) = (height as f64, width as f64);
    let paint_gradient = |rng: &mut ChaCha8Rng, data: &mut [f32]| {
        let (c0, c1) = (random_color(rng), random_color(rng));
        let angle = rng.random_range(0.0..2.0 * PI);
        let (s, c) = angle.sin_cos();
        let span = (h * s.abs() + w * c.abs()).max(1.0);
        for y in 0..height {
            for x in 0..width {
                let t = (((x as f64 - w / 2.0) * c + (y as f64 - h / 2.0) * s) / span + 0.5).clamp(0.0, 1.0) as f32;
                for ch in 0..3 {
                    data[ch * hw + y * width + x] = c0[ch] * (1.0 - t) + c1[ch] * t;
                }
            }
        }
    };
    let add_noise = |rng: &mut ChaCha8Rng, data: &mut [f32], strength: f32| {
        let cell = rng.random_range(8.0..32.0);
        for ch in 0..3 {
            let n = octave_noise(rng, height, width, cell, 4);
            for (d, v) in data[ch * hw..(ch + 1) * hw].iter_mut().zip(n) {
                *d = (*d * (1.0 - strength) + v * strength).clamp(0.0, 1.0);
            }
        }
    };
    let add_clutter = |rng: &mut ChaCha8Rng, data: &mut [f32]| {
        let shapes = rng.random_range(4..14);
        for _ in 0..shapes {
            let color = random_color(rng);
            let kind = rng.random_range(0..3);
            let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
            let (sy, sx) = (rng.random_range(3.0..h / 3.0), rng.random_range(3.0..w / 3.0));
            for y in 0..height {
                for x in 0..width {
                    let (dy, dx) = (y as f64 - y0, x as f64 - x0);
                    let inside = match kind {
                        0 => dy.abs() < sy / 2.0 && dx.abs() < sx / 2.0,
                        1 => (dy / sy).powi(2) + (dx / sx).powi(2) < 0.25,
                        _ => (dy * sx / sy - dx).abs() < 1.5 && dy.abs() < sy,
                    };
                    if inside {
                        for ch in 0..3 {
                            data[ch * hw + y * width + x] = color[ch];
                        }
                    }
                }
            }
        }
    };
    match style {
        BackgroundStyle::Constant => {
            let c = random_color(&mut rng);
            for ch in 0..3 {
                data[ch * hw..(ch + 1) * hw].fill(c[ch]);
            }
        }
        BackgroundStyle::Gradient => paint_gradient(&mut rng, &mut data),
        BackgroundStyle::Noise => {
            paint_gradient(&mut rng, &mut data);
            add_noise(&mut rng, &mut data, 1.0);
        }
        BackgroundStyle::Clutter => {
            paint_gradient(&mut rng, &mut data);
            add_clutter(&mut rng, &mut data);
        }
        BackgroundStyle::Mixed => {
            paint_gradient(&mut rng, &mut data);
            let strength = rng.random_range(0.3..0.8);
            add_noise(&mut rng, &mut data, strength);
            add_clutter(&mut rng, &mut data);
        }
    }
    Image::new(height, width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub foreground_id: String,
    pub background_id: String,
    pub composite_path: String,
    pub alpha_path: String,
    pub fg_path: String,
    pub bg_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    kind: String,
    seed: u64,
    generator_version: String,
    counts: SplitCounts,
}

/// Dataset index: one header line then one JSON record per line.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub seed: u64,
    pub generator_version: String,
    pub counts: SplitCounts,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Check the split-hygiene and tally invariants.
    pub fn validate(&self) -> Result<()> {
        let train = self.split(Split::Train).count();
        let test = self.split(Split::Test).count();
        if (train, test) != (self.counts.train, self.counts.test) {
            return Err(Error::Manifest(format!(
                "header counts {:?} disagree with records (train {train}, test {test})",
                self.counts
            )));
        }
        let train_fg: HashSet<&str> = self.split(Split::Train).map(|r| r.foreground_id.as_str()).collect();
        if let Some(r) = self.split(Split::Test).find(|r| train_fg.contains(r.foreground_id.as_str())) {
            return Err(Error::Manifest(format!(
                "foreground {} appears in both splits",
                r.foreground_id
            )));
        }
        let mut pairs = HashSet::new();
        let mut bgs = HashSet::new();
        for r in &self.records {
            if !pairs.insert((r.foreground_id.as_str(), r.background_id.as_str())) {
                return Err(Error::Manifest(format!(
                    "duplicate pair ({}, {})",
                    r.foreground_id, r.background_id
                )));
            }
            if !bgs.insert(r.background_id.as_str()) {
                return Err(Error::Manifest(format!("background {} reused", r.background_id)));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized manifest; equals [`file_hash`] of the written file.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.render())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    fn render(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = ManifestHeader {
            kind: "header".into(),
            seed: self.seed,
            generator_version: self.generator_version.clone(),
            counts: self.counts,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).expect("in-memory write");
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("serializable")).expect("in-memory write");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
        if header.kind != "header" {
            return Err(Error::Manifest("first line is not a header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Manifest(format!("record on line {}: {e}", i + 2)))?,
            );
        }
        let manifest = Self {
            records,
            seed: header.seed,
            generator_version: header.generator_version,
            counts: header.counts,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_foregrounds: usize,
    pub test_foregrounds: usize,
    /// Backgrounds per training foreground.
    pub n_train: usize,
    /// Backgrounds per test foreground.
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub foreground_style: ForegroundStyle,
    pub background_style: BackgroundStyle,
    /// Optional directory of PNG backgrounds used instead of procedural ones.
    pub background_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl DatasetConfig {
    /// 40 train foregrounds x 4 + 10 test foregrounds x 2 at 320x320.
    pub fn desk_scale() -> Self {
        Self {
            train_foregrounds: 40,
            test_foregrounds: 10,
            n_train: 4,
            n_test: 2,
            height: 320,
            width: 320,
            seed: 0,
            foreground_style: ForegroundStyle::default(),
            background_style: BackgroundStyle::Mixed,
            background_dir: None,
        }
    }

    /// The composition-benchmark configuration: 182 train foregrounds with
    /// 100 backgrounds each, 20 test foregrounds with 20 each.
    pub fn composition_benchmark() -> Self {
        Self {
            train_foregrounds: 182,
            test_foregrounds: 20,
            n_train: 100,
            n_test: 20,
            ..Self::desk_scale()
        }
    }

    pub fn planned_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_foregrounds * self.n_train,
            test: self.test_foregrounds * self.n_test,
        }
    }
}

const STREAM_FG: u64 = 1;
const STREAM_BG: u64 = 2;

enum BackgroundSource {
    Procedural(BackgroundStyle),
    Files(Vec<PathBuf>),
}

impl BackgroundSource {
    fn available(&self) -> usize {
        match self {
            Self::Procedural(_) => usize::MAX,
            Self::Files(f) => f.len(),
        }
    }

    fn get(&self, index: usize, seed: u64, h: usize, w: usize) -> Result<Image> {
        match self {
            Self::Procedural(style) => gen_background(seed, h, w, *style),
            Self::Files(files) => fit_background(&Image::load_png(&files[index])?, h, w),
        }
    }
}

/// Scale to cover `h x w` then centre-crop.
fn fit_background(img: &Image, h: usize, w: usize) -> Result<Image> {
    let scale = (h as f64 / img.height() as f64).max(w as f64 / img.width() as f64);
    let (sh, sw) = (
        ((img.height() as f64 * scale).ceil() as usize).max(h),
        ((img.width() as f64 * scale).ceil() as usize).max(w),
    );
    let scaled = resize(img, sh, sw)?;
    crop(&scaled, (sh - h) / 2, (sw - w) / 2, h, w)
}

fn quantize_image(img: &Image) -> Result<Image> {
    let data = img
        .data()
        .iter()
        .map(|&v| crate::imaging::quantize8(v) as f32 / 255.0)
        .collect();
    Image::new(img.height(), img.width(), data)
}

fn quantize_alpha(a: &AlphaMatte) -> Result<AlphaMatte> {
    let data = a
        .data()
        .iter()
        .map(|&v| crate::imaging::quantize16(v) as f32 / 65535.0)
        .collect();
    AlphaMatte::new(a.height(), a.width(), data)
}

/// Generate every raster, write them under `out_dir` and persist `manifest.jsonl`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    check_size(config.height, config.width)?;
    let counts = config.planned_counts();
    let source = match &config.background_dir {
        Some(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            BackgroundSource::Files(files)
        }
        None => BackgroundSource::Procedural(config.background_style),
    };
    let required = counts.train + counts.test;
    if source.available() < required {
        return Err(Error::InsufficientBackgrounds {
            required,
            available: source.available(),
        });
    }
    for sub in ["foregrounds", "backgrounds", "composites"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let (h, w) = (config.height, config.width);
    let total_fg = config.train_foregrounds + config.test_foregrounds;
    let mut records = Vec::with_capacity(required);
    let mut bg_index = 0usize;
    for f in 0..total_fg {
        let split = if f < config.train_foregrounds {
            Split::Train
        } else {
            Split::Test
        };
        let fg_id = format!("fg-{f:05}");
        let asset = gen_foreground(mix_seed(config.seed, STREAM_FG, f as u64), h, w, &config.foreground_style)?;
        let fg_color = quantize_image(&asset.color)?;
        let fg_alpha = quantize_alpha(&asset.alpha)?;
        let fg_path = format!("foregrounds/{fg_id}.png");
        let alpha_path = format!("foregrounds/{fg_id}_alpha.png");
        fg_color.save_png(&out_dir.join(&fg_path))?;
        fg_alpha.save_png(&out_dir.join(&alpha_path), true)?;
        let per_fg = if split == Split::Train {
            config.n_train
        } else {
            config.n_test
        };
        for _ in 0..per_fg {
            let bg_id = format!("bg-{bg_index:06}");
            let bg = source.get(bg_index, mix_seed(config.seed, STREAM_BG, bg_index as u64), h, w)?;
            let bg = quantize_image(&bg)?;
            let bg_path = format!("backgrounds/{bg_id}.png");
            bg.save_png(&out_dir.join(&bg_path))?;
            let sample_id = format!("s-{:06}", records.len());
            let comp_path = format!("composites/{sample_id}.png");
            composite(&fg_color, &bg, &fg_alpha)?.save_png(&out_dir.join(&comp_path))?;
            records.push(SampleRecord {
                sample_id,
                foreground_id: fg_id.clone(),
                background_id: bg_id,
                composite_path: comp_path,
                alpha_path: alpha_path.clone(),
                fg_path: fg_path.clone(),
                bg_path,
                split,
            });
            bg_index += 1;
        }
    }
    let manifest = DatasetManifest {
        records,
        seed: config.seed,
        generator_version: GENERATOR_VERSION.into(),
        counts,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// All four rasters of one record, loaded and normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub composite: Image,
    pub alpha: AlphaMatte,
    pub fg: Image,
    pub bg: Image,
}

impl LoadedSample {
    pub fn load(manifest: &DatasetManifest, record: &SampleRecord) -> Result<Self> {
        let s = Self {
            composite: Image::load_png(&manifest.resolve(&record.composite_path))?,
            alpha: AlphaMatte::load_png(&manifest.resolve(&record.alpha_path))?,
            fg: Image::load_png(&manifest.resolve(&record.fg_path))?,
            bg: Image::load_png(&manifest.resolve(&record.bg_path))?,
        };
        let d = s.composite.dims();
        if s.alpha.dims() != d || s.fg.dims() != d || s.bg.dims() != d {
            return Err(Error::Shape(format!(
                "record {} has rasters of differing sizes",
                record.sample_id
            )));
        }
        Ok(s)
    }

    /// Largest per-channel deviation between the stored composite and the
    /// blend recomputed from the stored layers.
    pub fn composite_residual(&self) -> Result<f32> {
        let recon = composite(&self.fg, &self.bg, &self.alpha)?;
        Ok(recon
            .data()
            .iter()
            .zip(self.composite.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}
