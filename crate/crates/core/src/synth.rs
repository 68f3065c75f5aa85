//! Pseudo-stereo dataset generation.
//!
//! A scene is a background plus a wire-mesh fence. The right frame is the
//! fence composited over the background; the left frame displaces the fence
//! by `fg_shift` and the background by a smaller `bg_shift`, both to the left,
//! so `shift_horizontal(canny(L), fg_shift)` realigns the fence with R.
//!
//! Every record draws from its own ChaCha stream (master seed, stream =
//! record index), so records can be generated in any order or in parallel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edges::CannyParams;
use crate::error::{Error, Result};
use crate::guidance::{guidance_mask, GuidanceParams, ShiftRange};
use crate::imagecore::{load_image, load_mask, save_image, save_mask, BinaryMask, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { rotation_deg: 0.0, scale: 1.0, tx: 0.0, ty: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Crop {
    pub fn full(img: &GrayImage) -> Crop {
        Crop { x: 0, y: 0, width: img.width(), height: img.height() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter { brightness: 0.0, contrast: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FenceStyle {
    Diamond,
    Rectangular,
}

/// Parameters of a procedural wire mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FenceSpec {
    pub style: FenceStyle,
    /// Spacing between neighboring wires of one family, in pixels.
    pub cell: f64,
    pub wire_width: f64,
    pub rotation_deg: f64,
    /// Half-angle between the two diamond families, degrees from vertical.
    pub diamond_half_angle: f64,
    /// Lateral wobble amplitude of each wire, pixels.
    pub wobble: f64,
    pub intensity: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub background_path: String,
    pub fence_template_path: String,
    pub fg_shift: usize,
    pub bg_shift: usize,
    pub affine: Affine,
    pub crop: Crop,
    pub color_jitter: ColorJitter,
    pub noise_p: f64,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fence: Option<FenceSpec>,
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.fg_shift <= self.bg_shift {
            return Err(Error::InvalidParam(format!(
                "foreground shift {} must exceed background shift {}",
                self.fg_shift, self.bg_shift
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_p) {
            return Err(Error::InvalidParam(format!("noise_p {} outside [0, 0.5]", self.noise_p)));
        }
        Ok(())
    }
}

fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let px = |xx: isize, yy: isize| img.get(yy.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize) as f64;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let top = px(xi, yi) * (1.0 - fx) + px(xi + 1, yi) * fx;
    let bot = px(xi, yi + 1) * (1.0 - fx) + px(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotation (counter-clockwise as displayed), scale and translation about the
/// image center, sampled bilinearly with clamped borders.
pub fn affine_transform(img: &GrayImage, affine: &Affine) -> GrayImage {
    if *affine == Affine::IDENTITY {
        return img.clone();
    }
    let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
    let (s, c) = affine.rotation_deg.to_radians().sin_cos();
    GrayImage::from_fn(img.width(), img.height(), |r, col| {
        let xo = (col as f64 - cx - affine.tx) / affine.scale;
        let yo = (r as f64 - cy - affine.ty) / affine.scale;
        let xi = xo * c - yo * s + cx;
        let yi = xo * s + yo * c + cy;
        sample_bilinear(img, xi, yi).round().clamp(0.0, 255.0) as u8
    })
}

pub fn crop(img: &GrayImage, crop: &Crop) -> Result<GrayImage> {
    if crop.width == 0 || crop.height == 0 || crop.x + crop.width > img.width() || crop.y + crop.height > img.height() {
        return Err(Error::OutOfBounds(format!(
            "crop {}x{}+{}+{} outside {}x{} image",
            crop.width,
            crop.height,
            crop.x,
            crop.y,
            img.width(),
            img.height()
        )));
    }
    Ok(GrayImage::from_fn(crop.width, crop.height, |r, c| img.get(crop.y + r, crop.x + c)))
}

/// `clamp(contrast * (v - 128) + 128 + brightness)`, rounded.
pub fn color_jitter(img: &GrayImage, jitter: &ColorJitter) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |r, c| {
        let v = img.get(r, c) as f64;
        (jitter.contrast * (v - 128.0) + 128.0 + jitter.brightness).round().clamp(0.0, 255.0) as u8
    })
}

/// Affine warp, then crop, then brightness/contrast.
pub fn augment(img: &GrayImage, affine: &Affine, region: &Crop, jitter: &ColorJitter) -> Result<GrayImage> {
    let warped = affine_transform(img, affine);
    let cropped = crop(&warped, region)?;
    Ok(color_jitter(&cropped, jitter))
}

/// Flips each pixel independently with probability `p`.
pub fn salt_pepper(mask: &BinaryMask, p: f64, rng_seed: u64) -> Result<BinaryMask> {
    if !(0.0..=0.5).contains(&p) {
        return Err(Error::InvalidParam(format!("noise probability {p} outside [0, 0.5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let data = mask
        .data()
        .iter()
        .map(|&v| if rng.random::<f64>() < p { 1 - v } else { v })
        .collect();
    BinaryMask::new(mask.width(), mask.height(), data)
}

/// Composites the fence over the background for both frames.
///
/// `R[r][c]` takes the fence at `(y+r, x+c)` when the mask is set, else the
/// background there. `L` reads the fence at `x + c + fg_shift` and the
/// background at `x + c + bg_shift`. The ground truth is the fence mask as
/// it appears in R.
pub fn compose_pair(
    bg: &GrayImage,
    fence_mask: &BinaryMask,
    fence_texture: &GrayImage,
    recipe: &SceneRecipe,
) -> Result<(GrayImage, GrayImage, BinaryMask)> {
    if fence_mask.width() != fence_texture.width() || fence_mask.height() != fence_texture.height() {
        return Err(Error::DimensionMismatch(
            fence_mask.width(),
            fence_mask.height(),
            fence_texture.width(),
            fence_texture.height(),
        ));
    }
    if fence_mask.width() > bg.width() || fence_mask.height() > bg.height() {
        return Err(Error::OutOfBounds(format!(
            "fence {}x{} larger than background {}x{}",
            fence_mask.width(),
            fence_mask.height(),
            bg.width(),
            bg.height()
        )));
    }
    let Crop { x, y, width, height } = recipe.crop;
    let reach = x + width + recipe.fg_shift.max(recipe.bg_shift);
    if width == 0 || height == 0 || reach > fence_mask.width() || y + height > fence_mask.height() {
        return Err(Error::OutOfBounds(format!(
            "crop {width}x{height}+{x}+{y} with shift {} exceeds the {}x{} source margin",
            recipe.fg_shift,
            fence_mask.width(),
            fence_mask.height()
        )));
    }
    let right = GrayImage::from_fn(width, height, |r, c| {
        let (sr, sc) = (y + r, x + c);
        if fence_mask.is_set(sr, sc) {
            fence_texture.get(sr, sc)
        } else {
            bg.get(sr, sc)
        }
    });
    let left = GrayImage::from_fn(width, height, |r, c| {
        let sr = y + r;
        let fc = x + c + recipe.fg_shift;
        if fence_mask.is_set(sr, fc) {
            fence_texture.get(sr, fc)
        } else {
            bg.get(sr, x + c + recipe.bg_shift)
        }
    });
    let gt = BinaryMask::from_fn(width, height, |r, c| fence_mask.is_set(y + r, x + c));
    Ok((left, right, gt))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in roughly [-1, 1].
fn value_noise(w: usize, h: usize, base_cell: f64, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut amp = 1.0;
    let mut cell = base_cell;
    let mut norm = 0.0;
    for _ in 0..octaves {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in 0..h {
            let gy = r as f64 / cell;
            let (y0, ty) = (gy.floor() as usize, smoothstep(gy.fract()));
            for c in 0..w {
                let gx = c as f64 / cell;
                let (x0, tx) = (gx.floor() as usize, smoothstep(gx.fract()));
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[r * w + c] += amp * (top + (bot - top) * ty);
            }
        }
        norm += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(2.0);
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Gradient, value noise and a few filled ellipses and rotated rectangles.
pub fn procedural_background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let base = rng.random_range(70.0..180.0);
    let (gs, gc) = rng.random_range(0.0..2.0 * PI).sin_cos();
    let grad_amp = rng.random_range(0.0..60.0) / width.max(height) as f64;
    let noise_amp = rng.random_range(15.0..45.0);
    let noise = value_noise(width, height, rng.random_range(24.0..64.0), 4, rng);
    let mut px: Vec<f64> = (0..width * height)
        .map(|i| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            base + grad_amp * (c * gc + r * gs - (width as f64 * gc + height as f64 * gs) / 2.0) + noise_amp * noise[i]
        })
        .collect();

    let shapes = rng.random_range(3..=8);
    let scale = width.min(height) as f64;
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let a = rng.random_range(0.05..0.22) * scale;
        let b = rng.random_range(0.05..0.22) * scale;
        let (s, c) = rng.random_range(0.0..PI).sin_cos();
        let tone = rng.random_range(20.0..235.0);
        let ellipse = rng.random_bool(0.5);
        let r0 = (cy - a.max(b)).floor().max(0.0) as usize;
        let r1 = ((cy + a.max(b)).ceil() as usize).min(height - 1);
        let c0 = (cx - a.max(b)).floor().max(0.0) as usize;
        let c1 = ((cx + a.max(b)).ceil() as usize).min(width - 1);
        for r in r0..=r1 {
            for col in c0..=c1 {
                let (dx, dy) = (col as f64 - cx, r as f64 - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                let inside = if ellipse {
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                } else {
                    u.abs() <= a && v.abs() <= b
                };
                if inside {
                    px[r * width + col] = tone;
                }
            }
        }
    }
    GrayImage::new(width, height, px.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
        .expect("sized")
}

/// Deterministic per-wire pseudo-random value in [0, 1).
fn wire_hash(seed: u64, family: u64, index: i64) -> f64 {
    let mut z = seed ^ family.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Rasterizes a wire mesh. Each family is a set of parallel wires whose
/// normal points along `normal_deg`; every wire wobbles sideways with its own
/// phase and wavelength.
pub fn procedural_fence(width: usize, height: usize, spec: &FenceSpec) -> (BinaryMask, GrayImage) {
    let normals: Vec<f64> = match spec.style {
        FenceStyle::Rectangular => vec![spec.rotation_deg, spec.rotation_deg + 90.0],
        FenceStyle::Diamond => vec![
            spec.rotation_deg + spec.diamond_half_angle,
            spec.rotation_deg - spec.diamond_half_angle,
        ],
    };
    let families: Vec<(f64, f64, f64)> = normals
        .iter()
        .enumerate()
        .map(|(k, &deg)| {
            let (s, c) = deg.to_radians().sin_cos();
            (c, s, wire_hash(spec.seed, 100 + k as u64, 0) * spec.cell)
        })
        .collect();
    let half = spec.wire_width / 2.0;
    let mask = BinaryMask::from_fn(width, height, |r, col| {
        let (x, y) = (col as f64, r as f64);
        families.iter().enumerate().any(|(f, &(nc, ns, offset))| {
            let u = x * nc + y * ns - offset;
            let v = -x * ns + y * nc;
            let k0 = (u / spec.cell).round() as i64;
            (k0 - 1..=k0 + 1).any(|k| {
                let phase = wire_hash(spec.seed, f as u64, k) * 2.0 * PI;
                let wavelength = 40.0 + 80.0 * wire_hash(spec.seed, 10 + f as u64, k);
                let center = k as f64 * spec.cell + spec.wobble * (2.0 * PI * v / wavelength + phase).sin();
                (u - center).abs() < half
            })
        })
    });
    let texture = GrayImage::from_fn(width, height, |r, c| {
        let shade = 12.0 * ((r as f64 * 0.05 + spec.seed as f64).sin() * (c as f64 * 0.03).cos());
        (spec.intensity as f64 + shade).round().clamp(0.0, 255.0) as u8
    });
    (mask, texture)
}

/// Generator settings; every field can be set from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub background_dir: Option<PathBuf>,
    pub fence_dir: Option<PathBuf>,
    pub fg_shift_min: usize,
    pub fg_shift_max: usize,
    pub rotation_range: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub brightness_range: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise_p_max: f64,
    pub cell_min: f64,
    pub cell_max: f64,
    pub wire_min: f64,
    pub wire_max: f64,
    pub fence_rotation_range: f64,
    pub wobble_max: f64,
    pub canny: CannyParams,
    pub tau: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            train: 200,
            test: 50,
            seed: 42,
            background_dir: None,
            fence_dir: None,
            fg_shift_min: 3,
            fg_shift_max: 20,
            rotation_range: 15.0,
            scale_min: 0.8,
            scale_max: 1.2,
            brightness_range: 25.0,
            contrast_min: 0.8,
            contrast_max: 1.25,
            noise_p_max: 0.01,
            cell_min: 8.0,
            cell_max: 40.0,
            wire_min: 1.0,
            wire_max: 3.0,
            fence_rotation_range: 20.0,
            wobble_max: 2.5,
            canny: CannyParams::default(),
            tau: 100.0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "width",
    "height",
    "train",
    "test",
    "seed",
    "background_dir",
    "fence_dir",
    "fg_shift_min",
    "fg_shift_max",
    "rotation_range",
    "scale_min",
    "scale_max",
    "brightness_range",
    "contrast_min",
    "contrast_max",
    "noise_p_max",
    "cell_min",
    "cell_max",
    "wire_min",
    "wire_max",
    "fence_rotation_range",
    "wobble_max",
    "sigma",
    "low",
    "high",
    "tau",
];

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys keep the last value.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidParam(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidParam(format!("bad value for {key}: {v:?}")))
}

impl SynthConfig {
    /// Applies key/value overrides; unknown keys are rejected.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let key = k.as_str();
            match key {
                "width" => self.width = parse_value(key, v)?,
                "height" => self.height = parse_value(key, v)?,
                "train" => self.train = parse_value(key, v)?,
                "test" => self.test = parse_value(key, v)?,
                "seed" => self.seed = parse_value(key, v)?,
                "background_dir" => self.background_dir = Some(PathBuf::from(v)),
                "fence_dir" => self.fence_dir = Some(PathBuf::from(v)),
                "fg_shift_min" => self.fg_shift_min = parse_value(key, v)?,
                "fg_shift_max" => self.fg_shift_max = parse_value(key, v)?,
                "rotation_range" => self.rotation_range = parse_value(key, v)?,
                "scale_min" => self.scale_min = parse_value(key, v)?,
                "scale_max" => self.scale_max = parse_value(key, v)?,
                "brightness_range" => self.brightness_range = parse_value(key, v)?,
                "contrast_min" => self.contrast_min = parse_value(key, v)?,
                "contrast_max" => self.contrast_max = parse_value(key, v)?,
                "noise_p_max" => self.noise_p_max = parse_value(key, v)?,
                "cell_min" => self.cell_min = parse_value(key, v)?,
                "cell_max" => self.cell_max = parse_value(key, v)?,
                "wire_min" => self.wire_min = parse_value(key, v)?,
                "wire_max" => self.wire_max = parse_value(key, v)?,
                "fence_rotation_range" => self.fence_rotation_range = parse_value(key, v)?,
                "wobble_max" => self.wobble_max = parse_value(key, v)?,
                "sigma" => self.canny.gaussian_sigma = parse_value(key, v)?,
                "low" => self.canny.low_threshold = parse_value(key, v)?,
                "high" => self.canny.high_threshold = parse_value(key, v)?,
                "tau" => self.tau = parse_value(key, v)?,
                other => return Err(Error::InvalidParam(format!("unknown config key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("scene must be at least 16x16, got {}x{}", self.width, self.height));
        }
        if self.fg_shift_min < 1 || self.fg_shift_min > self.fg_shift_max {
            return bad(format!("need 1 <= fg_shift_min <= fg_shift_max, got {}..{}", self.fg_shift_min, self.fg_shift_max));
        }
        if self.fg_shift_max + 2 >= self.width {
            return bad(format!("fg_shift_max {} too large for width {}", self.fg_shift_max, self.width));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("need 0 < scale_min <= scale_max".into());
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max) {
            return bad("need 0 < contrast_min <= contrast_max".into());
        }
        if !(0.0..=0.5).contains(&self.noise_p_max) {
            return bad(format!("noise_p_max {} outside [0, 0.5]", self.noise_p_max));
        }
        if !(self.cell_min >= 2.0 && self.cell_min <= self.cell_max) {
            return bad("need 2 <= cell_min <= cell_max".into());
        }
        if !(self.wire_min > 0.0 && self.wire_min <= self.wire_max) {
            return bad("need 0 < wire_min <= wire_max".into());
        }
        self.canny.validate()
    }

    /// Guidance search range used when producing FM: `[0, max(w/4, fg_shift_max + 2)]`.
    pub fn search_range(&self) -> ShiftRange {
        let max = (self.width / 4).max(self.fg_shift_max + 2).min(self.width - 1);
        ShiftRange { min: 0, max: max as i64 }
    }

    pub fn guidance_params(&self) -> GuidanceParams {
        GuidanceParams { tau: self.tau, search_range: Some(self.search_range()), ..Default::default() }
    }
}

/// One generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub left: GrayImage,
    pub right: GrayImage,
    pub gt: BinaryMask,
    pub recipe: SceneRecipe,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no .png/.pgm images in {}", dir.display())));
    }
    Ok(files)
}

/// Bilinear resize, used only to bring user-supplied sources up to scene size.
fn resize_to_cover(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if img.width() >= width && img.height() >= height {
        return img.clone();
    }
    let f = (width as f64 / img.width() as f64).max(height as f64 / img.height() as f64);
    let nw = (img.width() as f64 * f).ceil() as usize;
    let nh = (img.height() as f64 * f).ceil() as usize;
    GrayImage::from_fn(nw, nh, |r, c| {
        sample_bilinear(img, (c as f64 + 0.5) / f - 0.5, (r as f64 + 0.5) / f - 0.5)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

fn record_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Draws the recipe for record `index` and composes its stereo pair.
pub fn sample_scene(config: &SynthConfig, index: u64) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = record_rng(config.seed, index);
    let (w, h) = (config.width, config.height);
    let fg_shift = rng.random_range(config.fg_shift_min..=config.fg_shift_max);
    let bg_shift = rng.random_range(0..fg_shift);
    let src_w = w + config.fg_shift_max + 1;
    let src_h = h;

    let (bg_src, background_path) = match &config.background_dir {
        Some(dir) => {
            let files = list_images(dir)?;
            let path = &files[rng.random_range(0..files.len())];
            (resize_to_cover(&load_image(path)?, src_w, src_h), path.display().to_string())
        }
        None => {
            let bg_seed = rng.random::<u64>();
            let mut bg_rng = ChaCha8Rng::seed_from_u64(bg_seed);
            (procedural_background(src_w, src_h, &mut bg_rng), format!("procedural:{bg_seed}"))
        }
    };
    let affine = Affine {
        rotation_deg: rng.random_range(-config.rotation_range..=config.rotation_range),
        scale: rng.random_range(config.scale_min..=config.scale_max),
        tx: rng.random_range(-4.0..=4.0),
        ty: rng.random_range(-4.0..=4.0),
    };
    let bg = augment(&bg_src, &affine, &Crop::full(&bg_src), &ColorJitter::NONE)?;

    // the wire tone sits on the far side of the background mean so the mesh stays visible
    let bg_mean = bg.data().iter().map(|&v| v as f64).sum::<f64>() / bg.data().len() as f64;
    let intensity = if bg_mean >= 128.0 { rng.random_range(10..=60) } else { rng.random_range(195..=245) };
    let (fence_mask, fence_texture, fence_template_path, fence) = match &config.fence_dir {
        Some(dir) => {
            let files = list_images(dir)?;
            let path = &files[rng.random_range(0..files.len())];
            let tpl = load_mask(path)?;
            let (fw, fh) = (tpl.width().min(bg.width()), tpl.height().min(bg.height()));
            if fw < src_w || fh < src_h {
                return Err(Error::OutOfBounds(format!(
                    "fence template {} is {}x{}, need at least {src_w}x{src_h}",
                    path.display(),
                    tpl.width(),
                    tpl.height()
                )));
            }
            let mask = BinaryMask::from_fn(src_w, src_h, |r, c| tpl.is_set(r, c));
            let tex = GrayImage::filled(src_w, src_h, intensity);
            (mask, tex, path.display().to_string(), None)
        }
        None => {
            let spec = FenceSpec {
                style: if rng.random_bool(0.5) { FenceStyle::Diamond } else { FenceStyle::Rectangular },
                cell: rng.random_range(config.cell_min..=config.cell_max),
                wire_width: rng.random_range(config.wire_min..=config.wire_max),
                rotation_deg: rng.random_range(-config.fence_rotation_range..=config.fence_rotation_range),
                diamond_half_angle: rng.random_range(35.0..=55.0),
                wobble: rng.random_range(0.25 * config.wobble_max..=config.wobble_max),
                intensity,
                seed: rng.random::<u64>(),
            };
            let (mask, tex) = procedural_fence(src_w, src_h, &spec);
            (mask, tex, format!("procedural:{:?}", spec.style).to_lowercase(), Some(spec))
        }
    };

    let recipe = SceneRecipe {
        background_path,
        fence_template_path,
        fg_shift,
        bg_shift,
        affine,
        crop: Crop { x: 0, y: 0, width: w, height: h },
        color_jitter: ColorJitter {
            brightness: rng.random_range(-config.brightness_range..=config.brightness_range),
            contrast: rng.random_range(config.contrast_min..=config.contrast_max),
        },
        noise_p: rng.random_range(0.0..=config.noise_p_max),
        rng_seed: rng.random::<u64>(),
        fence,
    };
    let (left, right, gt) = compose_pair(&bg, &fence_mask, &fence_texture, &recipe)?;
    let left = color_jitter(&left, &recipe.color_jitter);
    let right = color_jitter(&right, &recipe.color_jitter);
    Ok(SceneSample { left, right, gt, recipe })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: u64,
    pub split: Split,
    pub left_path: String,
    pub right_path: String,
    pub fm_path: String,
    pub gt_mask_path: String,
    pub estimated_shift: i64,
    pub low_confidence: bool,
    pub recipe: SceneRecipe,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest { root, records })
    }

    /// Checks that every referenced file exists and no output path repeats.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            for p in [&r.left_path, &r.right_path, &r.fm_path, &r.gt_mask_path] {
                if !seen.insert(p.clone()) {
                    return Err(Error::InvalidParam(format!("duplicate output path {p}")));
                }
                if !self.resolve(p).is_file() {
                    return Err(Error::MissingFile(self.resolve(p)));
                }
            }
            r.recipe.validate()?;
        }
        Ok(())
    }
}

fn generate_record(config: &SynthConfig, out_dir: &Path, index: u64, split: Split) -> Result<ManifestRecord> {
    let scene = sample_scene(config, index)?;
    let (fm, curve) = guidance_mask(&scene.left, &scene.right, &config.canny, &config.guidance_params())?;
    let fm = salt_pepper(&fm, scene.recipe.noise_p, scene.recipe.rng_seed)?;
    let sub = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let name = |kind: &str| format!("{sub}/{index:06}_{kind}.png");
    let rec = ManifestRecord {
        index,
        split,
        left_path: name("left"),
        right_path: name("right"),
        fm_path: name("fm"),
        gt_mask_path: name("gt"),
        estimated_shift: curve.best_shift,
        low_confidence: curve.low_confidence,
        recipe: scene.recipe,
    };
    save_image(&scene.left, out_dir.join(&rec.left_path))?;
    save_image(&scene.right, out_dir.join(&rec.right_path))?;
    save_mask(&fm, out_dir.join(&rec.fm_path))?;
    save_mask(&scene.gt, out_dir.join(&rec.gt_mask_path))?;
    Ok(rec)
}

/// Writes `train` + `test` records (left, right, noisy FM, ground truth) and
/// `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    for dir in [&config.background_dir, &config.fence_dir].into_iter().flatten() {
        list_images(dir)?;
    }
    fs::create_dir_all(out_dir.join("train"))?;
    fs::create_dir_all(out_dir.join("test"))?;
    let total = (config.train + config.test) as u64;
    let mut records = (0..total)
        .into_par_iter()
        .map(|i| {
            let split = if (i as usize) < config.train { Split::Train } else { Split::Test };
            generate_record(config, out_dir, i, split)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.index);
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_jsonl()?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(fg: usize, bg: usize, w: usize, h: usize) -> SceneRecipe {
        SceneRecipe {
            background_path: "test".into(),
            fence_template_path: "test".into(),
            fg_shift: fg,
            bg_shift: bg,
            affine: Affine::IDENTITY,
            crop: Crop { x: 0, y: 0, width: w, height: h },
            color_jitter: ColorJitter::NONE,
            noise_p: 0.0,
            rng_seed: 1,
            fence: None,
        }
    }

    #[test]
    fn identity_augment() {
        let img = GrayImage::from_fn(9, 7, |r, c| (r * 20 + c * 3) as u8);
        let out = augment(&img, &Affine::IDENTITY, &Crop::full(&img), &ColorJitter::NONE).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_on_mid_gray() {
        let img = GrayImage::filled(4, 4, 128);
        let out = color_jitter(&img, &ColorJitter { brightness: 10.0, contrast: 1.0 });
        assert!(out.data().iter().all(|&v| v == 138));
    }

    #[test]
    fn rotate_ninety_matches_permutation() {
        let n = 11;
        let img = GrayImage::from_fn(n, n, |r, c| ((r * 31 + c * 17) % 256) as u8);
        let rot = affine_transform(&img, &Affine { rotation_deg: 90.0, scale: 1.0, tx: 0.0, ty: 0.0 });
        for r in 0..n {
            for c in 0..n {
                let want = img.get(c, n - 1 - r) as i32;
                assert!((rot.get(r, c) as i32 - want).abs() <= 1);
            }
        }
    }

    #[test]
    fn crop_out_of_bounds() {
        let img = GrayImage::filled(8, 8, 0);
        assert!(crop(&img, &Crop { x: 4, y: 0, width: 5, height: 2 }).is_err());
    }

    #[test]
    fn salt_pepper_cases() {
        let m = BinaryMask::from_fn(100, 100, |r, c| (r + c) % 3 == 0);
        assert_eq!(salt_pepper(&m, 0.0, 5).unwrap(), m);
        assert_eq!(salt_pepper(&m, 0.2, 5).unwrap(), salt_pepper(&m, 0.2, 5).unwrap());
        assert!(salt_pepper(&m, 0.6, 5).is_err());
        // binomial(10000, 0.1): mean 1000, sigma 30
        let noisy = salt_pepper(&m, 0.1, 9).unwrap();
        let flipped = m.data().iter().zip(noisy.data()).filter(|(a, b)| a != b).count();
        assert!((910..=1090).contains(&flipped), "{flipped}");
    }

    #[test]
    fn compose_degenerate_recipe() {
        let bg = GrayImage::from_fn(20, 10, |r, c| (r * 10 + c) as u8);
        let mask = BinaryMask::from_fn(20, 10, |_, c| c % 5 == 0);
        let tex = GrayImage::filled(20, 10, 255);
        let (l, r, gt) = compose_pair(&bg, &mask, &tex, &recipe(0, 0, 16, 10)).unwrap();
        assert_eq!(l, r);
        assert_eq!(gt, BinaryMask::from_fn(16, 10, |_, c| c % 5 == 0));
        assert!(recipe(0, 0, 16, 10).validate().is_err());
    }

    #[test]
    fn compose_displacements() {
        let mut bg = GrayImage::filled(40, 10, 100);
        bg.set(5, 22, 7); // landmark
        let mut mask = BinaryMask::zeros(40, 10);
        mask.set(2, 20, true);
        let tex = GrayImage::filled(40, 10, 250);
        let (l, r, _) = compose_pair(&bg, &mask, &tex, &recipe(7, 2, 30, 10)).unwrap();
        assert_eq!(r.get(2, 20), 250);
        assert_eq!(l.get(2, 13), 250);
        assert_eq!(r.get(5, 22), 7);
        assert_eq!(l.get(5, 20), 7);
    }

    #[test]
    fn compose_errors() {
        let bg = GrayImage::filled(20, 10, 0);
        let mask = BinaryMask::zeros(20, 10);
        let tex = GrayImage::filled(20, 10, 0);
        assert!(compose_pair(&bg, &mask, &tex, &recipe(5, 0, 18, 10)).is_err());
        let big = BinaryMask::zeros(30, 10);
        assert!(compose_pair(&bg, &big, &GrayImage::filled(30, 10, 0), &recipe(2, 0, 10, 10)).is_err());
    }

    #[test]
    fn gt_matches_fence_component_of_right() {
        let cfg = SynthConfig { width: 64, height: 64, fg_shift_max: 10, ..Default::default() };
        let s = sample_scene(&cfg, 3).unwrap();
        assert!(s.gt.count_ones() > 0);
        assert!(s.recipe.fg_shift > s.recipe.bg_shift);
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# comment\nwidth = 64\nfg-shift-max=9 # trailing\n\n").unwrap();
        let mut cfg = SynthConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!((cfg.width, cfg.fg_shift_max), (64, 9));
        assert!(cfg.apply(&parse_kv("bogus = 1").unwrap()).is_err());
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn fence_has_requested_period() {
        let spec = FenceSpec {
            style: FenceStyle::Rectangular,
            cell: 12.0,
            wire_width: 2.0,
            rotation_deg: 0.0,
            diamond_half_angle: 45.0,
            wobble: 0.0,
            intensity: 30,
            seed: 4,
        };
        let (mask, _) = procedural_fence(96, 48, &spec);
        // vertical wires: count columns fully covered
        let full_cols = (0..96).filter(|&c| (0..48).all(|r| mask.is_set(r, c))).count();
        assert!((14..=18).contains(&full_cols), "{full_cols}");
        for r in 0..48 {
            for c in 0..84 {
                assert_eq!(mask.is_set(r, c), mask.is_set(r, c + 12), "{r},{c}");
            }
        }
    }
}
