//! Image containers and the pixel-exact primitives shared by every stage.
//!
//! Masks hold `{0,1}` in memory and `{0,255}` on disk. Grayscale conversion
//! of color inputs uses the fixed luma weights 0.299 / 0.587 / 0.114 with
//! round-half-away-from-zero, so loads are reproducible across platforms.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width >= 1 && height >= 1, "empty image");
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width >= 1 && height >= 1, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }
}

/// Binary mask with every element exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!("mask value {v} is not 0 or 1")));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "empty mask");
        BinaryMask { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width >= 1 && height >= 1, "empty mask");
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Renders the mask as a {0,255} grayscale image.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }

    /// Binary dilation with a (2r+1)x(2r+1) square structuring element.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        BinaryMask::from_fn(w, h, |r, c| {
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius).min(h - 1);
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(w - 1);
            (r0..=r1).any(|rr| (c0..=c1).any(|cc| self.is_set(rr, cc)))
        })
    }
}

/// Real-valued 2D field used for intermediates (blurred images, maps, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(width: usize, height: usize) -> Self {
        Field { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Linearly rescales to [0,255] (constant fields map to 0).
    pub fn to_gray_normalized(&self) -> GrayImage {
        let lo = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        GrayImage { width: self.width, height: self.height, data }
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParam(format!("dimensions must be positive, got {width}x{height}")));
    }
    if len != width * height {
        return Err(Error::InvalidParam(format!(
            "data length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

/// The rectifier `x if x > 0 else 0` used by dual subtraction.
#[inline]
pub fn clip_nonneg(x: i32) -> i32 {
    if x > 0 {
        x
    } else {
        0
    }
}

/// Shifts a mask horizontally by `shift` columns: `out[r][c] = in[r][c - shift]`.
///
/// Vacated columns are zero-filled; nothing wraps around.
pub fn shift_horizontal(mask: &BinaryMask, shift: i64) -> Result<BinaryMask> {
    let w = mask.width;
    if shift.unsigned_abs() as usize >= w {
        return Err(Error::InvalidShift { shift, width: w });
    }
    let mut out = BinaryMask::zeros(w, mask.height);
    let s = shift.unsigned_abs() as usize;
    for r in 0..mask.height {
        let src = &mask.data[r * w..(r + 1) * w];
        let dst = &mut out.data[r * w..(r + 1) * w];
        if shift >= 0 {
            dst[s..].copy_from_slice(&src[..w - s]);
        } else {
            dst[..w - s].copy_from_slice(&src[s..]);
        }
    }
    Ok(out)
}

/// Pixel is 1 iff intensity is strictly above `thr`.
pub fn binarize(img: &GrayImage, thr: u8) -> BinaryMask {
    BinaryMask {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| (v > thr) as u8).collect(),
    }
}

/// Luma conversion with the fixed 0.299/0.587/0.114 weights.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads an 8-bit PNG (any color type, converted to luma) or a binary PGM (P5).
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::UnsupportedFormat(format!(
            "{}: netpbm variant P{} (only P5 is supported)",
            path.display(),
            bytes[1] as char
        )))
    } else {
        Err(Error::UnsupportedFormat(path.display().to_string()))
    }
}

/// Loads an image and binarizes it at 127 (so {0,255} files map to {0,1}).
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(binarize(&load_image(path)?, 127))
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        match e {
            image::ImageError::Decoding(_) => Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
            image::ImageError::Unsupported(_) => Error::UnsupportedFormat(e.to_string()),
            other => Error::Codec(other.to_string()),
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        image::DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        other => other.to_rgb8().pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
    };
    GrayImage::new(w, h, data)
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(malformed("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: PGM maxval {maxval} (only 8-bit is supported)",
            path.display()
        )));
    }
    let body = &bytes[pos..];
    if body.len() < w * h {
        return Err(malformed("pixel data shorter than header dimensions"));
    }
    let data = body[..w * h]
        .iter()
        .map(|&v| {
            if maxval == 255 {
                v
            } else {
                ((v.min(maxval as u8) as f64) * 255.0 / maxval as f64).round() as u8
            }
        })
        .collect();
    GrayImage::new(w, h, data)
}

/// Saves a grayscale image; the format follows the extension (`.png` or `.pgm`).
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => {
            let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
                .ok_or_else(|| Error::Codec("buffer size mismatch".into()))?;
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::Io(io),
                    other => Error::Codec(other.to_string()),
                })
        }
        "pgm" => {
            let mut f = fs::File::create(path)?;
            write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
            f.write_all(&img.data)?;
            Ok(())
        }
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: expected .png or .pgm extension",
            path.display()
        ))),
    }
}

/// Saves a mask as {0,255} grayscale.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.to_gray(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_branches() {
        assert_eq!(clip_nonneg(5), 5);
        assert_eq!(clip_nonneg(-3), 0);
        assert_eq!(clip_nonneg(0), 0);
    }

    #[test]
    fn shift_moves_single_pixel() {
        let mut m = BinaryMask::zeros(8, 5);
        m.set(2, 3, true);
        let s = shift_horizontal(&m, 2).unwrap();
        assert_eq!(s.count_ones(), 1);
        assert!(s.is_set(2, 5));
    }

    #[test]
    fn shift_zero_is_identity() {
        let m = BinaryMask::from_fn(7, 4, |r, c| (r * 3 + c) % 4 == 0);
        assert_eq!(shift_horizontal(&m, 0).unwrap(), m);
    }

    #[test]
    fn shift_does_not_wrap() {
        let mut m = BinaryMask::zeros(6, 3);
        m.set(0, 5, true);
        assert_eq!(shift_horizontal(&m, 1).unwrap().count_ones(), 0);
        let mut m = BinaryMask::zeros(6, 3);
        m.set(1, 0, true);
        assert_eq!(shift_horizontal(&m, -1).unwrap().count_ones(), 0);
    }

    #[test]
    fn shift_rejects_width_or_more() {
        let m = BinaryMask::zeros(4, 4);
        assert!(matches!(shift_horizontal(&m, 4), Err(Error::InvalidShift { .. })));
        assert!(matches!(shift_horizontal(&m, -4), Err(Error::InvalidShift { .. })));
        assert!(shift_horizontal(&m, -3).is_ok());
    }

    #[test]
    fn binarize_cases() {
        assert_eq!(binarize(&GrayImage::filled(3, 3, 0), 0).count_ones(), 0);
        assert_eq!(binarize(&GrayImage::filled(3, 3, 255), 0).count_ones(), 9);
        let checker = GrayImage::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 255 } else { 0 });
        let m = binarize(&checker, 128);
        assert_eq!(m, BinaryMask::from_fn(4, 4, |r, c| (r + c) % 2 == 0));
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn luma_weights() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(255, 0, 0), 76); // 76.245
        assert_eq!(luma(0, 255, 0), 150); // 149.685
        assert_eq!(luma(0, 0, 255), 29); // 29.07
    }

    #[test]
    fn dilate_square() {
        let mut m = BinaryMask::zeros(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate(1).count_ones(), 9);
        assert_eq!(m.dilate(0), m);
    }
}
