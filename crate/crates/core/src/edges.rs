//! Canny edge detection producing the binary edge maps fed to dual subtraction.
//!
//! Intensities are on the 8-bit [0,255] scale and the Sobel kernels are
//! unnormalized, so an ideal step of height `d` has magnitude `4d`. Thresholds
//! are therefore directly comparable with other 8-bit Canny implementations.
//!
//! The Gaussian kernel is quantized to 16-bit fixed point with weights that
//! sum to exactly 65536. Every intermediate is then an exact dyadic rational
//! in `f64`, which makes the detector exactly covariant under intensity
//! offsets and free of platform-dependent ties in non-maximum suppression.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, Field, GrayImage};

const KERNEL_ONE: i64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { gaussian_sigma: 1.4, low_threshold: 30.0, high_threshold: 90.0 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidParam(format!("sigma must be > 0, got {}", self.gaussian_sigma)));
        }
        if !(self.low_threshold > 0.0 && self.low_threshold <= self.high_threshold) {
            return Err(Error::InvalidParam(format!(
                "thresholds must satisfy 0 < low <= high, got low={} high={}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Fixed-point kernel summing to exactly `KERNEL_ONE`; rounding residue goes to the center tap.
fn quantized_kernel(sigma: f64) -> Result<Vec<i64>> {
    let k = gaussian_kernel(sigma)?;
    let mut q: Vec<i64> = k.iter().map(|v| (v * KERNEL_ONE as f64).round() as i64).collect();
    let residue = KERNEL_ONE - q.iter().sum::<i64>();
    let mid = q.len() / 2;
    q[mid] += residue;
    Ok(q)
}

/// Separable Gaussian blur with clamp-to-border replication.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<Field> {
    let q = quantized_kernel(sigma)?;
    let radius = (q.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let src = img.data();

    let mut horiz = vec![0i64; w * h];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0i64;
            for (k, &wk) in q.iter().enumerate() {
                let cc = (c as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += wk * row[cc] as i64;
            }
            horiz[r * w + c] = acc;
        }
    }

    let scale = 1.0 / (KERNEL_ONE * KERNEL_ONE) as f64;
    let mut out = Field::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0i64;
            for (k, &wk) in q.iter().enumerate() {
                let rr = (r as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += wk * horiz[rr * w + c];
            }
            out.data[r * w + c] = acc as f64 * scale;
        }
    }
    Ok(out)
}

/// Gradient orientation quantized for non-maximum suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Orientation {
    /// Quantizes `atan2(gy, gx)` (y pointing down) into four 45-degree bins.
    pub fn from_gradient(gx: f64, gy: f64) -> Self {
        let mut a = gy.atan2(gx).to_degrees();
        if a < 0.0 {
            a += 180.0;
        }
        if !(22.5..157.5).contains(&a) {
            Orientation::Deg0
        } else if a < 67.5 {
            Orientation::Deg45
        } else if a < 112.5 {
            Orientation::Deg90
        } else {
            Orientation::Deg135
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Orientation::Deg0 => 0,
            Orientation::Deg45 => 45,
            Orientation::Deg90 => 90,
            Orientation::Deg135 => 135,
        }
    }

    /// (row, col) step along the gradient direction.
    fn step(self) -> (isize, isize) {
        match self {
            Orientation::Deg0 => (0, 1),
            Orientation::Deg45 => (1, 1),
            Orientation::Deg90 => (1, 0),
            Orientation::Deg135 => (1, -1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub gx: Field,
    pub gy: Field,
    pub magnitude: Field,
    pub orientation: Vec<Orientation>,
}

/// Unnormalized 3x3 Sobel gradients with clamped borders and L2 magnitude.
pub fn sobel_gradients(img: &Field) -> Result<Gradients> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::TooSmall { width: w, height: h, min: 3 });
    }
    let at = |r: isize, c: isize| -> f64 {
        let rr = r.clamp(0, h as isize - 1) as usize;
        let cc = c.clamp(0, w as isize - 1) as usize;
        img.data[rr * w + cc]
    };
    let mut gx = Field::zeros(w, h);
    let mut gy = Field::zeros(w, h);
    let mut magnitude = Field::zeros(w, h);
    let mut orientation = Vec::with_capacity(w * h);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let dx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let dy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let i = r as usize * w + c as usize;
            gx.data[i] = dx;
            gy.data[i] = dy;
            magnitude.data[i] = (dx * dx + dy * dy).sqrt();
            orientation.push(Orientation::from_gradient(dx, dy));
        }
    }
    Ok(Gradients { gx, gy, magnitude, orientation })
}

/// Thins gradient ridges to one pixel; the outer frame is always suppressed.
///
/// A pixel survives if it is strictly greater than its neighbor against the
/// gradient and at least equal to the one along it, so symmetric plateaus
/// keep exactly one pixel.
pub fn non_maximum_suppression(g: &Gradients) -> Field {
    let (w, h) = (g.magnitude.width, g.magnitude.height);
    let mut out = Field::zeros(w, h);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let i = r * w + c;
            let m = g.magnitude.data[i];
            if m <= 0.0 {
                continue;
            }
            let (dr, dc) = g.orientation[i].step();
            let fwd = g.magnitude.get((r as isize + dr) as usize, (c as isize + dc) as usize);
            let back = g.magnitude.get((r as isize - dr) as usize, (c as isize - dc) as usize);
            if m > back && m >= fwd {
                out.data[i] = m;
            }
        }
    }
    out
}

/// Double-threshold hysteresis as a flood fill from strong pixels over
/// 8-connected weak pixels.
pub fn hysteresis(suppressed: &Field, low: f64, high: f64) -> BinaryMask {
    let (w, h) = (suppressed.width, suppressed.height);
    let mut out = BinaryMask::zeros(w, h);
    let mut queue = VecDeque::new();
    for (i, &m) in suppressed.data.iter().enumerate() {
        if m >= high && m > 0.0 {
            out.set(i / w, i % w, true);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                let j = rr * w + cc;
                if !out.is_set(rr, cc) && suppressed.data[j] >= low && suppressed.data[j] > 0.0 {
                    out.set(rr, cc, true);
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

/// Full Canny pipeline: blur, Sobel, non-maximum suppression, hysteresis.
pub fn canny(img: &GrayImage, params: &CannyParams) -> Result<BinaryMask> {
    params.validate()?;
    let blurred = gaussian_blur(img, params.gaussian_sigma)?;
    let grads = sobel_gradients(&blurred)?;
    let thin = non_maximum_suppression(&grads);
    Ok(hysteresis(&thin, params.low_threshold, params.high_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn to_field(img: &GrayImage) -> Field {
        Field {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let img = GrayImage::filled(9, 7, 137);
        let b = gaussian_blur(&img, 1.4).unwrap();
        assert!(b.data.iter().all(|&v| v == 137.0));
    }

    #[test]
    fn blur_impulse_is_gaussian_bump() {
        let mut img = GrayImage::filled(21, 21, 0);
        img.set(10, 10, 255);
        let b = gaussian_blur(&img, 1.0).unwrap();
        let sum: f64 = b.data.iter().sum();
        assert!((sum - 255.0).abs() < 1e-6, "sum {sum}");
        // separable product of the normalized 1D kernel, up to 16-bit quantization
        let k = gaussian_kernel(1.0).unwrap();
        for dr in -3i64..=3 {
            for dc in -3i64..=3 {
                let want = 255.0 * k[(dr + 3) as usize] * k[(dc + 3) as usize];
                let got = b.get((10 + dr) as usize, (10 + dc) as usize);
                assert!((want - got).abs() < 255.0 * 4e-5, "{dr},{dc}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn kernel_center_weight_sigma_one() {
        // 1 / sum_{k=-3..3} exp(-k^2/2)
        let direct: f64 = 1.0 / (-3i32..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).sum::<f64>();
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.len(), 7);
        assert!((k[3] - direct).abs() < 1e-12);
        assert!((k[3] - 0.399_050_2).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        assert!(gaussian_blur(&GrayImage::filled(3, 3, 0), 0.0).is_err());
    }

    #[test]
    fn sobel_constant_is_zero() {
        let g = sobel_gradients(&to_field(&GrayImage::filled(5, 5, 90))).unwrap();
        assert!(g.magnitude.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sobel_vertical_step() {
        let img = GrayImage::from_fn(8, 6, |_, c| if c >= 4 { 255 } else { 0 });
        let g = sobel_gradients(&to_field(&img)).unwrap();
        let max_gx = g.gx.data.iter().cloned().fold(0.0, f64::max);
        for r in 0..6 {
            assert_eq!(g.gx.get(r, 3), max_gx);
            assert_eq!(g.gx.get(r, 4), max_gx);
            assert_eq!(g.gy.get(r, 3), 0.0);
            assert_eq!(g.gy.get(r, 4), 0.0);
            assert_eq!(g.gx.get(r, 0), 0.0);
        }
        assert_eq!(max_gx, 4.0 * 255.0);
    }

    #[test]
    fn sobel_diagonal_ramp_orientation() {
        // I = 10 (x + y): gx = gy = 10 * (1+2+1) * 2 = 80 at interior pixels
        let img = GrayImage::from_fn(6, 6, |r, c| (10 * (r + c)) as u8);
        let g = sobel_gradients(&to_field(&img)).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(g.gx.get(r, c), 80.0);
                assert_eq!(g.gy.get(r, c), 80.0);
                assert_eq!(g.orientation[r * 6 + c], Orientation::Deg45);
            }
        }
    }

    #[test]
    fn sobel_too_small() {
        let f = Field::zeros(2, 5);
        assert!(matches!(sobel_gradients(&f), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn orientation_bins() {
        assert_eq!(Orientation::from_gradient(1.0, 0.0), Orientation::Deg0);
        assert_eq!(Orientation::from_gradient(-1.0, 0.0), Orientation::Deg0);
        assert_eq!(Orientation::from_gradient(0.0, 1.0), Orientation::Deg90);
        assert_eq!(Orientation::from_gradient(-1.0, 1.0), Orientation::Deg135);
        assert_eq!(Orientation::from_gradient(1.0, -1.0), Orientation::Deg135);
    }

    #[test]
    fn canny_constant_is_empty() {
        let m = canny(&GrayImage::filled(16, 16, 77), &CannyParams::default()).unwrap();
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn canny_vertical_step_single_column() {
        let img = GrayImage::from_fn(20, 16, |_, c| if c >= 10 { 240 } else { 10 });
        let m = canny(&img, &CannyParams::default()).unwrap();
        let cols: Vec<usize> = (0..20).filter(|&c| (0..16).any(|r| m.is_set(r, c))).collect();
        assert_eq!(cols, vec![9]);
        // frame rows are suppressed, every interior row carries the edge
        for r in 1..15 {
            assert!(m.is_set(r, 9));
        }
    }

    #[test]
    fn canny_rejects_bad_params() {
        let img = GrayImage::filled(8, 8, 0);
        let bad = CannyParams { gaussian_sigma: 1.0, low_threshold: 50.0, high_threshold: 10.0 };
        assert!(canny(&img, &bad).is_err());
        let bad = CannyParams { gaussian_sigma: 1.0, low_threshold: 0.0, high_threshold: 10.0 };
        assert!(canny(&img, &bad).is_err());
    }

    #[test]
    fn hysteresis_keeps_weak_chain_touching_strong() {
        let mut f = Field::zeros(7, 3);
        f.set(1, 1, 100.0);
        f.set(1, 2, 40.0);
        f.set(1, 3, 40.0);
        f.set(1, 5, 40.0); // isolated weak pixel
        let m = hysteresis(&f, 30.0, 90.0);
        assert!(m.is_set(1, 1) && m.is_set(1, 2) && m.is_set(1, 3));
        assert!(!m.is_set(1, 5));
    }
}
