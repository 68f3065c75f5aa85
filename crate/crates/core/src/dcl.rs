//! Directional connectivity loss.
//!
//! Each output pixel's 5x5 neighborhood is matched against eight line-shaped
//! features through the center; the best match is the pixel's connectivity
//! response. The loss weights that response by the pixel's own prediction
//! and takes the negative mean, so predicted pixels only earn credit for
//! neighbors lying on a common line through them. A connected wire lowers
//! the loss; the same mass scattered as isolated dots does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::Field;

pub const NUM_FEATURES: usize = 8;
const RADIUS: isize = 2;

/// One 5x5 feature; `cells[row][col]` with row 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalFeature {
    pub cells: [[u8; 5]; 5],
    /// Nominal angle in degrees, counter-clockwise from horizontal.
    pub angle_label: f64,
}

impl DirectionalFeature {
    /// (row, col) offsets of the set cells relative to the center.
    pub fn offsets(&self) -> [(isize, isize); 5] {
        let mut out = [(0, 0); 5];
        let mut k = 0;
        for r in 0..5 {
            for c in 0..5 {
                if self.cells[r][c] == 1 {
                    out[k] = (r as isize - RADIUS, c as isize - RADIUS);
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, 5);
        out
    }
}

/// Rounds half away from zero so the rasterized lines are point-symmetric.
fn round_half_away(v: f64) -> isize {
    v.round() as isize
}

fn feature_from(angle_label: f64, point: impl Fn(isize) -> (isize, isize)) -> DirectionalFeature {
    let mut cells = [[0u8; 5]; 5];
    for t in -RADIUS..=RADIUS {
        // (dx, dy) with y pointing up
        let (dx, dy) = point(t);
        cells[(RADIUS - dy) as usize][(RADIUS + dx) as usize] = 1;
    }
    DirectionalFeature { cells, angle_label }
}

/// The fixed bank of eight 5-cell lines through the center, ordered
/// 0, 26.6, 45, 63.4, 90, 116.6, 135, 153.4 degrees.
pub fn directional_features() -> [DirectionalFeature; NUM_FEATURES] {
    let half = |t: isize| round_half_away(t as f64 / 2.0);
    [
        feature_from(0.0, |t| (t, 0)),
        feature_from(26.565, |t| (t, half(t))),
        feature_from(45.0, |t| (t, t)),
        feature_from(63.435, |t| (half(t), t)),
        feature_from(90.0, |t| (0, t)),
        feature_from(116.565, |t| (-half(t), t)),
        feature_from(135.0, |t| (t, -t)),
        feature_from(153.435, |t| (t, -half(t))),
    ]
}

fn feature_offsets() -> [[(isize, isize); 5]; NUM_FEATURES] {
    let f = directional_features();
    std::array::from_fn(|k| f[k].offsets())
}

/// Generator output `y` with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "soft mask of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!("soft mask value {v} outside [0,1]")));
        }
        Ok(SoftMask { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SoftMask { width, height, values: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        assert!((0.0..=1.0).contains(&v), "soft mask value {v} outside [0,1]");
        self.values[row * self.width + col] = v;
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            0.0
        } else {
            self.values[r as usize * self.width + c as usize]
        }
    }
}

/// Per-feature window sums at one pixel.
#[inline]
fn window_sums(y: &SoftMask, offsets: &[[(isize, isize); 5]; NUM_FEATURES], r: isize, c: isize) -> [f64; NUM_FEATURES] {
    std::array::from_fn(|k| offsets[k].iter().map(|&(dr, dc)| y.at(r + dr, c + dc)).sum())
}

/// Index of the best feature, lowest index on ties.
#[inline]
fn argmax(sums: &[f64; NUM_FEATURES]) -> usize {
    let mut best = 0;
    for k in 1..NUM_FEATURES {
        if sums[k] > sums[best] {
            best = k;
        }
    }
    best
}

/// Best-feature score at every pixel (zero padding outside the image).
pub fn connectivity_map(y: &SoftMask) -> Field {
    let offsets = feature_offsets();
    let w = y.width;
    let data: Vec<f64> = (0..y.height)
        .into_par_iter()
        .flat_map_iter(|r| {
            let offsets = &offsets;
            (0..w).map(move |c| {
                let s = window_sums(y, offsets, r as isize, c as isize);
                s[argmax(&s)]
            })
        })
        .collect();
    Field { width: w, height: y.height, data }
}

/// Argmax feature index per pixel.
pub fn selected_features(y: &SoftMask) -> Vec<usize> {
    let offsets = feature_offsets();
    let w = y.width;
    (0..y.height)
        .into_par_iter()
        .flat_map_iter(|r| {
            let offsets = &offsets;
            (0..w).map(move |c| argmax(&window_sums(y, offsets, r as isize, c as isize)))
        })
        .collect()
}

/// `-1/(W*H) * sum_p y[p] * connectivity_map(y)[p]`.
pub fn dcl(y: &SoftMask) -> f64 {
    let map = connectivity_map(y);
    let total: f64 = y.values.iter().zip(&map.data).map(|(a, b)| a * b).sum();
    -total / (y.width * y.height) as f64
}

/// Loss value and subgradient in one pass.
///
/// For pixel `p`: `-1/(W*H) * (map[p] + sum_q y[q] * [p on the selected
/// feature of q])`, ties resolved to the lowest feature index exactly as in
/// the forward pass. The scatter runs sequentially in pixel order, so the
/// result does not depend on the thread count.
pub fn dcl_with_gradient(y: &SoftMask) -> (f64, Field) {
    let offsets = feature_offsets();
    let (w, h) = (y.width, y.height);
    let per_pixel: Vec<(usize, f64)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|r| {
            let offsets = &offsets;
            (0..w).map(move |c| {
                let s = window_sums(y, offsets, r as isize, c as isize);
                let k = argmax(&s);
                (k, s[k])
            })
        })
        .collect();
    let unit = -1.0 / (w * h) as f64;
    let mut grad = Field::zeros(w, h);
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (k, response) = per_pixel[i];
            let yq = y.values[i];
            total += yq * response;
            grad.data[i] += unit * response;
            if yq == 0.0 {
                continue;
            }
            for &(dr, dc) in &offsets[k] {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                    grad.data[rr as usize * w + cc as usize] += unit * yq;
                }
            }
        }
    }
    (-total / (w * h) as f64, grad)
}

/// Subgradient of [`dcl`] with respect to every pixel of `y`.
pub fn dcl_gradient(y: &SoftMask) -> Field {
    dcl_with_gradient(y).1
}

/// Smallest gap between the best and second-best feature sum over all
/// windows that contain `(row, col)`.
pub fn argmax_margin_at(y: &SoftMask, row: usize, col: usize) -> f64 {
    let offsets = feature_offsets();
    let mut margin = f64::INFINITY;
    for r in row as isize - RADIUS..=row as isize + RADIUS {
        for c in col as isize - RADIUS..=col as isize + RADIUS {
            if r < 0 || c < 0 || r >= y.height as isize || c >= y.width as isize {
                continue;
            }
            let mut s = window_sums(y, &offsets, r, c);
            s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            margin = margin.min(s[0] - s[1]);
        }
    }
    margin
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub masks: usize,
    pub tested: usize,
    pub passed: usize,
    pub skipped_non_strict: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.tested == 0 {
            0.0
        } else {
            self.passed as f64 / self.tested as f64
        }
    }
}

/// Relative error with both-near-zero treated as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central-difference check of [`dcl_gradient`] on random soft masks.
///
/// Coordinates where some containing window has an argmax margin `<= 2 eps`
/// are skipped, since the loss is not differentiable there.
pub fn gradcheck(seed: u64, masks: usize, size: usize, eps: f64, tol: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { masks, tested: 0, passed: 0, skipped_non_strict: 0, max_rel_err: 0.0 };
    for _ in 0..masks {
        // keep values away from the [0,1] bounds so +-eps stays valid
        let values: Vec<f64> = (0..size * size).map(|_| rng.random_range(0.05..0.95)).collect();
        let y = SoftMask::new(size, size, values).expect("valid");
        let grad = dcl_gradient(&y);
        for r in 0..size {
            for c in 0..size {
                if argmax_margin_at(&y, r, c) <= 2.0 * eps {
                    report.skipped_non_strict += 1;
                    continue;
                }
                let mut plus = y.clone();
                let mut minus = y.clone();
                plus.values[r * size + c] += eps;
                minus.values[r * size + c] -= eps;
                let numeric = (dcl(&plus) - dcl(&minus)) / (2.0 * eps);
                let err = relative_error(grad.get(r, c), numeric);
                report.tested += 1;
                report.max_rel_err = report.max_rel_err.max(err);
                if err <= tol {
                    report.passed += 1;
                }
            }
        }
    }
    report
}
