//! Stereo guidance mask generation.
//!
//! For every candidate shift `i` the left edge map is shifted and dual
//! subtracted from the right edge map. The result is transformed to a
//! DC-centered magnitude spectrum, band-passed, thresholded at `tau`, and the
//! angles of the surviving bins relative to the spectrum center are
//! histogrammed. The largest bucket is the maximum alignment score (MAS) for
//! that shift; the shift with the largest MAS is the fence parallax.
//!
//! Shift convention: `shift_horizontal(CL, i)` moves left-image content `i`
//! columns to the right, so a pair whose fence sits `s` columns further left
//! in L than in R is recovered as `best_shift = s`.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::edges::{canny, CannyParams};
use crate::error::{Error, Result};
use crate::imagecore::{clip_nonneg, shift_horizontal, BinaryMask, GrayImage};

/// Literal per-pixel `f(CR - f(CR - CL_i))` with `f` the non-negative clip.
///
/// For binary inputs this is exactly the pixelwise AND.
pub fn dual_subtract(cr: &BinaryMask, cl_shifted: &BinaryMask) -> Result<BinaryMask> {
    cr.same_dims(cl_shifted)?;
    let data = cr
        .data()
        .iter()
        .zip(cl_shifted.data())
        .map(|(&r, &l)| {
            let (r, l) = (r as i32, l as i32);
            clip_nonneg(r - clip_nonneg(r - l)) as u8
        })
        .collect();
    BinaryMask::new(cr.width(), cr.height(), data)
}

/// DC-centered magnitude spectrum. `width`/`height` are the (padded) transform
/// size; `source_width`/`source_height` record the mask it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub source_width: usize,
    pub source_height: usize,
    pub mag: Vec<f64>,
}

impl Spectrum {
    /// Center bin `(x0, y0) = (floor(w/2), floor(h/2))`.
    pub fn center(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.mag[y * self.width + x]
    }

    pub fn is_padded(&self) -> bool {
        self.width != self.source_width || self.height != self.source_height
    }

    /// log(1 + |H|) rendering scaled to [0,255], for inspection.
    pub fn to_log_image(&self) -> GrayImage {
        let logs: Vec<f64> = self.mag.iter().map(|m| m.ln_1p()).collect();
        let hi = logs.iter().cloned().fold(0.0, f64::max);
        GrayImage::from_fn(self.width, self.height, |r, c| {
            let v = logs[r * self.width + c];
            if hi > 0.0 {
                (v / hi * 255.0).round() as u8
            } else {
                0
            }
        })
    }
}

/// Reusable row/column FFT plans for one padded size.
struct SpectrumPlan {
    pw: usize,
    ph: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

impl SpectrumPlan {
    fn new(width: usize, height: usize) -> Self {
        let pw = width.next_power_of_two();
        let ph = height.next_power_of_two();
        let mut planner = FftPlanner::new();
        SpectrumPlan { pw, ph, row: planner.plan_fft_forward(pw), col: planner.plan_fft_forward(ph) }
    }

    fn run(&self, fm: &BinaryMask) -> Spectrum {
        let (pw, ph) = (self.pw, self.ph);
        let (w, h) = (fm.width(), fm.height());
        let mut buf = vec![Complex::new(0.0, 0.0); pw * ph];
        for r in 0..h {
            for c in 0..w {
                buf[r * pw + c].re = fm.get(r, c) as f64;
            }
        }
        self.row.process(&mut buf);
        let mut t = vec![Complex::new(0.0, 0.0); pw * ph];
        for r in 0..ph {
            for c in 0..pw {
                t[c * ph + r] = buf[r * pw + c];
            }
        }
        self.col.process(&mut t);
        // t holds the transform transposed: t[kx * ph + ky]
        let (cx, cy) = (pw / 2, ph / 2);
        let mut mag = vec![0.0; pw * ph];
        for kx in 0..pw {
            for ky in 0..ph {
                let x = (kx + cx) % pw;
                let y = (ky + cy) % ph;
                mag[y * pw + x] = t[kx * ph + ky].norm();
            }
        }
        Spectrum { width: pw, height: ph, source_width: w, source_height: h, mag }
    }
}

/// |DFT| of the {0,1} field, zero-padded to the next power of two per axis,
/// quadrant-swapped so DC sits at the center bin.
pub fn magnitude_spectrum(fm: &BinaryMask) -> Spectrum {
    SpectrumPlan::new(fm.width(), fm.height()).run(fm)
}

/// Zeroes bins whose Euclidean distance to the center is `< inner` or `> outer`.
pub fn bandpass(spec: &Spectrum, inner: f64, outer: f64) -> Result<Spectrum> {
    if !(inner < outer) || inner < 0.0 {
        return Err(Error::InvalidParam(format!(
            "bandpass needs 0 <= inner < outer, got inner={inner} outer={outer}"
        )));
    }
    let (x0, y0) = spec.center();
    let mut out = spec.clone();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let dx = x as f64 - x0 as f64;
            let dy = y as f64 - y0 as f64;
            let d = (dx * dx + dy * dy).sqrt();
            if d < inner || d > outer {
                out.mag[y * spec.width + x] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Angle in degrees in [0, 90] between a bin and the spectrum center.
#[inline]
pub fn bin_angle(x: usize, y: usize, x0: usize, y0: usize) -> f64 {
    let dx = (x as f64 - x0 as f64).abs();
    let dy = (y as f64 - y0 as f64).abs();
    if dx == 0.0 {
        90.0
    } else {
        (dy / dx).atan().to_degrees()
    }
}

/// Angles of all bins with magnitude above `tau`, restricted to the interior
/// `0 < x < w`, `0 < y < h`. The center bin is skipped.
pub fn alignment_angles(spec: &Spectrum, tau: f64) -> Vec<f64> {
    let (x0, y0) = spec.center();
    let mut out = Vec::new();
    for y in 1..spec.height {
        for x in 1..spec.width {
            if (x, y) == (x0, y0) {
                continue;
            }
            if spec.get(x, y) > tau {
                out.push(bin_angle(x, y, x0, y0));
            }
        }
    }
    out
}

/// Histogram of angles over [0, 90] in `num_buckets` equal buckets
/// (half-open, final bucket closed), returning the largest count.
pub fn mas(angles: &[f64], num_buckets: usize) -> usize {
    angle_histogram(angles, num_buckets).into_iter().max().unwrap_or(0)
}

pub fn angle_histogram(angles: &[f64], num_buckets: usize) -> Vec<usize> {
    let n = num_buckets.max(1);
    let width = 90.0 / n as f64;
    let mut hist = vec![0usize; n];
    for &a in angles {
        if !(0.0..=90.0).contains(&a) {
            continue;
        }
        let b = ((a / width).floor() as usize).min(n - 1);
        hist[b] += 1;
    }
    hist
}

/// Inclusive range of candidate shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftRange {
    pub min: i64,
    pub max: i64,
}

impl ShiftRange {
    pub fn new(min: i64, max: i64) -> Result<Self> {
        if min > max {
            return Err(Error::Empty(format!("shift range [{min}, {max}]")));
        }
        Ok(ShiftRange { min, max })
    }

    pub fn from_direction(dir: ShiftDir, max_shift: usize) -> Self {
        let m = max_shift as i64;
        match dir {
            ShiftDir::Right => ShiftRange { min: 0, max: m },
            ShiftDir::Left => ShiftRange { min: -m, max: 0 },
            ShiftDir::Both => ShiftRange { min: -m, max: m },
        }
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn iter(&self) -> impl Iterator<Item = i64> {
        self.min..=self.max
    }

    pub fn contains(&self, i: i64) -> bool {
        (self.min..=self.max).contains(&i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDir {
    Left,
    Right,
    Both,
}

impl std::str::FromStr for ShiftDir {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(ShiftDir::Left),
            "right" => Ok(ShiftDir::Right),
            "both" => Ok(ShiftDir::Both),
            other => Err(Error::InvalidParam(format!("shift direction must be left|right|both, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceParams {
    /// Magnitude threshold on unnormalized DFT magnitudes.
    pub tau: f64,
    pub num_buckets: usize,
    pub bandpass_inner: f64,
    /// `None` means `min(w, h) / 2` of the padded spectrum.
    pub bandpass_outer: Option<f64>,
    /// `None` means `[0, width / 4]`.
    pub search_range: Option<ShiftRange>,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            tau: 100.0,
            num_buckets: 90,
            bandpass_inner: 3.0,
            bandpass_outer: None,
            search_range: None,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParam(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.num_buckets == 0 {
            return Err(Error::InvalidParam("num_buckets must be >= 1".into()));
        }
        if self.bandpass_inner < 0.0 || self.bandpass_outer.is_some_and(|o| o <= self.bandpass_inner) {
            return Err(Error::InvalidParam(format!(
                "bandpass needs 0 <= inner < outer, got inner={} outer={:?}",
                self.bandpass_inner, self.bandpass_outer
            )));
        }
        Ok(())
    }

    pub fn range_for_width(&self, width: usize) -> ShiftRange {
        self.search_range
            .unwrap_or(ShiftRange { min: 0, max: (width / 4) as i64 })
    }
}

/// MAS as a function of shift, with the selected parallax.
#[derive(Debug, Clone, PartialEq)]
pub struct MasCurve {
    pub search_range: ShiftRange,
    /// `scores[k]` is the MAS at shift `search_range.min + k`.
    pub scores: Vec<usize>,
    pub best_shift: i64,
    /// Set when the curve is flat: max < 2 x median, or everything is zero.
    pub low_confidence: bool,
}

impl MasCurve {
    pub fn from_scores(search_range: ShiftRange, scores: Vec<usize>) -> Result<Self> {
        if scores.is_empty() || scores.len() != search_range.len() {
            return Err(Error::Empty("MAS curve".into()));
        }
        let shifts: Vec<i64> = search_range.iter().collect();
        // largest score, then smallest |i|, then smallest i
        let best = (0..scores.len())
            .min_by_key(|&k| (std::cmp::Reverse(scores[k]), shifts[k].abs(), shifts[k]))
            .expect("non-empty");
        let max = scores[best];
        let median = median(&scores);
        Ok(MasCurve {
            search_range,
            best_shift: shifts[best],
            low_confidence: max == 0 || (max as f64) < 2.0 * median,
            scores,
        })
    }

    pub fn score_at(&self, shift: i64) -> Option<usize> {
        if self.search_range.contains(shift) {
            Some(self.scores[(shift - self.search_range.min) as usize])
        } else {
            None
        }
    }

    pub fn max_score(&self) -> usize {
        self.scores.iter().copied().max().unwrap_or(0)
    }

    pub fn median_score(&self) -> f64 {
        median(&self.scores)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, usize)> + '_ {
        self.search_range.iter().zip(self.scores.iter().copied())
    }

    /// `shift,mas` CSV with header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shift,mas\n");
        for (i, m) in self.iter() {
            s.push_str(&format!("{i},{m}\n"));
        }
        s
    }
}

fn median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Intermediate products for one candidate shift.
#[derive(Debug, Clone)]
pub struct ShiftEvaluation {
    pub shift: i64,
    pub fm: BinaryMask,
    pub spectrum: Spectrum,
    pub mas: usize,
}

fn evaluate_shift(
    plan: &SpectrumPlan,
    cl: &BinaryMask,
    cr: &BinaryMask,
    shift: i64,
    params: &GuidanceParams,
) -> Result<ShiftEvaluation> {
    let fm = dual_subtract(cr, &shift_horizontal(cl, shift)?)?;
    let raw = plan.run(&fm);
    let outer = params
        .bandpass_outer
        .unwrap_or((raw.width.min(raw.height) / 2) as f64);
    let spectrum = bandpass(&raw, params.bandpass_inner, outer)?;
    let score = mas(&alignment_angles(&spectrum, params.tau), params.num_buckets);
    Ok(ShiftEvaluation { shift, fm, spectrum, mas: score })
}

/// Evaluates a single shift through the full spectrum pipeline.
pub fn evaluate(cl: &BinaryMask, cr: &BinaryMask, shift: i64, params: &GuidanceParams) -> Result<ShiftEvaluation> {
    cl.same_dims(cr)?;
    params.validate()?;
    evaluate_shift(&SpectrumPlan::new(cl.width(), cl.height()), cl, cr, shift, params)
}

/// Computes MAS for every shift in the search range and picks the argmax.
///
/// Shifts are scored in parallel; results are merged by index so the curve
/// does not depend on the thread count.
pub fn estimate_shift(cl: &BinaryMask, cr: &BinaryMask, params: &GuidanceParams) -> Result<MasCurve> {
    cl.same_dims(cr)?;
    params.validate()?;
    let width = cl.width();
    let range = params.range_for_width(width);
    if range.is_empty() {
        return Err(Error::Empty(format!("shift range [{}, {}]", range.min, range.max)));
    }
    if range.min <= -(width as i64) || range.max >= width as i64 {
        return Err(Error::InvalidShift {
            shift: if range.max >= width as i64 { range.max } else { range.min },
            width,
        });
    }
    let plan = SpectrumPlan::new(width, cl.height());
    let shifts: Vec<i64> = range.iter().collect();
    let scores = shifts
        .par_iter()
        .map(|&i| evaluate_shift(&plan, cl, cr, i, params).map(|e| e.mas))
        .collect::<Result<Vec<_>>>()?;
    MasCurve::from_scores(range, scores)
}

/// Full pipeline: Canny on both frames, shift estimation, and the guidance
/// mask at the selected shift.
pub fn guidance_mask(
    left: &GrayImage,
    right: &GrayImage,
    canny_params: &CannyParams,
    params: &GuidanceParams,
) -> Result<(BinaryMask, MasCurve)> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::DimensionMismatch(left.width(), left.height(), right.width(), right.height()));
    }
    let cl = canny(left, canny_params)?;
    let cr = canny(right, canny_params)?;
    guidance_from_edges(&cl, &cr, params)
}

/// Same as [`guidance_mask`] but starting from precomputed edge maps.
pub fn guidance_from_edges(cl: &BinaryMask, cr: &BinaryMask, params: &GuidanceParams) -> Result<(BinaryMask, MasCurve)> {
    let curve = estimate_shift(cl, cr, params)?;
    let fm = dual_subtract(cr, &shift_horizontal(cl, curve.best_shift)?)?;
    Ok((fm, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_subtract_truth_table() {
        for (r, l, want) in [(1, 1, 1), (1, 0, 0), (0, 1, 0), (0, 0, 0)] {
            let cr = BinaryMask::new(1, 1, vec![r]).unwrap();
            let cl = BinaryMask::new(1, 1, vec![l]).unwrap();
            assert_eq!(dual_subtract(&cr, &cl).unwrap().get(0, 0), want);
        }
    }

    #[test]
    fn dual_subtract_self_is_identity() {
        let m = BinaryMask::from_fn(9, 7, |r, c| (r * c + r) % 3 == 0);
        assert_eq!(dual_subtract(&m, &m).unwrap(), m);
    }

    #[test]
    fn dual_subtract_dim_mismatch() {
        let a = BinaryMask::zeros(3, 3);
        let b = BinaryMask::zeros(4, 3);
        assert!(matches!(dual_subtract(&a, &b), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn spectrum_of_zero_mask() {
        let s = magnitude_spectrum(&BinaryMask::zeros(16, 16));
        assert!(s.mag.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn spectrum_of_ones_is_dc_only() {
        let n = 16;
        let s = magnitude_spectrum(&BinaryMask::from_fn(n, n, |_, _| true));
        let (x0, y0) = s.center();
        assert_eq!((x0, y0), (8, 8));
        for y in 0..n {
            for x in 0..n {
                let m = s.get(x, y);
                if (x, y) == (x0, y0) {
                    assert!((m - (n * n) as f64).abs() < 1e-9);
                } else {
                    assert!(m < 1e-9, "{x},{y}: {m}");
                }
            }
        }
    }

    #[test]
    fn spectrum_pads_to_power_of_two() {
        let s = magnitude_spectrum(&BinaryMask::from_fn(20, 12, |r, c| (r + c) % 2 == 0));
        assert_eq!((s.width, s.height), (32, 16));
        assert_eq!((s.source_width, s.source_height), (20, 12));
        assert!(s.is_padded());
    }

    #[test]
    fn bandpass_cases() {
        let n = 32;
        let dc = magnitude_spectrum(&BinaryMask::from_fn(n, n, |_, _| true));
        assert!(bandpass(&dc, 3.0, 16.0).unwrap().mag.iter().all(|&m| m == 0.0));

        let mut peak = Spectrum { width: 64, height: 64, source_width: 64, source_height: 64, mag: vec![0.0; 4096] };
        peak.mag[32 * 64 + 42] = 7.0;
        let kept = bandpass(&peak, 3.0, 50.0).unwrap();
        assert_eq!(kept.get(42, 32), 7.0);

        let any = magnitude_spectrum(&BinaryMask::from_fn(n, n, |r, c| (r * 7 + c * 3) % 5 == 0));
        let max_r = ((n / 2) as f64) * 2f64.sqrt();
        assert_eq!(bandpass(&any, 0.0, max_r).unwrap(), any);
        assert!(bandpass(&any, 5.0, 5.0).is_err());
    }

    fn single_bin(x: usize, y: usize) -> Spectrum {
        let mut s = Spectrum { width: 32, height: 32, source_width: 32, source_height: 32, mag: vec![0.0; 1024] };
        s.mag[y * 32 + x] = 500.0;
        s
    }

    #[test]
    fn angles_of_single_bins() {
        assert_eq!(alignment_angles(&single_bin(21, 16), 100.0), vec![0.0]);
        assert_eq!(alignment_angles(&single_bin(16, 21), 100.0), vec![90.0]);
        let a = alignment_angles(&single_bin(19, 19), 100.0);
        assert_eq!(a.len(), 1);
        assert!((a[0] - 45.0).abs() < 1e-12);
        // below threshold and on the excluded border row
        assert!(alignment_angles(&single_bin(21, 16), 500.0).is_empty());
        assert!(alignment_angles(&single_bin(21, 0), 100.0).is_empty());
    }

    #[test]
    fn mas_cases() {
        assert_eq!(mas(&[], 90), 0);
        assert_eq!(mas(&[0.1, 0.5, 0.9, 45.0], 90), 3);
        assert_eq!(mas(&[90.0], 90), 1);
        assert_eq!(angle_histogram(&[90.0, 89.0, 88.999], 90)[89], 2);
    }

    #[test]
    fn curve_tie_break_prefers_smallest_magnitude() {
        let c = MasCurve::from_scores(ShiftRange::new(-3, 3).unwrap(), vec![5, 1, 1, 1, 1, 1, 5]).unwrap();
        assert_eq!(c.best_shift, -3);
        let c = MasCurve::from_scores(ShiftRange::new(-3, 3).unwrap(), vec![5, 1, 1, 1, 1, 5, 5]).unwrap();
        assert_eq!(c.best_shift, 2);
    }

    #[test]
    fn curve_confidence_flag() {
        let r = ShiftRange::new(0, 4).unwrap();
        assert!(MasCurve::from_scores(r, vec![0; 5]).unwrap().low_confidence);
        assert!(MasCurve::from_scores(r, vec![3, 4, 5, 4, 3]).unwrap().low_confidence);
        assert!(!MasCurve::from_scores(r, vec![1, 1, 9, 1, 1]).unwrap().low_confidence);
    }

    #[test]
    fn curve_csv() {
        let c = MasCurve::from_scores(ShiftRange::new(0, 1).unwrap(), vec![2, 7]).unwrap();
        assert_eq!(c.to_csv(), "shift,mas\n0,2\n1,7\n");
    }

    #[test]
    fn identity_pair_picks_zero() {
        let m = BinaryMask::from_fn(64, 64, |_, c| c % 8 == 0);
        let params = GuidanceParams { search_range: Some(ShiftRange::new(0, 10).unwrap()), ..Default::default() };
        let curve = estimate_shift(&m, &m, &params).unwrap();
        assert_eq!(curve.best_shift, 0);
    }

    #[test]
    fn empty_or_oversized_range_errors() {
        let m = BinaryMask::zeros(16, 16);
        let p = GuidanceParams { search_range: Some(ShiftRange { min: 3, max: 2 }), ..Default::default() };
        assert!(matches!(estimate_shift(&m, &m, &p), Err(Error::Empty(_))));
        let p = GuidanceParams { search_range: Some(ShiftRange { min: 0, max: 16 }), ..Default::default() };
        assert!(matches!(estimate_shift(&m, &m, &p), Err(Error::InvalidShift { .. })));
    }

    #[test]
    fn identical_frames_give_canny_edges() {
        let img = GrayImage::from_fn(64, 64, |r, c| if (c / 6 + r / 9) % 2 == 0 { 40 } else { 210 });
        let (fm, curve) = guidance_mask(&img, &img, &CannyParams::default(), &GuidanceParams::default()).unwrap();
        assert_eq!(curve.best_shift, 0);
        assert_eq!(fm, canny(&img, &CannyParams::default()).unwrap());
    }
}
