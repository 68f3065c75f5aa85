//! Pixelwise precision / recall / F-measure with mean and population
//! standard deviation aggregation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Strict pixelwise comparison; fence (1) is the positive class.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    pred.same_dims(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Like [`confusion`], but a predicted pixel within `tolerance` (Chebyshev)
/// of a ground-truth pixel counts as a hit, and vice versa.
pub fn confusion_with_tolerance(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<ConfusionCounts> {
    if tolerance == 0 {
        return confusion(pred, gt);
    }
    pred.same_dims(gt)?;
    let gt_d = gt.dilate(tolerance);
    let pred_d = pred.dilate(tolerance);
    let mut c = ConfusionCounts::default();
    for i in 0..pred.data().len() {
        let (p, g) = (pred.data()[i], gt.data()[i]);
        match (p, g) {
            (1, _) if gt_d.data()[i] == 1 => c.tp += 1,
            (1, _) => c.fp += 1,
            (0, 1) if pred_d.data()[i] == 1 => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Some ratio was 0/0 and was reported as 0.
    pub degenerate: bool,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn prf(c: &ConfusionCounts) -> Prf {
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
    let degenerate = p.is_none() || r.is_none() || precision + recall == 0.0;
    Prf { precision, recall, f_measure: f_measure(precision, recall), degenerate }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> MeanStd {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub per_image: Vec<Prf>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_measure: MeanStd,
}

/// Mean and population standard deviation per metric.
pub fn aggregate(per_image: &[Prf]) -> Result<MetricSummary> {
    if per_image.is_empty() {
        return Err(Error::Empty("metric list".into()));
    }
    let col = |f: fn(&Prf) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    Ok(MetricSummary {
        per_image: per_image.to_vec(),
        precision: mean_std(&col(|m| m.precision)),
        recall: mean_std(&col(|m| m.recall)),
        f_measure: mean_std(&col(|m| m.f_measure)),
    })
}

/// Splits `per_image` into `k` contiguous folds (sizes differ by at most
/// one), takes each fold's mean, and aggregates those means.
pub fn aggregate_folds(per_image: &[Prf], k: usize) -> Result<MetricSummary> {
    if k == 0 || per_image.len() < k {
        return Err(Error::InvalidParam(format!(
            "cannot split {} images into {k} folds",
            per_image.len()
        )));
    }
    let n = per_image.len();
    let mut fold_means = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        let s = aggregate(&per_image[start..start + len])?;
        fold_means.push(Prf {
            precision: s.precision.mean,
            recall: s.recall.mean,
            f_measure: s.f_measure.mean,
            degenerate: false,
        });
        start += len;
    }
    aggregate(&fold_means)
}

/// `image,precision,recall,f_measure` rows followed by `mean` and `std` rows.
pub fn report_csv(names: &[String], summary: &MetricSummary) -> String {
    let mut s = String::from("image,precision,recall,f_measure\n");
    for (name, m) in names.iter().zip(&summary.per_image) {
        s.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", m.precision, m.recall, m.f_measure));
    }
    s.push_str(&format!(
        "mean,{:.6},{:.6},{:.6}\n",
        summary.precision.mean, summary.recall.mean, summary.f_measure.mean
    ));
    s.push_str(&format!(
        "std,{:.6},{:.6},{:.6}\n",
        summary.precision.std, summary.recall.std, summary.f_measure.std
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(bits.len(), 1, bits.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(&[1, 0, 1, 1, 0]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp, c.tn), (0, 0, 3, 2));
    }

    #[test]
    fn empty_prediction() {
        let c = confusion(&mask(&[0, 0, 0, 0]), &mask(&[1, 0, 1, 1])).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 3));
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn complement_prediction() {
        let c = confusion(&mask(&[0, 1, 0, 0]), &mask(&[1, 0, 1, 1])).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(confusion(&mask(&[0, 1]), &mask(&[0, 1, 1])).is_err());
    }

    #[test]
    fn degenerate_counts() {
        let m = prf(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 });
        assert_eq!((m.precision, m.recall, m.f_measure), (0.0, 0.0, 0.0));
        assert!(m.degenerate);
        let m = prf(&ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 10 });
        assert_eq!((m.precision, m.recall, m.f_measure), (0.75, 0.75, 0.75));
        assert!(!m.degenerate);
    }

    #[test]
    fn table_rows() {
        assert_eq!(format!("{:.3}", f_measure(0.500, 0.163)), "0.246");
        assert_eq!(format!("{:.3}", f_measure(0.910, 0.959)), "0.934");
    }

    fn p(v: f64) -> Prf {
        Prf { precision: v, recall: v, f_measure: v, degenerate: false }
    }

    #[test]
    fn aggregate_cases() {
        let s = aggregate(&[p(0.7)]).unwrap();
        assert_eq!(s.precision.std, 0.0);
        let s = aggregate(&[p(0.9), p(1.0)]).unwrap();
        assert!((s.recall.mean - 0.95).abs() < 1e-12);
        assert!((s.recall.std - 0.05).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn folds_of_identical_data() {
        let data: Vec<Prf> = (0..10).map(|i| p(0.5 + 0.01 * (i % 2) as f64)).collect();
        let s = aggregate_folds(&data, 5).unwrap();
        assert!(s.f_measure.std.abs() < 1e-12);
        assert!((s.f_measure.mean - 0.505).abs() < 1e-12);
        assert!(aggregate_folds(&data, 11).is_err());
    }

    #[test]
    fn tolerance_counts_near_misses() {
        let pred = mask(&[0, 1, 0, 0, 0]);
        let gt = mask(&[1, 0, 0, 0, 0]);
        assert_eq!(confusion_with_tolerance(&pred, &gt, 0).unwrap().tp, 0);
        let c = confusion_with_tolerance(&pred, &gt, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
    }

    #[test]
    fn csv_layout() {
        let s = aggregate(&[p(1.0), p(0.5)]).unwrap();
        let csv = report_csv(&["a".into(), "b".into()], &s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,precision,recall,f_measure");
        assert_eq!(lines[1], "a,1.000000,1.000000,1.000000");
        assert_eq!(lines[3], "mean,0.750000,0.750000,0.750000");
        assert_eq!(lines[4], "std,0.250000,0.250000,0.250000");
    }
}
