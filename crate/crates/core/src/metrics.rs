//! Segmentation and depth-regression metrics, and report emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, SegmentationMap};

/// Counts of (truth, prediction) pairs; rows are ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    /// Adds the counted pixels of one map pair.
    pub fn accumulate(&mut self, labels: &[u32], preds: &[u32], ignore: u32) -> Result<()> {
        if labels.len() != preds.len() {
            return Err(Error::shape(
                "prediction map size",
                labels.len(),
                preds.len(),
            ));
        }
        let k = self.n_classes;
        for (&t, &p) in labels.iter().zip(preds) {
            if t == ignore {
                continue;
            }
            for v in [t, p] {
                if v as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label: v as usize,
                        n_classes: k,
                    });
                }
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::shape(
                "confusion classes",
                self.n_classes,
                other.n_classes,
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.n_classes).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.n_classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// IoU per class; `None` for classes absent from both truth and
    /// prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Confusion matrix of one prediction map, skipping `ignore` pixels.
pub fn confusion(
    labels: &SegmentationMap,
    preds: &SegmentationMap,
    n_classes: usize,
    ignore: u32,
) -> Result<ConfusionMatrix> {
    if (labels.height, labels.width) != (preds.height, preds.width) {
        return Err(Error::shape(
            "prediction map dims",
            (labels.height, labels.width),
            (preds.height, preds.width),
        ));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.accumulate(&labels.labels, &preds.labels, ignore)?;
    Ok(cm)
}

fn nonempty(cm: &ConfusionMatrix) -> Result<u64> {
    match cm.total() {
        0 => Err(Error::EmptyMatrix),
        t => Ok(t),
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = nonempty(cm)?;
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean IoU over classes present in truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    Ok(mean_present(&cm.per_class_iou()))
}

/// Mean F1 over classes present in truth or prediction.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    nonempty(cm)?;
    Ok(mean_present(&cm.per_class_f1()))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mae: f64,
    pub rmse: f64,
    pub stddev: f64,
    /// Mean signed error.
    pub bias: f64,
    pub n_valid: usize,
}

/// Error statistics of `pred - truth` over pixels valid in both maps.
pub fn regression_metrics(pred: &DepthMap, truth: &DepthMap) -> Result<RegressionReport> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "depth map dims",
            (truth.height, truth.width),
            (pred.height, pred.width),
        ));
    }
    let errors: Vec<f64> = pred
        .depth
        .iter()
        .zip(&pred.valid)
        .zip(truth.depth.iter().zip(&truth.valid))
        .filter(|((_, vp), (_, vt))| **vp && **vt)
        .map(|((p, _), (t, _))| p - t)
        .collect();
    regression_from_errors(&errors)
}

/// Statistics of signed errors; `stddev` is the population deviation.
pub fn regression_from_errors(errors: &[f64]) -> Result<RegressionReport> {
    if errors.is_empty() {
        return Err(Error::NoValidPixels {
            what: "regression metrics".into(),
        });
    }
    let n = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / n;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / n;
    Ok(RegressionReport {
        mae,
        rmse: mse.sqrt(),
        stddev: var.sqrt(),
        bias,
        n_valid: errors.len(),
    })
}

/// Evaluation report. Fields that do not apply to the task are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub pa: Option<f64>,
    pub miou: Option<f64>,
    pub macro_f1: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub stddev: Option<f64>,
    pub n_valid: usize,
}

pub const REPORT_KEYS: [&str; 8] = [
    "pa",
    "miou",
    "macro_f1",
    "per_class_iou",
    "mae",
    "rmse",
    "stddev",
    "n_valid",
];

impl MetricsReport {
    pub fn segmentation(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            pa: Some(pixel_accuracy(cm)?),
            miou: Some(miou(cm)?),
            macro_f1: Some(macro_f1(cm)?),
            per_class_iou: cm.per_class_iou(),
            mae: None,
            rmse: None,
            stddev: None,
            n_valid: cm.total() as usize,
        })
    }

    pub fn regression(r: &RegressionReport) -> Self {
        Self {
            pa: None,
            miou: None,
            macro_f1: None,
            per_class_iou: Vec::new(),
            mae: Some(r.mae),
            rmse: Some(r.rmse),
            stddev: Some(r.stddev),
            n_valid: r.n_valid,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Header plus one row. Absent values are empty cells; per-class IoU is
    /// joined with `;`.
    pub fn to_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let iou = self
            .per_class_iou
            .iter()
            .map(|v| cell(*v))
            .collect::<Vec<_>>()
            .join(";");
        let mut out = REPORT_KEYS.join(",");
        out.push('\n');
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            cell(self.pa),
            cell(self.miou),
            cell(self.macro_f1),
            iou,
            cell(self.mae),
            cell(self.rmse),
            cell(self.stddev),
            self.n_valid
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm_from(rows: &[&[u64]]) -> ConfusionMatrix {
        let k = rows.len();
        let mut cm = ConfusionMatrix::new(k);
        for (t, row) in rows.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                cm.counts[t * k + p] = c;
            }
        }
        cm
    }

    fn map(labels: Vec<u32>) -> SegmentationMap {
        SegmentationMap::new(1, labels.len(), labels).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal_and_scores_one() {
        let l = map(vec![0, 1, 2, 1]);
        let cm = confusion(&l, &l, 3, 255).unwrap();
        assert_eq!(cm.trace(), cm.total());
        assert_eq!(pixel_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(miou(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn sentinel_pixels_are_skipped() {
        let l = map(vec![255, 255]);
        let p = map(vec![0, 1]);
        let cm = confusion(&l, &p, 2, 255).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(pixel_accuracy(&cm), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn two_class_hand_example() {
        let cm = cm_from(&[&[3, 1], &[1, 3]]);
        assert_eq!(pixel_accuracy(&cm).unwrap(), 0.75);
        assert!((miou(&cm).unwrap() - 0.6).abs() < 1e-15);
        assert!((macro_f1(&cm).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let cm = cm_from(&[&[3, 0], &[0, 0]]);
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), None]);
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let err = confusion(&map(vec![3]), &map(vec![0]), 2, 255).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 3,
                n_classes: 2
            }
        ));
    }

    #[test]
    fn regression_hand_examples() {
        let r = regression_from_errors(&[1.0, -1.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.stddev), (1.0, 1.0, 1.0));
        let r = regression_from_errors(&[2.0, 2.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.stddev), (2.0, 2.0, 0.0));
        let truth = DepthMap::all_valid(1, 2, vec![-3.0, -4.0]).unwrap();
        let r = regression_metrics(&truth, &truth).unwrap();
        assert_eq!((r.mae, r.rmse, r.stddev), (0.0, 0.0, 0.0));
    }

    #[test]
    fn validity_masks_intersect() {
        let pred = DepthMap::new(1, 3, vec![0.0, 5.0, 1.0], vec![true, true, false]).unwrap();
        let truth = DepthMap::new(1, 3, vec![0.0, 1.0, 0.0], vec![true, false, true]).unwrap();
        let r = regression_metrics(&pred, &truth).unwrap();
        assert_eq!(r.n_valid, 1);
        assert_eq!(r.mae, 0.0);
        let none = DepthMap::new(1, 3, vec![0.0; 3], vec![false; 3]).unwrap();
        assert!(matches!(
            regression_metrics(&none, &truth),
            Err(Error::NoValidPixels { .. })
        ));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn report_keys_match_schema() {
        let cm = cm_from(&[&[3, 1], &[1, 3]]);
        let rep = MetricsReport::segmentation(&cm).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = REPORT_KEYS.to_vec();
        expected.sort_unstable();
        let mut keys = keys;
        keys.sort_unstable();
        assert_eq!(keys, expected);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().next().unwrap(), REPORT_KEYS.join(","));
        assert!(csv.lines().nth(1).unwrap().starts_with("0.75,"));
    }

    proptest! {
        #[test]
        fn pythagorean_identity(errors in proptest::collection::vec(-50.0f64..50.0, 1..200)) {
            let r = regression_from_errors(&errors).unwrap();
            prop_assert!((r.rmse * r.rmse - (r.bias * r.bias + r.stddev * r.stddev)).abs() < 1e-10 * (1.0 + r.rmse * r.rmse));
        }

        #[test]
        fn metrics_in_unit_interval_and_permutation_invariant(
            pairs in proptest::collection::vec((0u32..3, 0u32..3), 1..64),
            perm in Just([2u32, 0, 1]),
        ) {
            let (l, p): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
            let cm = confusion(&map(l.clone()), &map(p.clone()), 3, 255).unwrap();
            let (pa, mi, f1) = (pixel_accuracy(&cm).unwrap(), miou(&cm).unwrap(), macro_f1(&cm).unwrap());
            for v in [pa, mi, f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let lp: Vec<u32> = l.iter().map(|&x| perm[x as usize]).collect();
            let pp: Vec<u32> = p.iter().map(|&x| perm[x as usize]).collect();
            let cm2 = confusion(&map(lp), &map(pp), 3, 255).unwrap();
            prop_assert_eq!(pa, pixel_accuracy(&cm2).unwrap());
            prop_assert!((mi - miou(&cm2).unwrap()).abs() < 1e-12);
            prop_assert!((f1 - macro_f1(&cm2).unwrap()).abs() < 1e-12);
        }
    }
}
