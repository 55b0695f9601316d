//! Scene-completion (occupancy) and semantic scene-completion metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{SceneSample, EMPTY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a} vs {b} voxels")));
    }
    Ok(())
}

/// Occupancy precision, recall and IoU over the voxels where `mask` holds.
/// Ratios with a zero denominator are reported as 0.
pub fn sc_metrics(pred: &[bool], gt: &[bool], mask: &[bool]) -> Result<ScMetrics> {
    check_len(
        "sc_metrics prediction vs ground truth",
        pred.len(),
        gt.len(),
    )?;
    check_len("sc_metrics mask", mask.len(), gt.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut any = false;
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        any = true;
        match (pred[i], gt[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if !any {
        return Err(Error::DegenerateEvaluation);
    }
    Ok(ScMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        tp,
        fp,
        fn_,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SscMetrics {
    /// IoU of every non-empty class present in prediction or ground truth.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub mean_iou: f64,
}

/// Per-class IoU for classes `1..num_classes` over `mask`; classes absent
/// from both prediction and ground truth are left out of the mean.
pub fn ssc_metrics(
    pred: &[usize],
    gt: &[usize],
    mask: &[bool],
    num_classes: usize,
) -> Result<SscMetrics> {
    check_len(
        "ssc_metrics prediction vs ground truth",
        pred.len(),
        gt.len(),
    )?;
    check_len("ssc_metrics mask", mask.len(), gt.len())?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Parameter(format!(
                "label {} outside {num_classes} classes",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class_iou: BTreeMap<usize, f64> = (1..num_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| (c, inter[c] as f64 / union[c] as f64))
        .collect();
    let mean_iou = if per_class_iou.is_empty() {
        0.0
    } else {
        per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
    };
    Ok(SscMetrics {
        per_class_iou,
        mean_iou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sc_precision: f64,
    pub sc_recall: f64,
    pub sc_iou: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub mean_iou: f64,
}

impl MetricReport {
    pub fn new(sc: &ScMetrics, ssc: SscMetrics) -> Self {
        Self {
            sc_precision: sc.precision,
            sc_recall: sc.recall,
            sc_iou: sc.iou,
            per_class_iou: ssc.per_class_iou,
            mean_iou: ssc.mean_iou,
        }
    }

    /// Means over several scenes: every field averaged, a class averaged over
    /// the scenes in which it was scored.
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in reports {
            for (&c, &v) in &r.per_class_iou {
                let e = sums.entry(c).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        Some(MetricReport {
            sc_precision: reports.iter().map(|r| r.sc_precision).sum::<f64>() / n,
            sc_recall: reports.iter().map(|r| r.sc_recall).sum::<f64>() / n,
            sc_iou: reports.iter().map(|r| r.sc_iou).sum::<f64>() / n,
            per_class_iou: sums
                .into_iter()
                .map(|(c, (s, k))| (c, s / k as f64))
                .collect(),
            mean_iou: reports.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        })
    }
}

/// SC on occluded in-view voxels, SSC on the sample's evaluation mask.
pub fn evaluate(pred: &[usize], sample: &SceneSample) -> Result<MetricReport> {
    let pred_occ: Vec<bool> = pred.iter().map(|&l| l != EMPTY).collect();
    let sc = sc_metrics(&pred_occ, &sample.occupancy(), &sample.sc_mask())?;
    let ssc = ssc_metrics(
        pred,
        &sample.labels,
        &sample.eval_mask(),
        sample.num_classes,
    )?;
    Ok(MetricReport::new(&sc, ssc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [true, false, true, true];
        let m = sc_metrics(&gt, &gt, &[true; 4]).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (1.0, 1.0, 1.0));
        let labels = [0, 1, 2, 2, 3];
        let s = ssc_metrics(&labels, &labels, &[true; 5], 4).unwrap();
        assert!(s.per_class_iou.values().all(|&v| v == 1.0));
        assert_eq!(s.mean_iou, 1.0);
    }

    #[test]
    fn null_prediction() {
        let m = sc_metrics(&[false; 3], &[true, false, true], &[true; 3]).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn counting_example() {
        // 2 TP, 1 FP, 1 FN.
        let pred = [true, true, true, false];
        let gt = [true, true, false, true];
        let m = sc_metrics(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.iou, 0.5);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        assert!(matches!(
            sc_metrics(&[true], &[true], &[false]),
            Err(Error::DegenerateEvaluation)
        ));
    }

    #[test]
    fn complete_disagreement() {
        let s = ssc_metrics(&[1, 1, 2, 2], &[2, 2, 1, 1], &[true; 4], 3).unwrap();
        assert_eq!(s.mean_iou, 0.0);
        assert_eq!(s.per_class_iou.len(), 2);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let s = ssc_metrics(&[1, 0], &[1, 0], &[true; 2], 5).unwrap();
        assert_eq!(s.per_class_iou.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(s.mean_iou, 1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            sc_metrics(&[true], &[true, false], &[true]),
            Err(Error::Dimension(_))
        ));
        assert!(ssc_metrics(&[5], &[1], &[true], 3).is_err());
    }
}
