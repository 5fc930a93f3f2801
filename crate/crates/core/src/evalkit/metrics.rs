use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, UntrimmedVideo};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalInterval {
    pub t_start: f64,
    pub t_end: f64,
}

impl TemporalInterval {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start < t_end) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::Input(format!("invalid interval [{t_start}, {t_end}]")));
        }
        Ok(Self { t_start, t_end })
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Intersection over union of two intervals.
pub fn tiou(a: TemporalInterval, b: TemporalInterval) -> f64 {
    let inter = (a.t_end.min(b.t_end) - a.t_start.max(b.t_start)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.t_end.max(b.t_end) - a.t_start.min(b.t_start);
    inter / union
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn interval(&self) -> TemporalInterval {
        TemporalInterval {
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: ClassId,
}

impl GroundTruth {
    pub fn interval(&self) -> TemporalInterval {
        TemporalInterval {
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }
}

/// Foreground segments of `videos` as ground truth.
pub fn ground_truth<'a>(videos: impl IntoIterator<Item = &'a UntrimmedVideo>) -> Vec<GroundTruth> {
    videos
        .into_iter()
        .flat_map(|v| {
            v.foreground_segments().map(|s| GroundTruth {
                video_id: v.id.clone(),
                t_start: s.t_start,
                t_end: s.t_end,
                class_id: s.class_id.expect("foreground"),
            })
        })
        .collect()
}

/// Descending score, then earlier start, then input order.
fn by_rank(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.t_start.total_cmp(&b.1.t_start))
        .then(a.0.cmp(&b.0))
}

/// Greedy temporal non-maximum suppression. Survivors have pairwise tIoU at
/// most `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    order.sort_by(by_rank);
    let mut kept: Vec<&Detection> = Vec::new();
    for (_, d) in order {
        if kept.iter().all(|k| tiou(k.interval(), d.interval()) <= threshold) {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub n_gt: usize,
    /// Set when there was no ground truth, in which case `ap` is 0.
    pub no_ground_truth: bool,
}

/// All-point interpolated average precision of one class.
///
/// Detections are visited by descending score; each is a true positive when
/// its best still-unmatched ground truth in the same video and class reaches
/// `threshold`.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> ApResult {
    if gts.is_empty() {
        return ApResult {
            ap: 0.0,
            n_gt: 0,
            no_ground_truth: true,
        };
    }
    let mut order: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    order.sort_by(by_rank);
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, (_, d)) in order.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !matched[*g] && gt.video_id == d.video_id && gt.class_id == d.class_id)
            .map(|(g, gt)| (g, tiou(gt.interval(), d.interval())))
            .filter(|(_, iou)| *iou >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ApResult {
        ap,
        n_gt: gts.len(),
        no_ground_truth: false,
    }
}

/// Threshold grid averaged into AmAP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmapGrid {
    /// 0.05, 0.10, …, 0.95 (19 thresholds).
    #[default]
    Full,
    /// 0.50, 0.55, …, 0.95 (10 thresholds).
    ActivityNet,
}

impl AmapGrid {
    pub fn thresholds(self) -> Vec<f64> {
        let first = match self {
            AmapGrid::Full => 1,
            AmapGrid::ActivityNet => 10,
        };
        (first..=19).map(|i| i as f64 / 20.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    #[serde(rename = "mAP@0.5")]
    pub map_050: f64,
    #[serde(rename = "mAP@0.75")]
    pub map_075: f64,
    #[serde(rename = "mAP@0.95")]
    pub map_095: f64,
    #[serde(rename = "AmAP")]
    pub amap: f64,
    pub amap_grid: AmapGrid,
    /// (threshold, mAP) for every grid point.
    pub per_threshold: Vec<(f64, f64)>,
    pub n_classes: usize,
}

/// Mean AP over the classes present in `gts`.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> f64 {
    let classes: BTreeSet<ClassId> = gts.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
            average_precision(&d, &g, threshold).ap
        })
        .sum();
    total / classes.len() as f64
}

pub fn map_suite(dets: &[Detection], gts: &[GroundTruth], grid: AmapGrid) -> MapReport {
    let per_threshold: Vec<(f64, f64)> = grid
        .thresholds()
        .into_iter()
        .map(|t| (t, mean_ap(dets, gts, t)))
        .collect();
    let amap = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    MapReport {
        map_050: mean_ap(dets, gts, 0.5),
        map_075: mean_ap(dets, gts, 0.75),
        map_095: mean_ap(dets, gts, 0.95),
        amap,
        amap_grid: grid,
        per_threshold,
        n_classes: gts.iter().map(|g| g.class_id).collect::<BTreeSet<_>>().len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: f64, b: f64) -> TemporalInterval {
        TemporalInterval::new(a, b).unwrap()
    }

    fn det(v: &str, a: f64, b: f64, c: ClassId, s: f64) -> Detection {
        Detection {
            video_id: v.into(),
            t_start: a,
            t_end: b,
            class_id: c,
            score: s,
        }
    }

    fn gt(v: &str, a: f64, b: f64, c: ClassId) -> GroundTruth {
        GroundTruth {
            video_id: v.into(),
            t_start: a,
            t_end: b,
            class_id: c,
        }
    }

    #[test]
    fn tiou_cases() {
        assert_eq!(tiou(iv(1.0, 4.0), iv(1.0, 4.0)), 1.0);
        assert_eq!(tiou(iv(0.0, 2.0), iv(1.0, 3.0)), 1.0 / 3.0);
        assert_eq!(tiou(iv(0.0, 1.0), iv(2.0, 3.0)), 0.0);
        assert_eq!(tiou(iv(0.0, 1.0), iv(1.0, 3.0)), 0.0);
        assert!(TemporalInterval::new(2.0, 2.0).is_err());
    }

    #[test]
    fn nms_cases() {
        let one = vec![det("v", 0.0, 2.0, 0, 0.3)];
        assert_eq!(nms(&one, 0.5), one);
        let twins = vec![det("v", 0.0, 2.0, 0, 0.8), det("v", 0.0, 2.0, 0, 0.9)];
        assert_eq!(nms(&twins, 0.5), vec![twins[1].clone()]);
    }

    #[test]
    fn ap_cases() {
        let g = vec![gt("v", 2.0, 6.0, 1)];
        assert_eq!(average_precision(&[det("v", 2.0, 6.0, 1, 0.5)], &g, 0.5).ap, 1.0);
        let dets = vec![det("v", 10.0, 12.0, 1, 0.9), det("v", 2.0, 6.0, 1, 0.4)];
        assert_eq!(average_precision(&dets, &g, 0.5).ap, 0.5);
        let none = average_precision(&dets, &[], 0.5);
        assert!(none.no_ground_truth);
        assert_eq!(none.ap, 0.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = vec![gt("v", 0.0, 4.0, 0)];
        let dets = vec![det("v", 0.0, 4.0, 0, 0.9), det("v", 0.0, 4.0, 0, 0.8)];
        assert_eq!(average_precision(&dets, &g, 0.5).ap, 1.0);
        let g2 = vec![gt("v", 0.0, 4.0, 0), gt("v", 10.0, 14.0, 0)];
        // precision 1, 1/2 at recall 1/2; second gt never found
        assert_eq!(average_precision(&dets, &g2, 0.5).ap, 0.5);
    }

    #[test]
    fn suite_perfect_and_empty() {
        let gts = vec![gt("a", 0.0, 3.0, 0), gt("b", 4.0, 9.0, 1), gt("b", 12.0, 15.0, 1)];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video_id, g.t_start, g.t_end, g.class_id, 1.0))
            .collect();
        let r = map_suite(&perfect, &gts, AmapGrid::Full);
        assert_eq!((r.map_050, r.map_075, r.map_095, r.amap), (1.0, 1.0, 1.0, 1.0));
        let r = map_suite(&[], &gts, AmapGrid::Full);
        assert_eq!((r.map_050, r.map_075, r.map_095, r.amap), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.per_threshold.len(), 19);
        assert_eq!(AmapGrid::ActivityNet.thresholds().len(), 10);
    }
}
