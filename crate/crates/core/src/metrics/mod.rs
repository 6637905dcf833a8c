//! Detection metrics: greedy matching, precision/recall, all-points AP,
//! mAP over IoU thresholds, confusion matrices and PR curves.

pub mod report;

use crate::detector::{iou, Annotation, Detection};
use crate::error::{Error, Result};

/// Slack on IoU threshold comparisons so that an overlap meant to equal a
/// threshold is not lost to rounding.
pub const IOU_SLACK: f64 = 1e-9;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(class_id, score, is_tp, matched_iou)` in descending-score order (stable).
    pub flags: Vec<(usize, f64, bool, Option<f64>)>,
    /// Ground-truth count per class.
    pub n_gt: Vec<usize>,
    /// Unmatched ground truths per class.
    pub fn_count: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self, class_id: usize) -> usize {
        self.flags.iter().filter(|f| f.0 == class_id && f.2).count()
    }

    pub fn fp(&self, class_id: usize) -> usize {
        self.flags
            .iter()
            .filter(|f| f.0 == class_id && !f.2)
            .count()
    }

    pub fn scored_flags(&self, class_id: usize) -> Vec<(f64, bool)> {
        self.flags
            .iter()
            .filter(|f| f.0 == class_id)
            .map(|f| (f.1, f.2))
            .collect()
    }
}

/// Descending-score order; equal scores keep their input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

/// Per class, detections in descending score order each claim the unmatched
/// ground truth of their class with the highest IoU, if that IoU reaches `thr`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Annotation],
    thr: f64,
    num_classes: usize,
) -> MatchResult {
    let mut n_gt = vec![0; num_classes];
    for g in gts {
        if g.class_id < num_classes {
            n_gt[g.class_id] += 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= thr - IOU_SLACK => {
                used[j] = true;
                flags.push((d.class_id, d.score, true, Some(v)));
            }
            _ => flags.push((d.class_id, d.score, false, None)),
        }
    }
    let mut fn_count = vec![0; num_classes];
    for (g, u) in gts.iter().zip(&used) {
        if !u && g.class_id < num_classes {
            fn_count[g.class_id] += 1;
        }
    }
    MatchResult {
        flags,
        n_gt,
        fn_count,
    }
}

/// `(TP/(TP+FP), TP/(TP+FN))`; zero precision without detections, unit recall without ground truth.
pub fn precision_recall(tp: usize, fp: usize, fn_count: usize) -> (f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_count == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_count) as f64
    };
    (p, r)
}

/// Operating points `(recall, precision)`, one per distinct score threshold.
///
/// Detections sharing a score enter together, so the curve does not depend
/// on how ties are ordered.
pub fn pr_curve(scored_flags: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let order = score_order(scored_flags.iter().map(|f| f.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if scored_flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order
            .get(k + 1)
            .is_none_or(|&n| scored_flags[n].0 != scored_flags[i].0);
        if last_of_tie {
            let recall = if n_gt == 0 {
                0.0
            } else {
                tp as f64 / n_gt as f64
            };
            points.push((recall, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

/// Area under the precision envelope of [`pr_curve`] (all-points interpolation).
pub fn average_precision(scored_flags: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if scored_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(scored_flags, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap.clamp(0.0, 1.0)
}

pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::Argument("mean AP over zero classes".into()));
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// Per-class AP at one IoU threshold, pooled over images; `None` for classes
/// absent from the ground truth.
pub fn per_class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    thr: f64,
    num_classes: usize,
) -> Vec<Option<f64>> {
    let mut flags = vec![Vec::new(); num_classes];
    let mut n_gt = vec![0; num_classes];
    for (d, g) in dets.iter().zip(gts) {
        let m = match_detections(d, g, thr, num_classes);
        for (c, f) in flags.iter_mut().enumerate() {
            f.extend(m.scored_flags(c));
            n_gt[c] += m.n_gt[c];
        }
    }
    (0..num_classes)
        .map(|c| (n_gt[c] > 0).then(|| average_precision(&flags[c], n_gt[c])))
        .collect()
}

/// mAP at one IoU threshold over the classes present in the ground truth.
pub fn map_at(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    thr: f64,
    num_classes: usize,
) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(dets, gts, thr, num_classes)
        .into_iter()
        .flatten()
        .collect();
    mean_ap(&aps)
}

/// Mean of mAP over IoU thresholds 0.50:0.05:0.95.
pub fn map_range(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    num_classes: usize,
) -> Result<f64> {
    let maps = coco_thresholds()
        .iter()
        .map(|&t| map_at(dets, gts, t, num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(maps.iter().sum::<f64>() / maps.len() as f64)
}

/// `(K+1)×(K+1)` counts indexed `[gt class][det class]`, index `K` being background.
///
/// Detections scoring at least `conf_thresh` are matched greedily by
/// descending score to the unmatched ground truth of any class with the
/// highest IoU, if it reaches `iou_thresh`.
pub fn confusion_matrix(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    num_classes: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Vec<Vec<u64>> {
    let bg = num_classes;
    let mut m = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for (d, g) in dets.iter().zip(gts) {
        let kept: Vec<&Detection> = d.iter().filter(|x| x.score >= conf_thresh).collect();
        let mut used = vec![false; g.len()];
        for i in score_order(kept.iter().map(|x| x.score)) {
            let det = kept[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_thresh - IOU_SLACK => {
                    used[j] = true;
                    m[g[j].class_id.min(bg)][det.class_id.min(bg)] += 1;
                }
                _ => m[bg][det.class_id.min(bg)] += 1,
            }
        }
        for (gt, u) in g.iter().zip(&used) {
            if !u {
                m[gt.class_id.min(bg)][bg] += 1;
            }
        }
    }
    m
}

/// Each row divided by its sum; rows without support stay zero.
pub fn normalize_rows(m: &[Vec<u64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests;
