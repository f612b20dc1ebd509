//! COCO-style box AP.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox, Detection};

pub const MAX_DETS: usize = 100;
const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Score descending, ties by box coordinates so input order never matters.
fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// 101-point interpolated AP for one class at one threshold, given
/// `(score, is_tp)` for every detection and the number of ground truths.
fn interpolated_ap(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for (k, (_, hit)) in scored.iter().enumerate() {
        tp += *hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Greedy matching in score order; each gt matched at most once, preferring
/// the highest-IoU unmatched gt at or above `thresh`.
fn match_image(dets: &[Detection], gts: &[BBox], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= thresh.min(1.0 - 1e-10) && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Evaluate at explicit IoU thresholds. AP is the mean over thresholds and
/// over classes that have ground truth.
pub fn eval_ap_at(dets: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], num_classes: usize, thresholds: &[f64]) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    // [class][threshold]
    let mut table: Vec<Option<Vec<f64>>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|(_, k)| *k == c).count()).sum();
        if n_gt == 0 {
            table.push(None);
            continue;
        }
        let per_image: Vec<(Vec<Detection>, Vec<BBox>)> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let mut cd: Vec<Detection> = d.iter().filter(|x| x.class_id == c).copied().collect();
                cd.sort_by(det_order);
                cd.truncate(MAX_DETS);
                (cd, g.iter().filter(|(_, k)| *k == c).map(|(b, _)| *b).collect())
            })
            .collect();
        let aps = thresholds
            .iter()
            .map(|&t| {
                let scored = per_image
                    .iter()
                    .flat_map(|(cd, cg)| cd.iter().map(|d| d.score).zip(match_image(cd, cg, t)))
                    .collect();
                interpolated_ap(scored, n_gt)
            })
            .collect();
        table.push(Some(aps));
    }
    let present: Vec<&Vec<f64>> = table.iter().flatten().collect();
    let mean_at = |ti: usize| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|v| v[ti]).sum::<f64>() / present.len() as f64
        }
    };
    let at = |t: f64| thresholds.iter().position(|&x| (x - t).abs() < 1e-9).map(mean_at).unwrap_or(f64::NAN);
    let ap = if thresholds.is_empty() { 0.0 } else { (0..thresholds.len()).map(mean_at).sum::<f64>() / thresholds.len() as f64 };
    EvalResult {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        per_class: table.iter().map(|o| o.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)).collect(),
    }
}

/// COCO box AP over IoU 0.50:0.05:0.95.
pub fn eval_ap(dets: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], num_classes: usize) -> EvalResult {
    eval_ap_at(dets, gts, num_classes, &coco_thresholds())
}
