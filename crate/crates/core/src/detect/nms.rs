use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use super::Detection;

/// Descending score, lower index first on ties.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Greedy hard NMS. Returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(by_score(scores));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// NMS applied independently within each group (class or level); the merged
/// result is sorted by score.
pub fn batched_nms(boxes: &[BBox], scores: &[f64], groups: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut keep = Vec::new();
    for g in ids {
        let members: Vec<usize> = (0..boxes.len()).filter(|&i| groups[i] == g).collect();
        let b: Vec<BBox> = members.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        keep.extend(nms(&b, &s, iou_thresh).into_iter().map(|k| members[k]));
    }
    keep.sort_by(by_score(scores));
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftNmsMethod {
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNms {
    pub method: SoftNmsMethod,
    /// Overlap threshold for the linear rule.
    pub nt: f64,
    pub sigma: f64,
    /// Detections whose decayed score drops below this are discarded.
    pub score_floor: f64,
}

impl Default for SoftNms {
    fn default() -> Self {
        SoftNms { method: SoftNmsMethod::Linear, nt: 0.3, sigma: 0.5, score_floor: 0.001 }
    }
}

/// Soft-NMS over `(boxes, scores)`. Returns `(index, decayed score)` in
/// selection order.
pub fn soft_nms_indices(boxes: &[BBox], scores: &[f64], p: &SoftNms) -> Vec<(usize, f64)> {
    let mut s = scores.to_vec();
    let mut pool: Vec<usize> = (0..boxes.len()).filter(|&i| s[i] >= p.score_floor).collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let pos = (0..pool.len())
            .min_by(|&a, &b| s[pool[b]].total_cmp(&s[pool[a]]).then(pool[a].cmp(&pool[b])))
            .expect("non-empty pool");
        let m = pool.swap_remove(pos);
        out.push((m, s[m]));
        for &i in &pool {
            let o = iou(&boxes[m], &boxes[i]);
            s[i] *= match p.method {
                SoftNmsMethod::Linear if o > p.nt => 1.0 - o,
                SoftNmsMethod::Linear => 1.0,
                SoftNmsMethod::Gaussian => (-o * o / p.sigma).exp(),
            };
        }
        pool.retain(|&i| s[i] >= p.score_floor);
    }
    out
}

pub fn soft_nms(dets: &[Detection], p: &SoftNms) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    soft_nms_indices(&boxes, &scores, p)
        .into_iter()
        .map(|(i, score)| Detection { score, ..dets[i] })
        .collect()
}
