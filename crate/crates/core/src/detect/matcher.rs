use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{iou_matrix, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Label anchors against ground truth. An anchor is positive at IoU >= `pos`
/// or when it is the best anchor of some gt (ties included); negative below
/// `neg`; otherwise ignored.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<MatchLabel> {
    assert!(pos >= neg, "positive threshold must not be below negative threshold");
    if gts.is_empty() {
        return vec![MatchLabel::Negative; anchors.len()];
    }
    let g = gts.len();
    let m = iou_matrix(anchors, gts);
    let mut labels: Vec<MatchLabel> = (0..anchors.len())
        .map(|a| {
            let row = &m[a * g..(a + 1) * g];
            let (best, &v) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            if v >= pos {
                MatchLabel::Positive(best)
            } else if v < neg {
                MatchLabel::Negative
            } else {
                MatchLabel::Ignore
            }
        })
        .collect();
    for j in 0..g {
        let best = (0..anchors.len()).map(|a| m[a * g + j]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, label) in labels.iter_mut().enumerate() {
            if m[a * g + j] == best {
                let row = &m[a * g..(a + 1) * g];
                let argmax = (0..g).fold(0, |bi, k| if row[k] > row[bi] { k } else { bi });
                *label = MatchLabel::Positive(argmax);
            }
        }
    }
    labels
}

/// Indices of a random subset with at most `batch * pos_fraction` positives,
/// filled with negatives. Returns `(positives, negatives)`, each ascending.
pub fn sample_labels<R: Rng>(labels: &[MatchLabel], batch: usize, pos_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], MatchLabel::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == MatchLabel::Negative).collect();
    let n_pos = pos.len().min((batch as f64 * pos_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}
