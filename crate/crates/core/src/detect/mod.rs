//! Two-stage box detection over a feature pyramid.

pub mod anchors;
pub mod boxes;
mod detector;
pub mod heads;
pub mod matcher;
pub mod nms;
pub mod roi_align;

use serde::{Deserialize, Serialize};

pub use anchors::{assign_level, generate_anchors, AnchorSet};
pub use boxes::{decode, encode, iou, BBox};
pub use detector::{DetectConfig, Detector, Losses, NmsMethod};
pub use matcher::{match_anchors, sample_labels, MatchLabel};
pub use nms::{batched_nms, nms, soft_nms, soft_nms_indices, SoftNms, SoftNmsMethod};
pub use roi_align::roi_align;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// One COCO-result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    /// `category_ids` maps contiguous class ids to dataset category ids.
    pub fn to_coco(&self, image_id: u64, category_ids: &[u64]) -> CocoResult {
        CocoResult {
            image_id,
            category_id: category_ids.get(self.class_id).copied().unwrap_or(self.class_id as u64),
            bbox: self.bbox.to_xywh(),
            score: self.score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coco_record_uses_xywh() {
        let d = Detection { bbox: BBox::new(10.0, 20.0, 40.0, 60.0), class_id: 1, score: 0.5 };
        let r = d.to_coco(7, &[1, 2, 3]);
        assert_eq!(r.bbox, [10.0, 20.0, 30.0, 40.0]);
        assert_eq!(r.category_id, 2);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"image_id\":7"));
    }
}
