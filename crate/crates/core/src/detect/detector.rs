use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::anchors::{assign_level, generate_anchors, AnchorSet};
use super::boxes::{decode, encode, iou_matrix, BBox};
use super::heads::{BoxHead, RpnHead};
use super::matcher::{match_anchors, sample_labels, MatchLabel};
use super::nms::{batched_nms, soft_nms_indices, SoftNms, SoftNmsMethod};
use super::roi_align::roi_align;
use super::Detection;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore, RunCtx};
use crate::pyramid::{FeaturePyramid, Pyramid, PyramidKind};
use crate::tensor::Tensor;

const RPN_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const ROI_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NmsMethod {
    Hard,
    SoftLinear,
    SoftGaussian,
}

impl fmt::Display for NmsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NmsMethod::Hard => "hard",
            NmsMethod::SoftLinear => "soft_linear",
            NmsMethod::SoftGaussian => "soft_gaussian",
        })
    }
}

impl FromStr for NmsMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "hard" => NmsMethod::Hard,
            "soft_linear" => NmsMethod::SoftLinear,
            "soft_gaussian" => NmsMethod::SoftGaussian,
            _ => return Err(format!("unknown nms method `{s}` (expected hard|soft_linear|soft_gaussian)")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub num_classes: usize,
    /// Anchor side as a multiple of the level stride.
    pub anchor_factor: f64,
    pub anchor_ratios: Vec<f64>,
    /// Box side that maps to the stride-`patch` level.
    pub canonical: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_topk: usize,
    pub post_nms_topk: usize,
    pub rpn_nms: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_fg_iou: f64,
    pub head_convs: usize,
    pub pooler: usize,
    pub sampling: usize,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub nms_method: NmsMethod,
    pub soft_nms_sigma: f64,
    pub max_dets: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            num_classes: 3,
            anchor_factor: 4.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            canonical: 28.0,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            pre_nms_topk: 200,
            post_nms_topk: 50,
            rpn_nms: 0.7,
            roi_batch: 128,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            head_convs: 4,
            pooler: 7,
            sampling: 2,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            nms_method: NmsMethod::Hard,
            soft_nms_sigma: 0.5,
            max_dets: 100,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("detect.num_classes must be positive".into());
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(*r > 0.0)) {
            return bad("detect.anchor_ratios must be a non-empty list of positive numbers".into());
        }
        if !(self.anchor_factor > 0.0) || !(self.canonical > 0.0) {
            return bad("detect.anchor_factor and detect.canonical must be positive".into());
        }
        if self.rpn_pos_iou < self.rpn_neg_iou {
            return bad(format!(
                "detect.rpn_pos_iou ({}) must not be below detect.rpn_neg_iou ({})",
                self.rpn_pos_iou, self.rpn_neg_iou
            ));
        }
        for (key, v) in [
            ("detect.rpn_pos_fraction", self.rpn_pos_fraction),
            ("detect.roi_pos_fraction", self.roi_pos_fraction),
            ("detect.roi_fg_iou", self.roi_fg_iou),
            ("detect.rpn_nms", self.rpn_nms),
            ("detect.nms_thresh", self.nms_thresh),
            ("detect.score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{key} must lie in [0, 1], got {v}"));
            }
        }
        for (key, v) in [
            ("detect.rpn_batch", self.rpn_batch),
            ("detect.roi_batch", self.roi_batch),
            ("detect.pre_nms_topk", self.pre_nms_topk),
            ("detect.post_nms_topk", self.post_nms_topk),
            ("detect.pooler", self.pooler),
            ("detect.sampling", self.sampling),
            ("detect.max_dets", self.max_dets),
        ] {
            if v == 0 {
                return bad(format!("{key} must be positive"));
            }
        }
        if !(self.soft_nms_sigma > 0.0) {
            return bad("detect.soft_nms_sigma must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth per image: `(box, class id)`.
pub type Targets = [Vec<(BBox, usize)>];

#[derive(Debug, Clone)]
pub struct Losses {
    pub rpn_cls: Tensor,
    pub rpn_box: Tensor,
    pub cls: Tensor,
    pub box_reg: Tensor,
}

impl Losses {
    pub fn total(&self) -> Result<Tensor> {
        self.rpn_cls.add(&self.rpn_box)?.add(&self.cls)?.add(&self.box_reg)
    }

    pub fn values(&self) -> [f64; 4] {
        [self.rpn_cls.item(), self.rpn_box.item(), self.cls.item(), self.box_reg.item()]
    }
}

/// Backbone, pyramid, RPN and RoI box head.
#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub rpn: RpnHead,
    pub box_head: BoxHead,
    pub cfg: DetectConfig,
}

impl Detector {
    pub fn new(
        backbone: &BackboneConfig,
        pyramid: PyramidKind,
        out_dim: usize,
        cfg: &DetectConfig,
        ps: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let bb = Backbone::new(backbone, ps, init)?;
        let pyr = Pyramid::new(pyramid, backbone.dim, backbone.depth, backbone.patch_size, out_dim, ps, init)?;
        let per_loc = anchor_sizes(&pyr, cfg)[0].len() * cfg.anchor_ratios.len();
        let rpn = RpnHead::new(ps, init, out_dim, per_loc);
        let box_head = BoxHead::new(ps, init, out_dim, cfg.pooler, cfg.num_classes, cfg.head_convs);
        Ok(Detector { backbone: bb, pyramid: pyr, rpn, box_head, cfg: cfg.clone() })
    }

    pub fn anchors(&self, image_hw: (usize, usize)) -> AnchorSet {
        generate_anchors(&self.pyramid.strides(), &anchor_sizes(&self.pyramid, &self.cfg), &self.cfg.anchor_ratios, image_hw)
    }

    pub fn features(&self, ps: &ParamStore, images: &Tensor, ctx: &mut RunCtx) -> Result<FeaturePyramid> {
        let maps = self.backbone.forward_taps(ps, images, self.pyramid.taps(), ctx)?;
        self.pyramid.forward(ps, &maps)
    }

    /// Index of the pyramid level an RoI is pooled from.
    pub fn roi_level(&self, b: &BBox) -> usize {
        let strides = self.pyramid.strides();
        if strides.len() == 1 {
            return 0;
        }
        let k0 = strides.iter().position(|&s| s == self.pyramid.patch).expect("patch stride present") as i32;
        assign_level(b, k0, self.cfg.canonical, 0, strides.len() as i32 - 1) as usize
    }

    /// RoIAlign every `(image, box)` from its assigned level -> `[R, C, P, P]`.
    pub fn pool(&self, fp: &FeaturePyramid, rois: &[(usize, BBox)]) -> Result<Tensor> {
        let (p, s) = (self.cfg.pooler, self.cfg.sampling);
        if fp.levels.len() == 1 {
            let (stride, map) = &fp.levels[0];
            return roi_align(map, rois, 1.0 / *stride as f64, p, s);
        }
        let assigned: Vec<usize> = rois.iter().map(|(_, b)| self.roi_level(b)).collect();
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rois.len());
        for (li, (stride, map)) in fp.levels.iter().enumerate() {
            let idx: Vec<usize> = (0..rois.len()).filter(|&i| assigned[i] == li).collect();
            if idx.is_empty() {
                continue;
            }
            let subset: Vec<(usize, BBox)> = idx.iter().map(|&i| rois[i]).collect();
            parts.push(roi_align(map, &subset, 1.0 / *stride as f64, p, s)?);
            order.extend(idx);
        }
        let stacked = if parts.len() == 1 { parts.pop().expect("one part") } else { Tensor::concat(&parts, 0)? };
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        if inverse.iter().enumerate().all(|(i, &p)| i == p) {
            Ok(stacked)
        } else {
            stacked.index_select(&inverse)
        }
    }

    /// RPN proposals per image from (detached) head outputs, after per-level
    /// top-k and NMS.
    pub fn proposals(&self, logits: &Tensor, deltas: &Tensor, anchors: &AnchorSet, image_hw: (usize, usize)) -> Vec<Vec<BBox>> {
        let (b, n) = (logits.shape()[0], logits.shape()[1]);
        let flat = anchors.flat();
        let ranges = anchors.level_ranges();
        let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
        let (ld, dd) = (logits.data(), deltas.data());
        (0..b)
            .map(|bi| {
                let mut boxes = Vec::new();
                let mut scores = Vec::new();
                let mut levels = Vec::new();
                for (li, range) in ranges.iter().enumerate() {
                    let mut idx: Vec<usize> = range.clone().collect();
                    idx.sort_by(|&x, &y| ld[bi * n + y].total_cmp(&ld[bi * n + x]).then(x.cmp(&y)));
                    idx.truncate(self.cfg.pre_nms_topk);
                    for i in idx {
                        let o = (bi * n + i) * 4;
                        let d = [dd[o], dd[o + 1], dd[o + 2], dd[o + 3]];
                        let bx = decode(d, &flat[i], RPN_WEIGHTS).clip(h, w);
                        if bx.is_valid() {
                            boxes.push(bx);
                            scores.push(ld[bi * n + i]);
                            levels.push(li);
                        }
                    }
                }
                let mut keep = batched_nms(&boxes, &scores, &levels, self.cfg.rpn_nms);
                keep.truncate(self.cfg.post_nms_topk);
                keep.into_iter().map(|k| boxes[k]).collect()
            })
            .collect()
    }

    /// Training losses. With `fixed_proposals` the RoI stage uses the given
    /// boxes instead of the RPN output (gt boxes are still appended).
    pub fn losses(
        &self,
        ps: &ParamStore,
        images: &Tensor,
        targets: &Targets,
        fixed_proposals: Option<&[Vec<BBox>]>,
        ctx: &mut RunCtx,
    ) -> Result<Losses> {
        let [b, _, h, w] = *images.shape() else {
            return Err(Error::dim("detector", format!("expected [B, 3, H, W] images, got {:?}", images.shape())));
        };
        if targets.len() != b {
            return Err(Error::dim("detector", format!("{} target lists for {b} images", targets.len())));
        }
        let fp = self.features(ps, images, ctx)?;
        let (logits, deltas) = self.rpn.forward(ps, &fp)?;
        let anchors = self.anchors((h, w));
        let flat = anchors.flat();
        let n = flat.len();

        let mut sel = Vec::new();
        let mut obj_targets = Vec::new();
        let mut pos_sel = Vec::new();
        let mut box_targets = Vec::new();
        for (bi, gt) in targets.iter().enumerate() {
            let gt_boxes: Vec<BBox> = gt.iter().map(|(bx, _)| *bx).collect();
            let labels = match_anchors(&flat, &gt_boxes, self.cfg.rpn_pos_iou, self.cfg.rpn_neg_iou);
            let (pos, neg) = sample_labels(&labels, self.cfg.rpn_batch, self.cfg.rpn_pos_fraction, &mut ctx.rng);
            for &i in &pos {
                let MatchLabel::Positive(g) = labels[i] else { unreachable!("sampled positive") };
                sel.push(bi * n + i);
                obj_targets.push(1.0);
                pos_sel.push(bi * n + i);
                box_targets.extend(encode(&gt_boxes[g], &flat[i], RPN_WEIGHTS));
            }
            for &i in &neg {
                sel.push(bi * n + i);
                obj_targets.push(0.0);
            }
        }
        let norm = sel.len().max(1) as f64;
        let rpn_cls = if sel.is_empty() {
            Tensor::scalar(0.0)
        } else {
            logits.reshape(&[b * n])?.index_select(&sel)?.bce_with_logits_sum(&obj_targets)?.scale(1.0 / norm)?
        };
        let rpn_box = if pos_sel.is_empty() {
            Tensor::scalar(0.0)
        } else {
            deltas
                .reshape(&[b * n, 4])?
                .index_select(&pos_sel)?
                .smooth_l1_sum(&box_targets, SMOOTH_L1_BETA)?
                .scale(1.0 / norm)?
        };

        let proposals = match fixed_proposals {
            Some(p) => p.to_vec(),
            None => self.proposals(&logits.detach(), &deltas.detach(), &anchors, (h, w)),
        };
        let k = self.cfg.num_classes;
        let mut rois = Vec::new();
        let mut cls_labels = Vec::new();
        let mut fg_sel = Vec::new();
        let mut reg_targets = Vec::new();
        for (bi, gt) in targets.iter().enumerate() {
            let gt_boxes: Vec<BBox> = gt.iter().map(|(bx, _)| *bx).collect();
            let mut cand = proposals.get(bi).cloned().unwrap_or_default();
            cand.extend(gt_boxes.iter().copied());
            if cand.is_empty() {
                continue;
            }
            let g = gt_boxes.len();
            let m = iou_matrix(&cand, &gt_boxes);
            let labels: Vec<MatchLabel> = (0..cand.len())
                .map(|c| {
                    let row = &m[c * g..(c + 1) * g];
                    match (0..g).fold(None, |best: Option<usize>, j| match best {
                        Some(bj) if row[bj] >= row[j] => Some(bj),
                        _ => Some(j),
                    }) {
                        Some(j) if row[j] >= self.cfg.roi_fg_iou => MatchLabel::Positive(j),
                        _ => MatchLabel::Negative,
                    }
                })
                .collect();
            let (pos, neg) = sample_labels(&labels, self.cfg.roi_batch, self.cfg.roi_pos_fraction, &mut ctx.rng);
            for &i in &pos {
                let MatchLabel::Positive(j) = labels[i] else { unreachable!("sampled positive") };
                let class = gt[j].1;
                fg_sel.push(rois.len() * k + class);
                reg_targets.extend(encode(&gt_boxes[j], &cand[i], ROI_WEIGHTS));
                cls_labels.push(class);
                rois.push((bi, cand[i]));
            }
            for &i in &neg {
                cls_labels.push(k);
                rois.push((bi, cand[i]));
            }
        }
        if rois.is_empty() {
            return Ok(Losses { rpn_cls, rpn_box, cls: Tensor::scalar(0.0), box_reg: Tensor::scalar(0.0) });
        }
        let r = rois.len();
        let pooled = self.pool(&fp, &rois)?;
        let (cls_logits, reg) = self.box_head.forward(ps, &pooled)?;
        let cls = cls_logits.cross_entropy_sum(&cls_labels)?.scale(1.0 / r as f64)?;
        let box_reg = if fg_sel.is_empty() {
            Tensor::scalar(0.0)
        } else {
            reg.reshape(&[r * k, 4])?
                .index_select(&fg_sel)?
                .smooth_l1_sum(&reg_targets, SMOOTH_L1_BETA)?
                .scale(1.0 / r as f64)?
        };
        Ok(Losses { rpn_cls, rpn_box, cls, box_reg })
    }

    /// Final detections per image.
    pub fn detect(&self, ps: &ParamStore, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let [b, _, h, w] = *images.shape() else {
            return Err(Error::dim("detector", format!("expected [B, 3, H, W] images, got {:?}", images.shape())));
        };
        let mut ctx = RunCtx::eval();
        let fp = self.features(ps, images, &mut ctx)?;
        let (logits, deltas) = self.rpn.forward(ps, &fp)?;
        let anchors = self.anchors((h, w));
        let proposals = self.proposals(&logits, &deltas, &anchors, (h, w));
        let rois: Vec<(usize, BBox)> =
            proposals.iter().enumerate().flat_map(|(bi, ps)| ps.iter().map(move |bx| (bi, *bx))).collect();
        let mut out = vec![Vec::new(); b];
        if rois.is_empty() {
            return Ok(out);
        }
        let pooled = self.pool(&fp, &rois)?;
        let (cls_logits, reg) = self.box_head.forward(ps, &pooled)?;
        let probs = cls_logits.softmax(1)?;
        let k = self.cfg.num_classes;
        let (pd, rd) = (probs.data(), reg.data());
        let mut cands: Vec<Vec<Detection>> = vec![Vec::new(); b];
        for (ri, (bi, prop)) in rois.iter().enumerate() {
            for c in 0..k {
                let score = pd[ri * (k + 1) + c];
                if score <= self.cfg.score_thresh {
                    continue;
                }
                let o = (ri * k + c) * 4;
                let bx = decode([rd[o], rd[o + 1], rd[o + 2], rd[o + 3]], prop, ROI_WEIGHTS).clip(h as f64, w as f64);
                if bx.is_valid() {
                    cands[*bi].push(Detection { bbox: bx, class_id: c, score });
                }
            }
        }
        for (bi, dets) in cands.into_iter().enumerate() {
            out[bi] = self.suppress(dets);
        }
        Ok(out)
    }

    /// Per-class NMS (hard or soft), then the top `max_dets` by score.
    pub fn suppress(&self, dets: Vec<Detection>) -> Vec<Detection> {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
        let mut kept: Vec<Detection> = match self.cfg.nms_method {
            NmsMethod::Hard => {
                batched_nms(&boxes, &scores, &classes, self.cfg.nms_thresh).into_iter().map(|i| dets[i]).collect()
            }
            NmsMethod::SoftLinear | NmsMethod::SoftGaussian => {
                let p = SoftNms {
                    method: if self.cfg.nms_method == NmsMethod::SoftLinear {
                        SoftNmsMethod::Linear
                    } else {
                        SoftNmsMethod::Gaussian
                    },
                    nt: self.cfg.nms_thresh,
                    sigma: self.cfg.soft_nms_sigma,
                    score_floor: self.cfg.score_thresh,
                };
                let mut out = Vec::new();
                for c in 0..self.cfg.num_classes {
                    let idx: Vec<usize> = (0..dets.len()).filter(|&i| classes[i] == c).collect();
                    let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    out.extend(
                        soft_nms_indices(&b, &s, &p)
                            .into_iter()
                            .map(|(j, score)| Detection { score, ..dets[idx[j]] }),
                    );
                }
                out
            }
        };
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        kept.truncate(self.cfg.max_dets);
        kept
    }
}

/// Anchor sides per level: one per level on a pyramid, all of them on the
/// single stride-`patch` map otherwise.
fn anchor_sizes(pyr: &Pyramid, cfg: &DetectConfig) -> Vec<Vec<f64>> {
    let strides = pyr.strides();
    if strides.len() == 1 {
        let all = crate::pyramid::level_strides(PyramidKind::Simple, pyr.patch);
        vec![all.iter().map(|&s| cfg.anchor_factor * s as f64).collect()]
    } else {
        strides.iter().map(|&s| vec![cfg.anchor_factor * s as f64]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Placement, PropStrategy};

    fn tiny(kind: PyramidKind) -> (Detector, ParamStore) {
        let bcfg = BackboneConfig {
            depth: 4,
            dim: 16,
            heads: 2,
            patch_size: 8,
            window_size: 4,
            mlp_ratio: 2.0,
            prop_strategy: PropStrategy::Global,
            prop_count: 2,
            prop_placement: Placement::Evenly,
            use_rel_pos_bias: true,
            drop_path_rate: 0.0,
            pretrain_grid: 4,
            img_size: 64,
        };
        let dcfg = DetectConfig { head_convs: 1, roi_batch: 16, rpn_batch: 32, ..DetectConfig::default() };
        let mut ps = ParamStore::new();
        let det = Detector::new(&bcfg, kind, 8, &dcfg, &mut ps, &mut Init::new(1)).unwrap();
        (det, ps)
    }

    #[test]
    fn no_pyramid_puts_all_sizes_on_one_level() {
        let (det, _) = tiny(PyramidKind::None);
        let a = det.anchors((64, 64));
        assert_eq!(a.levels.len(), 1);
        assert_eq!(a.levels[0].per_location, 12);
        assert_eq!(det.roi_level(&BBox::new(0.0, 0.0, 60.0, 60.0)), 0);
    }

    #[test]
    fn losses_are_finite_and_reach_backbone() {
        let (det, ps) = tiny(PyramidKind::Simple);
        let images = Init::new(5).uniform(&[1, 3, 64, 64], 0.0, 1.0);
        let targets = vec![vec![(BBox::new(8.0, 10.0, 30.0, 40.0), 1)]];
        let l = det.losses(&ps, &images, &targets, None, &mut RunCtx::train(0)).unwrap();
        let total = l.total().unwrap();
        assert!(total.item().is_finite() && total.item() > 0.0);
        total.backward().unwrap();
        let id = ps.find("backbone.blocks.0.attn.qkv.weight").unwrap();
        let g = ps.get(id).grad().unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn detect_respects_limits() {
        let (det, ps) = tiny(PyramidKind::Simple);
        let images = Init::new(5).uniform(&[2, 3, 64, 64], 0.0, 1.0);
        let dets = det.detect(&ps, &images).unwrap();
        assert_eq!(dets.len(), 2);
        for d in dets.iter().flatten() {
            assert!(d.score > 0.05 && d.score <= 1.0 && d.bbox.is_valid());
        }
    }
}
