//! Brute-force reference implementations of soft-NMS, hard NMS and COCO AP.

use plaindet::detect::{BBox, Detection, SoftNms, SoftNmsMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
    let (w, h) = (rng.random_range(2.0..extent / 2.0), rng.random_range(2.0..extent / 2.0));
    BBox::new(x, y, x + w, y + h)
}

/// Clustered boxes so suppression actually fires.
pub fn clustered(rng: &mut ChaCha8Rng, n: usize) -> (Vec<BBox>, Vec<f64>) {
    let centres: Vec<BBox> = (0..4).map(|_| random_box(rng, 40.0)).collect();
    let boxes = (0..n)
        .map(|_| {
            let c = centres[rng.random_range(0..centres.len())];
            let j = |r: &mut ChaCha8Rng| r.random_range(-0.9..0.9);
            BBox::new(c.x1 + j(rng), c.y1 + j(rng), c.x2 + j(rng), c.y2 + j(rng))
        })
        .collect();
    let scores = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    (boxes, scores)
}

/// Each round rescans every live box for the maximum, then decays all others.
pub fn ref_soft_nms(boxes: &[BBox], scores: &[f64], p: &SoftNms) -> Vec<(usize, f64)> {
    let mut live: Vec<Option<f64>> = scores.iter().map(|&s| (s >= p.score_floor).then_some(s)).collect();
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in live.iter().enumerate() {
            if let Some(s) = *s {
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((i, s));
                }
            }
        }
        let Some((m, sm)) = best else { break };
        out.push((m, sm));
        live[m] = None;
        for i in 0..live.len() {
            if let Some(s) = live[i] {
                let o = ref_iou(&boxes[m], &boxes[i]);
                let w = match p.method {
                    SoftNmsMethod::Linear => {
                        if o > p.nt {
                            1.0 - o
                        } else {
                            1.0
                        }
                    }
                    SoftNmsMethod::Gaussian => (-(o * o) / p.sigma).exp(),
                };
                let ns = s * w;
                live[i] = (ns >= p.score_floor).then_some(ns);
            }
        }
    }
    out
}

pub fn ref_hard_nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(m) = best else { break };
        keep.push(m);
        alive[m] = false;
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(&boxes[m], &boxes[i]) > thresh {
                alive[i] = false;
            }
        }
    }
    keep
}

/// Per class and threshold: match greedily in global score order, then take
/// the upper envelope of precision at each of 101 recall levels directly
/// from its definition.
pub fn ref_ap(dets: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], classes: usize, thresholds: &[f64]) -> (f64, Vec<f64>) {
    let mut per_t = vec![0.0; thresholds.len()];
    let mut n_classes = 0;
    for c in 0..classes {
        let n_gt: usize = gts.iter().flatten().filter(|g| g.1 == c).count();
        if n_gt == 0 {
            continue;
        }
        n_classes += 1;
        for (ti, &t) in thresholds.iter().enumerate() {
            // (score, image, det index)
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for (im, d) in dets.iter().enumerate() {
                for (k, x) in d.iter().enumerate() {
                    if x.class_id == c {
                        all.push((x.score, im, k));
                    }
                }
            }
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut hits = Vec::new();
            for &(_, im, k) in &all {
                let d = &dets[im][k];
                let mut best = None;
                let mut best_iou = -1.0;
                for (j, (g, gc)) in gts[im].iter().enumerate() {
                    if *gc != c || used[im][j] {
                        continue;
                    }
                    let o = ref_iou(&d.bbox, g);
                    if o >= t && o > best_iou {
                        best = Some(j);
                        best_iou = o;
                    }
                }
                if let Some(j) = best {
                    used[im][j] = true;
                }
                hits.push(best.is_some());
            }
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            let mut tp = 0;
            for (k, &h) in hits.iter().enumerate() {
                tp += h as usize;
                prec.push(tp as f64 / (k + 1) as f64);
                rec.push(tp as f64 / n_gt as f64);
            }
            let mut sum = 0.0;
            for r in 0..101 {
                let level = r as f64 / 100.0;
                let mut p = 0.0f64;
                for k in 0..prec.len() {
                    if rec[k] >= level {
                        p = p.max(prec[k]);
                    }
                }
                sum += p;
            }
            per_t[ti] += sum / 101.0;
        }
    }
    if n_classes == 0 {
        return (0.0, per_t);
    }
    for v in &mut per_t {
        *v /= n_classes as f64;
    }
    (per_t.iter().sum::<f64>() / thresholds.len() as f64, per_t)
}

pub type Scene = (Vec<Vec<Detection>>, Vec<Vec<(BBox, usize)>>);

pub fn scene(rng: &mut ChaCha8Rng, images: usize, classes: usize) -> Scene {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let n = rng.random_range(0..5);
        let g: Vec<(BBox, usize)> = (0..n).map(|_| (random_box(rng, 60.0), rng.random_range(0..classes))).collect();
        let mut d = Vec::new();
        for (b, c) in &g {
            for _ in 0..rng.random_range(0..3) {
                let j = |r: &mut ChaCha8Rng| r.random_range(-4.0..4.0);
                let bb = BBox::new(b.x1 + j(rng), b.y1 + j(rng), b.x2 + j(rng), b.y2 + j(rng));
                let cls = if rng.random_bool(0.85) { *c } else { rng.random_range(0..classes) };
                d.push(Detection { bbox: bb, class_id: cls, score: rng.random_range(0.0..1.0) });
            }
        }
        for _ in 0..rng.random_range(0..4) {
            d.push(Detection { bbox: random_box(rng, 60.0), class_id: rng.random_range(0..classes), score: rng.random_range(0.0..1.0) });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}


/// Soft-NMS (both decay rules) and hard NMS against the references on
/// `instances` random clustered sets of 20 boxes.
pub fn nms_agreement(instances: u64) -> Result<String, String> {
    let params = [
        SoftNms { method: SoftNmsMethod::Linear, nt: 0.3, sigma: 0.5, score_floor: 0.001 },
        SoftNms { method: SoftNmsMethod::Gaussian, nt: 0.3, sigma: 0.5, score_floor: 0.001 },
    ];
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (boxes, scores) = clustered(&mut rng, 20);
        for p in &params {
            let got: Vec<usize> = plaindet::detect::soft_nms_indices(&boxes, &scores, p).iter().map(|x| x.0).collect();
            let want: Vec<usize> = ref_soft_nms(&boxes, &scores, p).iter().map(|x| x.0).collect();
            if got != want {
                return Err(format!("instance {seed}, {:?}: {got:?} vs {want:?}", p.method));
            }
        }
        if plaindet::detect::nms(&boxes, &scores, 0.5) != ref_hard_nms(&boxes, &scores, 0.5) {
            return Err(format!("instance {seed}: hard NMS differs"));
        }
    }
    Ok(format!("{instances} instances, identical selections"))
}

/// Largest |AP difference| over `instances` random scenes.
pub fn ap_agreement(instances: u64) -> Result<f64, String> {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (dets, gts) = scene(&mut rng, 4, 3);
        let got = plaindet::data::eval_ap(&dets, &gts, 3);
        let (ap, per_t) = ref_ap(&dets, &gts, 3, &thresholds);
        worst = worst.max((got.ap - ap).abs()).max((got.ap50 - per_t[0]).abs()).max((got.ap75 - per_t[5]).abs());
    }
    Ok(worst)
}
