//! Soft-NMS and AP against brute-force reference implementations.

mod common;

use common::oracle::{clustered, ref_ap, ref_hard_nms, ref_soft_nms, scene};
use plaindet::data::{eval_ap, eval_ap_at};
use plaindet::detect::{nms, soft_nms_indices, SoftNms, SoftNmsMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn soft_nms_matches_reference() {
    let params = [
        SoftNms { method: SoftNmsMethod::Linear, nt: 0.3, sigma: 0.5, score_floor: 0.001 },
        SoftNms { method: SoftNmsMethod::Linear, nt: 0.5, sigma: 0.5, score_floor: 0.05 },
        SoftNms { method: SoftNmsMethod::Gaussian, nt: 0.3, sigma: 0.5, score_floor: 0.001 },
        SoftNms { method: SoftNmsMethod::Gaussian, nt: 0.3, sigma: 0.1, score_floor: 0.01 },
    ];
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (boxes, scores) = clustered(&mut rng, 20);
        for p in &params {
            let got = soft_nms_indices(&boxes, &scores, p);
            let want = ref_soft_nms(&boxes, &scores, p);
            let gi: Vec<usize> = got.iter().map(|x| x.0).collect();
            let wi: Vec<usize> = want.iter().map(|x| x.0).collect();
            assert_eq!(gi, wi, "seed {seed}, {p:?}");
            for (g, w) in got.iter().zip(&want) {
                assert!((g.1 - w.1).abs() <= 1e-12 * w.1.abs().max(1.0), "seed {seed}: score {} vs {}", g.1, w.1);
            }
        }
    }
}

#[test]
fn hard_nms_matches_reference() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (boxes, scores) = clustered(&mut rng, 20);
        for t in [0.3, 0.5, 0.7] {
            assert_eq!(nms(&boxes, &scores, t), ref_hard_nms(&boxes, &scores, t), "seed {seed} thresh {t}");
        }
    }
}

#[test]
fn eval_ap_matches_reference() {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (dets, gts) = scene(&mut rng, 4, 3);
        let got = eval_ap(&dets, &gts, 3);
        let (ap, per_t) = ref_ap(&dets, &gts, 3, &thresholds);
        assert!((got.ap - ap).abs() < 1e-9, "seed {seed}: {} vs {ap}", got.ap);
        assert!((got.ap50 - per_t[0]).abs() < 1e-9, "seed {seed}: AP50 {} vs {}", got.ap50, per_t[0]);
        assert!((got.ap75 - per_t[5]).abs() < 1e-9, "seed {seed}: AP75 {} vs {}", got.ap75, per_t[5]);
    }
}

#[test]
fn single_threshold_matches_reference() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (dets, gts) = scene(&mut rng, 3, 2);
        let got = eval_ap_at(&dets, &gts, 2, &[0.6]);
        let (ap, _) = ref_ap(&dets, &gts, 2, &[0.6]);
        assert!((got.ap - ap).abs() < 1e-9, "seed {seed}: {} vs {ap}", got.ap);
    }
}
