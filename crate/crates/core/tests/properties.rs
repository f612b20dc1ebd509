//! Property tests over randomized inputs and configurations.

use plaindet::backbone::{
    rel_pos_bias, window_partition, window_unpartition, Backbone, BackboneConfig, ConvPropKind, Placement, PropStrategy,
};
use plaindet::config::{DataConfig, DataSource, ExperimentConfig, GridConfig, OutputConfig, PropCell, PyramidConfig};
use plaindet::detect::{DetectConfig, NmsMethod};
use plaindet::nn::{Init, ParamStore, RunCtx};
use plaindet::pyramid::PyramidKind;
use plaindet::tensor::PoolKind;
use plaindet::train::{lr_at, TrainConfig};
use plaindet::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|i| vals[i % vals.len()] + i as f64 * 1e-3).collect(), shape).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..40)
}

proptest! {
    #[test]
    fn partition_round_trip_is_bit_exact(h in 1usize..20, w in 1usize..20, ws in 1usize..9, c in 1usize..4, v in values()) {
        let x = tensor(&[2, h, w, c], &v);
        let (win, pad) = window_partition(&x, ws).unwrap();
        prop_assert_eq!(win.shape()[0], 2 * h.div_ceil(ws) * w.div_ceil(ws));
        prop_assert_eq!(((h + pad.0) % ws, (w + pad.1) % ws), (0, 0));
        let back = window_unpartition(&win, ws, pad, (h, w)).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rel_pos_bias_depends_only_on_offsets(gh in 1usize..6, gw in 1usize..6, heads in 1usize..3, v in values()) {
        let s = gh.max(gw);
        let th = tensor(&[2 * s - 1, heads], &v);
        let tw = tensor(&[2 * s - 1, heads], &v.iter().map(|x| -x).collect::<Vec<_>>());
        let bias = rel_pos_bias((gh, gw), (gh, gw), &th, &tw).unwrap();
        let l = gh * gw;
        let d = bias.data();
        let mut seen = std::collections::HashMap::new();
        for h in 0..heads {
            for q in 0..l {
                for k in 0..l {
                    let key = (h, (q / gw) as isize - (k / gw) as isize, (q % gw) as isize - (k % gw) as isize);
                    let v = d[(h * l + q) * l + k];
                    let first = *seen.entry(key).or_insert(v);
                    prop_assert_eq!(first.to_bits(), v.to_bits());
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, n in 1usize..12, v in values()) {
        let x = tensor(&[rows, n], &v.iter().map(|a| a * 20.0).collect::<Vec<_>>());
        let y = x.softmax(1).unwrap();
        for r in 0..rows {
            let s: f64 = y.data()[r * n..(r + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.data()[r * n..(r + 1) * n].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn deconv_then_average_pool_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, v in values()) {
        let x = tensor(&[1, c, h, w], &v);
        // Channel-diagonal ones kernel: every input pixel fills its 2x2 block.
        let mut k = vec![0.0; c * c * 4];
        for i in 0..c {
            for t in 0..4 {
                k[(i * c + i) * 4 + t] = 1.0;
            }
        }
        let up = x.conv_transpose2d(&Tensor::new(k, &[c, c, 2, 2]).unwrap(), None, 2).unwrap();
        let back = up.pool2d(PoolKind::Avg, 2, 2).unwrap();
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lr_never_increases_after_warmup(
        warmup in 0usize..50,
        total in 60usize..400,
        m1 in 0.05f64..0.6,
        gap in 0.05f64..0.35,
        factor in 0.01f64..1.0,
    ) {
        let cfg = TrainConfig { warmup_iters: warmup, milestones: vec![m1, m1 + gap], step_factor: factor, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for it in warmup..total {
            let lr = lr_at(it, total, &cfg);
            prop_assert!(lr <= prev, "lr rose at iter {}", it);
            prev = lr;
        }
        for it in 1..warmup {
            prop_assert!(lr_at(it, total, &cfg) >= lr_at(it - 1, total, &cfg));
        }
    }
}

fn depth_and_prop() -> impl Strategy<Value = (usize, PropStrategy, usize, Placement)> {
    (prop::sample::select(vec![4usize, 8, 12]), 0usize..6, 0usize..3).prop_flat_map(|(depth, s, p)| {
        let strategy = [
            PropStrategy::None,
            PropStrategy::Global,
            PropStrategy::ConvNaive,
            PropStrategy::ConvBasic,
            PropStrategy::ConvBottleneck,
            PropStrategy::ShiftedWindow,
        ][s];
        let placement = [Placement::Evenly, Placement::FirstK, Placement::LastK][p];
        let counts: Vec<usize> = (0..=depth).filter(|c| placement != Placement::Evenly || *c == 0 || depth % c == 0).collect();
        prop::sample::select(counts).prop_map(move |count| (depth, strategy, count, placement))
    })
}

fn backbone() -> impl Strategy<Value = BackboneConfig> {
    (depth_and_prop(), prop::sample::select(vec![(32usize, 2usize), (48, 4), (64, 4), (96, 4)]), 0.5f64..5.0, any::<bool>(), 0.0f64..0.5, 2usize..8)
        .prop_map(|((depth, prop_strategy, prop_count, prop_placement), (dim, heads), mlp_ratio, rel, dpr, grid)| BackboneConfig {
            depth,
            dim,
            heads,
            patch_size: 8,
            window_size: 4,
            mlp_ratio,
            prop_strategy,
            prop_count,
            prop_placement,
            use_rel_pos_bias: rel,
            drop_path_rate: dpr,
            pretrain_grid: grid,
            img_size: 128,
        })
}

fn detect() -> impl Strategy<Value = DetectConfig> {
    (
        1.0f64..8.0,
        prop::collection::vec(0.25f64..4.0, 1..4),
        (0.3f64..0.5, 0.5f64..0.9),
        (1usize..512, 0.0f64..1.0, 1usize..500, 1usize..200),
        (1usize..256, 0.0f64..1.0, 0.0f64..1.0, 0usize..5),
        (1usize..9, 1usize..4, 0.0f64..0.5, 0.0f64..1.0, 0usize..3, 0.05f64..2.0, 1usize..200),
    )
        .prop_map(|(af, ratios, (neg, pos), (rb, rpf, pre, post), (roib, roipf, fg, hc), (pooler, sampling, st, nt, m, sigma, md))| {
            DetectConfig {
                num_classes: 3,
                anchor_factor: af,
                anchor_ratios: ratios,
                canonical: 28.0,
                rpn_pos_iou: pos,
                rpn_neg_iou: neg,
                rpn_batch: rb,
                rpn_pos_fraction: rpf,
                pre_nms_topk: pre,
                post_nms_topk: post,
                rpn_nms: 0.7,
                roi_batch: roib,
                roi_pos_fraction: roipf,
                roi_fg_iou: fg,
                head_convs: hc,
                pooler,
                sampling,
                score_thresh: st,
                nms_thresh: nt,
                nms_method: [NmsMethod::Hard, NmsMethod::SoftLinear, NmsMethod::SoftGaussian][m],
                soft_nms_sigma: sigma,
                max_dets: md,
            }
        })
}

fn train() -> impl Strategy<Value = TrainConfig> {
    (
        (1e-6f64..1e-2, 0.0f64..0.2, 0.5f64..0.99, 0.9f64..0.9999, 1e-12f64..1e-6),
        (0usize..500, 0.05f64..0.5, 0.05f64..0.45, 0.01f64..1.0, 0.05f64..1.0),
        (1usize..40, 1usize..16, any::<u64>(), 0.1f64..1.0, 1.0f64..2.0),
    )
        .prop_map(|((lr, wd, b1, b2, eps), (warm, m1, gap, factor, ld), (epochs, batch, seed, jmin, jmax))| TrainConfig {
            base_lr: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
            warmup_iters: warm,
            milestones: vec![m1, m1 + gap],
            step_factor: factor,
            layer_decay: ld,
            epochs,
            batch_size: batch,
            seed,
            jitter_min: jmin,
            jitter_max: jmax,
        })
}

fn cell() -> impl Strategy<Value = PropCell> {
    prop_oneof![
        Just(PropCell::None),
        Just(PropCell::Shifted),
        Just(PropCell::AllGlobal),
        (1usize..5, 0usize..3).prop_map(|(count, p)| PropCell::Global {
            count,
            placement: [Placement::Evenly, Placement::FirstK, Placement::LastK][p]
        }),
        (1usize..5, 0usize..3).prop_map(|(count, k)| PropCell::Conv {
            count,
            kind: [ConvPropKind::Naive, ConvPropKind::Basic, ConvPropKind::Bottleneck][k]
        }),
    ]
}

fn grid() -> impl Strategy<Value = Option<GridConfig>> {
    prop::option::of(
        (
            prop::collection::vec(prop::sample::select(PyramidKind::ALL.to_vec()), 1..4),
            prop::collection::vec(cell(), 1..4),
            prop::collection::vec(any::<u64>(), 1..4),
            any::<bool>(),
        )
            .prop_map(|(pyramids, cells, seeds, first)| {
                let baseline = if first { plaindet::config::row_label(pyramids[0], &cells[0]) } else { String::new() };
                GridConfig { pyramids, cells, seeds, baseline }
            }),
    )
}

fn experiment() -> impl Strategy<Value = ExperimentConfig> {
    (
        backbone(),
        (prop::sample::select(PyramidKind::ALL.to_vec()), 1usize..128),
        detect(),
        train(),
        (any::<bool>(), "[a-z][a-z0-9_/]{0,12}", 1usize..2000, 1usize..500, 1usize..9, 1usize..9, 2.0f64..8.0, 8.0f64..16.0, 1usize..10, any::<u64>()),
        "[a-z0-9_/]{0,12}",
        grid(),
    )
        .prop_map(|(mut backbone, (kind, out_dim), detect, train, d, dir, grid)| {
            if kind == PyramidKind::Fpn4Stage && backbone.depth % 4 != 0 {
                backbone.depth = 8;
                backbone.prop_count = 4;
            }
            let (snap, path, ti, vi, h, w, smin, smax, maxo, seed) = d;
            ExperimentConfig {
                backbone,
                pyramid: PyramidConfig { kind, out_dim },
                detect,
                train,
                data: DataConfig {
                    source: if snap { DataSource::Snapshot } else { DataSource::Synth },
                    path,
                    train_images: ti,
                    val_images: vi,
                    height: 16 * h,
                    width: 16 * w,
                    size_min: smin,
                    size_max: smax,
                    max_objects: maxo,
                    seed,
                },
                output: OutputConfig { dir },
                grid,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn config_round_trips_through_ini(cfg in experiment()) {
        prop_assert!(cfg.validate().is_ok(), "generator produced an invalid config: {:?}", cfg.validate());
        let text = cfg.to_ini();
        let back = ExperimentConfig::from_ini(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn backbone_forward_is_deterministic() {
    let cfg = BackboneConfig { depth: 4, dim: 16, heads: 2, img_size: 64, prop_count: 2, ..BackboneConfig::default() };
    let mut ps = ParamStore::new();
    let bb = Backbone::new(&cfg, &mut ps, &mut Init::new(3)).unwrap();
    let x = tensor(&[2, 3, 64, 64], &[0.1, 0.7, -0.3, 0.2]);
    let a = bb.forward(&ps, &x, &mut RunCtx::eval()).unwrap();
    let b = bb.forward(&ps, &x, &mut RunCtx::eval()).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
