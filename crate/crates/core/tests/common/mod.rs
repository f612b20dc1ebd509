//! Checks shared by the structural tests and the acceptance report. Each
//! returns a one-line detail on success and a reason on failure.
#![allow(dead_code)]

pub mod oracle;

use plaindet::backbone::{
    propagation_indices, window_partition, window_unpartition, Attention, AttnMode, Backbone, BackboneConfig, Placement,
    PropStrategy,
};
use plaindet::checkpoint::{load_checkpoint, save_checkpoint};
use plaindet::config::ExperimentConfig;
use plaindet::nn::{Init, Owner, ParamStore, RunCtx};
use plaindet::train::build_detector;
use plaindet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Small backbone on a 64 px input: an 8x8 token grid of four 4x4 windows.
pub fn probe_config(strategy: PropStrategy, count: usize, placement: Placement) -> BackboneConfig {
    BackboneConfig {
        depth: 8,
        dim: 16,
        heads: 2,
        patch_size: 8,
        window_size: 4,
        mlp_ratio: 2.0,
        prop_strategy: strategy,
        prop_count: count,
        prop_placement: placement,
        use_rel_pos_bias: true,
        drop_path_rate: 0.0,
        pretrain_grid: 4,
        img_size: 64,
    }
}

/// Backbone output with the conv propagation blocks inserted must equal the
/// plain windowed backbone bit for bit when both share every other weight.
pub fn zero_init_identity() -> Check {
    let image = random_tensor(&[2, 3, 64, 64], 7);
    let mut plain_ps = ParamStore::new();
    let plain = Backbone::new(&probe_config(PropStrategy::None, 0, Placement::Evenly), &mut plain_ps, &mut Init::new(1))
        .map_err(|e| e.to_string())?;
    let reference = plain.forward(&plain_ps, &image, &mut RunCtx::eval()).map_err(|e| e.to_string())?;
    for strategy in [PropStrategy::ConvNaive, PropStrategy::ConvBasic, PropStrategy::ConvBottleneck] {
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&probe_config(strategy, 4, Placement::Evenly), &mut ps, &mut Init::new(99))
            .map_err(|e| e.to_string())?;
        for p in plain_ps.iter() {
            let id = ps.find(&p.name).ok_or_else(|| format!("{strategy:?}: missing {}", p.name))?;
            ps.set_data(id, p.value.to_vec()).map_err(|e| e.to_string())?;
        }
        let out = bb.forward(&ps, &image, &mut RunCtx::eval()).map_err(|e| e.to_string())?;
        let same = out.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("{strategy:?}: output changed when zero-init blocks were inserted"));
        }
    }
    Ok("naive/basic/bottleneck blocks are exact identities at insertion".into())
}

/// Max |windowed - global| for windows covering (or padding past) the grid.
pub fn windowed_equals_global() -> Result<f64, String> {
    let mut ps = ParamStore::new();
    let mut init = Init::new(5);
    let attn = Attention::new(&mut ps, &mut init, "attn", 16, 2, Some(16), Owner::Block(0));
    // Non-zero bias tables so the relative-position path is exercised.
    for name in ["attn.rel_pos_h", "attn.rel_pos_w"] {
        let id = ps.find(name).ok_or("missing rel-pos table")?;
        let n = ps.get(id).numel();
        ps.set_data(id, random_tensor(&[n], n as u64).to_vec()).map_err(|e| e.to_string())?;
    }
    let x = random_tensor(&[2, 8, 8, 16], 11);
    let global = attn.forward(&ps, &x, AttnMode::Global).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for ws in [8, 10, 16] {
        let win = attn.forward(&ps, &x, AttnMode::Windowed(ws)).map_err(|e| e.to_string())?;
        let d = win.data().iter().zip(global.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok(worst)
}

pub fn partition_round_trip() -> Check {
    for (h, w, ws) in [(64, 64, 14), (14, 14, 14), (9, 13, 4), (16, 16, 4)] {
        let x = random_tensor(&[2, h, w, 3], (h * w + ws) as u64);
        let (win, pad) = window_partition(&x, ws).map_err(|e| e.to_string())?;
        if (h, w, ws) == (64, 64, 14) && (pad != (6, 6) || win.shape()[0] != 2 * 25) {
            return Err(format!("64x64 / 14: pad {pad:?}, {} windows", win.shape()[0]));
        }
        let back = window_unpartition(&win, ws, pad, (h, w)).map_err(|e| e.to_string())?;
        if back.shape() != x.shape() || back.data().iter().zip(x.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("{h}x{w} / {ws}: round trip not bit-exact"));
        }
    }
    Ok("bit-exact, 64x64 -> 70x70 with 25 windows".into())
}

pub fn propagation_indices_evenly() -> Check {
    let got = propagation_indices(24, 4, Placement::Evenly).map_err(|e| e.to_string())?;
    if got == [5, 11, 17, 23] {
        Ok(format!("{got:?}"))
    } else {
        Err(format!("got {got:?}"))
    }
}

pub fn checkpoint_round_trip() -> Check {
    let cfg = ExperimentConfig::tiny();
    let (_, mut ps) = build_detector(&cfg, 4).map_err(|e| e.to_string())?;
    // Awkward values must survive too.
    let id = ps.ids().next().ok_or("empty store")?;
    let mut v = ps.get(id).to_vec();
    v[0] = -0.0;
    v[1] = f64::MIN_POSITIVE / 2.0;
    v[2] = 1e300;
    ps.set_data(id, v).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &ps, &cfg).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let (_, mut restored) = build_detector(&cfg, 77).map_err(|e| e.to_string())?;
    ck.apply(&mut restored).map_err(|e| e.to_string())?;
    for (a, b) in ps.iter().zip(restored.iter()) {
        if a.name != b.name || a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("{} differs after reload", a.name));
        }
    }
    if ck.config().map_err(|e| e.to_string())? != cfg {
        return Err("config snapshot differs".into());
    }
    Ok(format!("{} tensors bit-identical", ps.len()))
}

/// Gradient of the summed output of the token cell at (row, col) with respect
/// to every input token, aggregated per 4x4 window of the 8x8 grid.
fn window_influence(bb: &Backbone, ps: &ParamStore, from_block: usize, cell: (usize, usize)) -> Result<[f64; 4], String> {
    let x = random_tensor(&[1, 8, 8, 16], 3).requires_grad();
    let y = bb.forward_blocks(ps, &x, from_block..bb.depth(), &mut RunCtx::eval()).map_err(|e| e.to_string())?;
    let probe = y.narrow(1, cell.0, 1).and_then(|t| t.narrow(2, cell.1, 1)).and_then(|t| t.sum()).map_err(|e| e.to_string())?;
    probe.backward().map_err(|e| e.to_string())?;
    let g = x.grad().ok_or("no gradient reached the input")?;
    let mut per = [0.0; 4];
    for r in 0..8 {
        for c in 0..8 {
            let w = (r / 4) * 2 + c / 4;
            for k in 0..16 {
                per[w] += g[(r * 8 + c) * 16 + k].abs();
            }
        }
    }
    Ok(per)
}

fn probe_backbone(strategy: PropStrategy, count: usize, placement: Placement) -> Result<(Backbone, ParamStore), String> {
    let mut ps = ParamStore::new();
    let bb = Backbone::new(&probe_config(strategy, count, placement), &mut ps, &mut Init::new(21)).map_err(|e| e.to_string())?;
    // Perturb the zero-initialized tensors so conv blocks and bias tables carry signal.
    let ids: Vec<_> = ps.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if ps.get(id).data().iter().all(|&v| v == 0.0) {
            let n = ps.get(id).numel();
            let v: Vec<f64> = random_tensor(&[n], 500 + k as u64).data().iter().map(|x| 0.05 * x).collect();
            ps.set_data(id, v).map_err(|e| e.to_string())?;
        }
    }
    Ok((bb, ps))
}

pub struct Locality {
    pub none_cross: f64,
    pub global_min: f64,
    pub first_k_cross: f64,
    pub first_k_from_start_min: f64,
}

/// Probe the top-left token cell. Window 0 is its own window.
pub fn locality() -> Result<Locality, String> {
    let cell = (1, 2);
    let (bb, ps) = probe_backbone(PropStrategy::None, 0, Placement::Evenly)?;
    let none = window_influence(&bb, &ps, 0, cell)?;
    let (bb, ps) = probe_backbone(PropStrategy::Global, 4, Placement::Evenly)?;
    let global = window_influence(&bb, &ps, 0, cell)?;
    let (bb, ps) = probe_backbone(PropStrategy::Global, 4, Placement::FirstK)?;
    let first_k = window_influence(&bb, &ps, 4, cell)?;
    let first_k_all = window_influence(&bb, &ps, 0, cell)?;
    if none[0] == 0.0 || first_k[0] == 0.0 {
        return Err("own window shows no influence".into());
    }
    let max3 = |v: [f64; 4]| v[1].max(v[2]).max(v[3]);
    let min3 = |v: [f64; 4]| v[1].min(v[2]).min(v[3]);
    Ok(Locality {
        none_cross: max3(none),
        global_min: min3(global),
        first_k_cross: max3(first_k),
        first_k_from_start_min: min3(first_k_all),
    })
}
