//! Gradient-check suite: every differentiable op, the building blocks, and
//! the end-to-end detector loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{rel_pos_bias, window_partition, window_unpartition, Attention, AttnMode, ConvPropBlock, ConvPropKind};
use crate::config::ExperimentConfig;
use crate::detect::{roi_align, BBox};
use crate::error::{Error, Result};
use crate::nn::{Init, Owner, ParamStore, RunCtx};
use crate::pyramid::top_down_merge;
use crate::tensor::{grad_check_coords, interpolate_bicubic, PoolKind, Tensor};
use crate::train::build_detector;

pub const DEFAULT_OP_TOL: f64 = 1e-4;
pub const DEFAULT_E2E_TOL: f64 = 1e-3;
pub const MAX_PARAMS: usize = 100_000;
const EPS: f64 = 1e-6;
/// Larger step for whole-model losses, where cancellation error dominates.
const E2E_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub end_to_end: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub rows: Vec<CheckRow>,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_op_err(&self) -> f64 {
        self.rows.iter().filter(|r| !r.end_to_end).map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_e2e_err(&self) -> f64 {
        self.rows.iter().filter(|r| r.end_to_end).map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<w$}  {:>12}  {:>7}  {:>8}  status\n", "check", "max_rel_err", "coords", "tol");
        for r in &self.rows {
            s += &format!(
                "{:<w$}  {:>12.3e}  {:>7}  {:>8.0e}  {}\n",
                r.name,
                r.max_rel_err,
                r.checked,
                r.tol,
                if r.pass { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// Options for [`run_gradcheck`].
#[derive(Debug, Clone, Copy)]
pub struct GradOptions {
    pub op_tol: f64,
    pub e2e_tol: f64,
    /// Scale every analytic gradient by 1.01 (fault injection for testing the
    /// harness itself).
    pub corrupt_backward: bool,
    pub seed: u64,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions { op_tol: DEFAULT_OP_TOL, e2e_tol: DEFAULT_E2E_TOL, corrupt_backward: false, seed: 0 }
    }
}

/// Identity whose backward is deliberately off by 1 %.
fn corrupt(x: &Tensor) -> Result<Tensor> {
    Tensor::from_op(
        "corrupt",
        x.to_vec(),
        x.shape().to_vec(),
        &[x],
        Box::new(|g, _| vec![Some(g.iter().map(|v| v * 1.01).collect())]),
    )
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("shape matches")
}

/// `sum(y * w)` with fixed pseudo-random `w`, so every output element
/// contributes a distinct weight.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    y.mul(&randn(&mut rng, y.shape()))?.sum()
}

struct Suite {
    opts: GradOptions,
    rng: ChaCha8Rng,
    rows: Vec<CheckRow>,
}

impl Suite {
    /// Check `f` at a fresh random input of `shape`.
    fn op(&mut self, name: &str, shape: &[usize], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<()> {
        let x = randn(&mut self.rng, shape);
        self.at(name, &x, f)
    }

    fn at(&mut self, name: &str, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<()> {
        let seed = self.rng.random();
        let corrupt_on = self.opts.corrupt_backward;
        let g = |t: &Tensor| {
            let t = if corrupt_on { corrupt(t)? } else { t.clone() };
            project(&f(&t)?, seed)
        };
        let coords: Vec<usize> = (0..x.numel()).collect();
        let rep = grad_check_coords(g, x, EPS, &coords)?;
        self.rows.push(CheckRow {
            name: name.into(),
            end_to_end: false,
            max_rel_err: rep.max_rel_err,
            checked: rep.checked,
            tol: self.opts.op_tol,
            pass: rep.max_rel_err < self.opts.op_tol,
        });
        Ok(())
    }
}

/// Run the per-op checks plus the end-to-end check on `cfg`'s model.
pub fn run_gradcheck(cfg: &ExperimentConfig, opts: GradOptions) -> Result<GradReport> {
    let mut s = Suite { opts, rng: ChaCha8Rng::seed_from_u64(opts.seed), rows: Vec::new() };
    let b = randn(&mut s.rng, &[4, 5]);
    s.op("matmul.lhs", &[3, 4], |x| x.matmul(&b))?;
    let a = randn(&mut s.rng, &[2, 3, 4]);
    s.op("matmul.rhs_broadcast", &[4, 5], |x| a.matmul(x))?;
    let y = randn(&mut s.rng, &[3, 1]);
    s.op("add_broadcast", &[3, 4], |x| x.add(&y))?;
    s.op("sub", &[3, 4], |x| x.sub(&x.scale(0.3)?.mul(x)?))?;
    s.op("mul_broadcast.rhs", &[3, 1], |x| a.narrow(0, 0, 1)?.reshape(&[3, 4])?.mul(x))?;
    s.op("mean", &[3, 4], |x| x.mul(x)?.mean())?;
    s.op("scale_leading", &[3, 2], |x| x.scale_leading(&[0.5, 2.0, -1.0]))?;
    s.op("reshape_permute", &[2, 3, 4], |x| x.reshape(&[6, 4])?.permute(&[1, 0]))?;
    s.op("narrow_pad", &[2, 5], |x| x.narrow(1, 1, 3)?.pad(0, 1, 2))?;
    s.op("roll", &[3, 4], |x| x.roll(1, -1)?.roll(0, 2))?;
    s.op("concat", &[2, 3], |x| Tensor::concat(&[x.clone(), x.scale(2.0)?], 1))?;
    s.op("index_select", &[4, 3], |x| x.index_select(&[2, 0, 2]))?;
    s.op("softmax", &[3, 5], |x| x.softmax(1))?;
    let gamma = randn(&mut s.rng, &[6]);
    let beta = randn(&mut s.rng, &[6]);
    s.op("layer_norm.x", &[2, 3, 6], |x| x.layer_norm(&gamma, &beta, 2, 1e-6))?;
    let xin = randn(&mut s.rng, &[2, 6, 3]);
    s.op("layer_norm.gamma", &[6], |g| xin.layer_norm(g, &beta, 1, 1e-6))?;
    s.op("gelu", &[4, 5], |x| x.gelu())?;
    s.op("relu", &[4, 5], |x| x.scale(3.0)?.relu())?;
    let w = randn(&mut s.rng, &[4, 3, 3, 3]);
    let bias = randn(&mut s.rng, &[4]);
    s.op("conv2d.input", &[2, 3, 5, 5], |x| x.conv2d(&w, Some(&bias), 2, 1))?;
    let img = randn(&mut s.rng, &[1, 3, 5, 5]);
    s.op("conv2d.weight", &[4, 3, 3, 3], |k| img.conv2d(k, None, 1, 1))?;
    let wt = randn(&mut s.rng, &[3, 2, 2, 2]);
    s.op("conv_transpose2d.input", &[1, 3, 3, 3], |x| x.conv_transpose2d(&wt, Some(&bias.narrow(0, 0, 2)?), 2))?;
    let small = randn(&mut s.rng, &[1, 3, 3, 3]);
    s.op("conv_transpose2d.weight", &[3, 2, 2, 2], |k| small.conv_transpose2d(k, None, 2))?;
    s.op("max_pool", &[1, 2, 4, 4], |x| x.pool2d(PoolKind::Max, 2, 2))?;
    s.op("avg_pool", &[1, 2, 4, 4], |x| x.pool2d(PoolKind::Avg, 2, 2))?;
    s.op("upsample_nearest", &[1, 2, 2, 3], |x| x.upsample_nearest(2))?;
    s.op("interpolate_bicubic", &[2, 3, 3], |x| interpolate_bicubic(x, (5, 4)))?;
    s.op("bce_with_logits", &[6], |x| x.bce_with_logits_sum(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]))?;
    s.op("smooth_l1", &[6], |x| x.scale(2.0)?.smooth_l1_sum(&[0.0, 0.3, -0.2, 1.0, 0.5, 0.1], 1.0))?;
    s.op("cross_entropy", &[3, 4], |x| x.cross_entropy_sum(&[0, 3, 1]))?;
    let rois = [(0, BBox::new(0.7, 1.1, 5.3, 4.9)), (1, BBox::new(2.2, 0.4, 7.6, 6.8))];
    s.op("roi_align", &[2, 2, 4, 4], |x| roi_align(x, &rois, 0.5, 2, 2))?;
    let fixed_w = randn(&mut s.rng, &[5, 2]);
    s.op("rel_pos_bias.table", &[5, 2], |t| rel_pos_bias((3, 2), (3, 3), t, &fixed_w))?;
    s.op("window_partition", &[1, 5, 6, 2], |x| {
        let (win, pad) = window_partition(x, 4)?;
        window_unpartition(&win.scale(1.5)?, 4, pad, (5, 6))
    })?;
    let coarse = randn(&mut s.rng, &[1, 2, 2, 2]);
    s.op("top_down_merge", &[1, 2, 4, 4], |x| Ok(top_down_merge(&[x.clone(), coarse.clone()])?.remove(0)))?;

    let mut ps = ParamStore::new();
    let mut init = Init::new(opts.seed);
    let attn = Attention::new(&mut ps, &mut init, "attn", 8, 2, Some(4), Owner::Block(0));
    for (name, mode) in [
        ("attention.windowed", AttnMode::Windowed(2)),
        ("attention.global", AttnMode::Global),
        ("attention.shifted", AttnMode::Shifted { ws: 2, shift: 1 }),
    ] {
        let ps = &ps;
        s.op(name, &[1, 3, 4, 8], |x| attn.forward(ps, x, mode))?;
    }
    if let Some(id) = ps.find("attn.rel_pos_h") {
        let table = randn(&mut s.rng, &[7, 2]);
        let x = randn(&mut s.rng, &[1, 3, 3, 8]);
        s.at("attention.rel_pos_table", &table, |t| attn.forward(&ps.replaced(id, t.clone()), &x, AttnMode::Windowed(2)))?;
    }
    let cp = ConvPropBlock::new(&mut ps, &mut init, "cp", 8, ConvPropKind::Bottleneck, Owner::Block(0));
    let last = ps.find("cp.conv3.weight").expect("bottleneck has three convs");
    let live = ps.replaced(last, randn(&mut s.rng, ps.get(last).shape()));
    s.op("conv_prop.bottleneck", &[1, 3, 3, 8], |x| cp.forward(&live, x))?;

    end_to_end(cfg, &mut s)?;
    Ok(GradReport { rows: s.rows })
}

/// Transformer blocks and the full detector loss, differentiated with
/// respect to a sample of coordinates in representative parameters.
fn end_to_end(cfg: &ExperimentConfig, s: &mut Suite) -> Result<()> {
    let (det, ps) = build_detector(cfg, s.opts.seed)?;
    if ps.num_scalars() > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model (at most {MAX_PARAMS} parameters), this config has {}",
            ps.num_scalars()
        )));
    }
    let (h, w) = (cfg.data.height, cfg.data.width);
    let images = randn(&mut s.rng, &[1, 3, h, w]).scale(0.5)?.add_scalar(0.5)?.detach();
    let gt = vec![vec![
        (BBox::new(0.1 * w as f64, 0.15 * h as f64, 0.55 * w as f64, 0.6 * h as f64), 0),
        (BBox::new(0.5 * w as f64, 0.4 * h as f64, 0.9 * w as f64, 0.95 * h as f64), 1),
    ]];
    let proposals = vec![vec![
        BBox::new(0.12 * w as f64, 0.1 * h as f64, 0.5 * w as f64, 0.55 * h as f64),
        BBox::new(0.45 * w as f64, 0.5 * h as f64, 0.85 * w as f64, 0.9 * h as f64),
        BBox::new(0.05 * w as f64, 0.6 * h as f64, 0.3 * w as f64, 0.95 * h as f64),
    ]];

    let tokens = det.backbone.embed(&ps, &images)?.detach();
    let depth = det.backbone.depth();
    let corrupt_on = s.opts.corrupt_backward;
    let seed = s.rng.random();
    let record = |s: &mut Suite, name: String, x: &Tensor, f: &dyn Fn(&Tensor) -> Result<Tensor>, n: usize| -> Result<()> {
        let coords: Vec<usize> = (0..n).map(|i| i * x.numel() / n).collect();
        let g = |t: &Tensor| {
            let t = if corrupt_on { corrupt(t)? } else { t.clone() };
            f(&t)
        };
        let rep = grad_check_coords(g, x, E2E_EPS, &coords)?;
        s.rows.push(CheckRow {
            name,
            end_to_end: true,
            max_rel_err: rep.max_rel_err,
            checked: rep.checked,
            tol: s.opts.e2e_tol,
            pass: rep.max_rel_err < s.opts.e2e_tol,
        });
        Ok(())
    };
    for i in 0..depth {
        let f = |t: &Tensor| project(&det.backbone.forward_blocks(&ps, t, i..i + 1, &mut RunCtx::eval())?, seed);
        record(s, format!("block.{i}.input"), &tokens, &f, 12)?;
    }
    let f = |t: &Tensor| project(&det.backbone.forward_blocks(&ps, t, 0..depth, &mut RunCtx::eval())?, seed);
    record(s, "backbone.input".into(), &tokens, &f, 12)?;

    let loss = |p: &ParamStore| -> Result<Tensor> {
        det.losses(p, &images, &gt, Some(&proposals), &mut RunCtx::eval())?.total()
    };
    let prefixes = [
        "backbone.patch_embed.weight",
        "backbone.pos_embed",
        "backbone.blocks.0.attn.qkv.weight",
        "backbone.blocks.0.attn.rel_pos_h",
        &format!("backbone.blocks.{}.mlp.fc1.weight", depth - 1),
        "pyramid.",
        "rpn.",
        "roi_head.",
    ];
    for prefix in prefixes {
        let Some(p) = ps.iter().find(|p| p.name.starts_with(prefix)) else { continue };
        let id = ps.find(&p.name).expect("listed parameter exists");
        let name = format!("e2e.{}", p.name);
        let f = |t: &Tensor| loss(&ps.replaced(id, t.clone()));
        record(s, name, ps.get(id), &f, 8)?;
    }
    Ok(())
}
