//! Plain ViT backbone adapted to high-resolution detection input.
//!
//! Every block attends within non-overlapping windows unless the configured
//! propagation strategy says otherwise: a handful of blocks can switch to
//! global attention, be followed by a zero-initialized residual conv block, or
//! (as a comparison point) alternate with shifted windows. The output is the
//! single stride-`patch_size` map of the last block, channels last.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{drop_path, Conv2d, Init, LayerNorm, Linear, Owner, ParamId, ParamStore, RunCtx};
use crate::tensor::{interpolate_bicubic, Tensor};

/// How information crosses window boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropStrategy {
    None,
    Global,
    ConvNaive,
    ConvBasic,
    ConvBottleneck,
    ShiftedWindow,
}

impl PropStrategy {
    pub fn conv_kind(self) -> Option<ConvPropKind> {
        match self {
            PropStrategy::ConvNaive => Some(ConvPropKind::Naive),
            PropStrategy::ConvBasic => Some(ConvPropKind::Basic),
            PropStrategy::ConvBottleneck => Some(ConvPropKind::Bottleneck),
            _ => None,
        }
    }
}

impl fmt::Display for PropStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PropStrategy::None => "none",
            PropStrategy::Global => "global",
            PropStrategy::ConvNaive => "conv_naive",
            PropStrategy::ConvBasic => "conv_basic",
            PropStrategy::ConvBottleneck => "conv_bottleneck",
            PropStrategy::ShiftedWindow => "shifted_window",
        })
    }
}

impl FromStr for PropStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => PropStrategy::None,
            "global" => PropStrategy::Global,
            "conv_naive" => PropStrategy::ConvNaive,
            "conv_basic" => PropStrategy::ConvBasic,
            "conv_bottleneck" => PropStrategy::ConvBottleneck,
            "shifted_window" => PropStrategy::ShiftedWindow,
            _ => return Err(format!("unknown propagation strategy `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Evenly,
    FirstK,
    LastK,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Evenly => "evenly",
            Placement::FirstK => "first_k",
            Placement::LastK => "last_k",
        })
    }
}

impl FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "evenly" => Placement::Evenly,
            "first_k" => Placement::FirstK,
            "last_k" => Placement::LastK,
            _ => return Err(format!("unknown placement `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch side in pixels; also the stride of the output map.
    pub patch_size: usize,
    /// Window side in tokens.
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub prop_strategy: PropStrategy,
    pub prop_count: usize,
    pub prop_placement: Placement,
    pub use_rel_pos_bias: bool,
    pub drop_path_rate: f64,
    /// Token grid of the positional embedding as stored (the pre-training grid).
    pub pretrain_grid: usize,
    /// Largest input side in pixels; sizes the global-attention bias tables.
    pub img_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 8,
            dim: 96,
            heads: 4,
            patch_size: 8,
            window_size: 4,
            mlp_ratio: 4.0,
            prop_strategy: PropStrategy::Global,
            prop_count: 4,
            prop_placement: Placement::Evenly,
            use_rel_pos_bias: true,
            drop_path_rate: 0.1,
            pretrain_grid: 4,
            img_size: 128,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return err("backbone.depth must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return err(format!("backbone.dim ({}) must be divisible by backbone.heads ({})", self.dim, self.heads));
        }
        if self.window_size == 0 {
            return err("backbone.window_size must be at least 1".into());
        }
        if self.patch_size == 0 {
            return err("backbone.patch_size must be positive".into());
        }
        if self.pretrain_grid < 2 {
            return err("backbone.pretrain_grid must be at least 2".into());
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "backbone.img_size ({}) must be divisible by backbone.patch_size ({})",
                self.img_size, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return err(format!("backbone.drop_path_rate must lie in [0, 1), got {}", self.drop_path_rate));
        }
        if !(self.mlp_ratio > 0.0) {
            return err("backbone.mlp_ratio must be positive".into());
        }
        if self.prop_strategy == PropStrategy::ShiftedWindow && !self.window_size.is_multiple_of(2) {
            return err(format!(
                "backbone.prop_strategy=shifted_window requires an even backbone.window_size, got {}",
                self.window_size
            ));
        }
        if uses_indices(self.prop_strategy) {
            if self.prop_count > self.depth {
                return err(format!(
                    "backbone.prop_count ({}) exceeds backbone.depth ({})",
                    self.prop_count, self.depth
                ));
            }
            if self.prop_placement == Placement::Evenly && self.prop_count > 0 && !self.depth.is_multiple_of(self.prop_count) {
                return err(format!(
                    "backbone.prop_placement=evenly requires backbone.depth ({}) divisible by backbone.prop_count ({})",
                    self.depth, self.prop_count
                ));
            }
        }
        Ok(())
    }
}

fn uses_indices(s: PropStrategy) -> bool {
    !matches!(s, PropStrategy::None | PropStrategy::ShiftedWindow)
}

/// Blocks that carry the propagation strategy.
///
/// `Evenly` splits the blocks into `count` equal subsets and picks the last
/// block of each; `FirstK`/`LastK` take a contiguous run at either end.
pub fn propagation_indices(depth: usize, count: usize, placement: Placement) -> Result<Vec<usize>> {
    if count > depth {
        return Err(Error::Config(format!("propagation count {count} exceeds depth {depth}")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    Ok(match placement {
        Placement::Evenly => {
            if !depth.is_multiple_of(count) {
                return Err(Error::Config(format!(
                    "evenly placing {count} propagation blocks requires depth divisible by {count}, got {depth}"
                )));
            }
            let chunk = depth / count;
            (1..=count).map(|i| i * chunk - 1).collect()
        }
        Placement::FirstK => (0..count).collect(),
        Placement::LastK => (depth - count..depth).collect(),
    })
}

/// Split `[B, H, W, C]` into `[B * nw, ws, ws, C]` windows, zero-padding the
/// bottom/right edges up to a multiple of `ws`. Returns the padding applied.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let [b, h, w, c] = *x.shape() else {
        return Err(Error::dim("window_partition", format!("expected [B, H, W, C], got {:?}", x.shape())));
    };
    if ws == 0 {
        return Err(Error::dim("window_partition", "window size must be at least 1"));
    }
    let ph = (ws - h % ws) % ws;
    let pw = (ws - w % ws) % ws;
    let padded = x.pad(1, 0, ph)?.pad(2, 0, pw)?;
    let (nh, nw) = ((h + ph) / ws, (w + pw) / ws);
    let windows = padded
        .reshape(&[b, nh, ws, nw, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nh * nw, ws, ws, c])?;
    Ok((windows, (ph, pw)))
}

/// Inverse of [`window_partition`]; crops the padding back off.
pub fn window_unpartition(windows: &Tensor, ws: usize, pad: (usize, usize), hw: (usize, usize)) -> Result<Tensor> {
    let [n, wh, ww, c] = *windows.shape() else {
        return Err(Error::dim("window_unpartition", format!("expected [N, ws, ws, C], got {:?}", windows.shape())));
    };
    let (h, w) = hw;
    let (hp, wp) = (h + pad.0, w + pad.1);
    if wh != ws || ww != ws || hp % ws != 0 || wp % ws != 0 {
        return Err(Error::dim("window_unpartition", format!("windows {:?} for grid {hp}x{wp}", windows.shape())));
    }
    let (nh, nw) = (hp / ws, wp / ws);
    if n % (nh * nw) != 0 {
        return Err(Error::dim("window_unpartition", format!("{n} windows for a {nh}x{nw} tiling")));
    }
    let b = n / (nh * nw);
    let mut x = windows
        .reshape(&[b, nh, nw, ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, hp, wp, c])?;
    if pad.0 > 0 {
        x = x.narrow(1, 0, h)?;
    }
    if pad.1 > 0 {
        x = x.narrow(2, 0, w)?;
    }
    Ok(x)
}

/// Decomposed relative-position bias `T_h[Δh] + T_w[Δw]` for every
/// (query, key) pair, per head. Tables are `[2S - 1, heads]`; the result is
/// `[heads, Lq, Lk]` with tokens in row-major grid order.
pub fn rel_pos_bias(q_hw: (usize, usize), k_hw: (usize, usize), table_h: &Tensor, table_w: &Tensor) -> Result<Tensor> {
    let [rows_h, heads] = *table_h.shape() else {
        return Err(Error::dim("rel_pos_bias", format!("table shape {:?}", table_h.shape())));
    };
    if table_w.shape() != [rows_h, heads] || rows_h % 2 == 0 {
        return Err(Error::dim("rel_pos_bias", format!("tables {:?} / {:?}", table_h.shape(), table_w.shape())));
    }
    let s = rows_h.div_ceil(2);
    let max_extent = q_hw.0.max(q_hw.1).max(k_hw.0).max(k_hw.1);
    if max_extent > s {
        return Err(Error::Contract(format!(
            "relative offset out of table range: grid extent {max_extent} needs tables for S >= {max_extent}, have S = {s}"
        )));
    }
    let lq = q_hw.0 * q_hw.1;
    let lk = k_hw.0 * k_hw.1;
    // Offsets index row (Δ + S - 1).
    let mut idx_h = Vec::with_capacity(lq * lk);
    let mut idx_w = Vec::with_capacity(lq * lk);
    for qi in 0..q_hw.0 {
        for qj in 0..q_hw.1 {
            for ki in 0..k_hw.0 {
                for kj in 0..k_hw.1 {
                    idx_h.push(qi + s - 1 - ki);
                    idx_w.push(qj + s - 1 - kj);
                }
            }
        }
    }
    let (th, tw) = (table_h.data(), table_w.data());
    let mut out = vec![0.0; heads * lq * lk];
    for hd in 0..heads {
        for p in 0..lq * lk {
            out[hd * lq * lk + p] = th[idx_h[p] * heads + hd] + tw[idx_w[p] * heads + hd];
        }
    }
    let n_table = rows_h * heads;
    Tensor::from_op(
        "rel_pos_bias",
        out,
        vec![heads, lq, lk],
        &[table_h, table_w],
        Box::new(move |g, needs| {
            let scatter = |idx: &[usize]| {
                let mut gt = vec![0.0; n_table];
                for hd in 0..heads {
                    for (p, &r) in idx.iter().enumerate() {
                        gt[r * heads + hd] += g[hd * lq * lk + p];
                    }
                }
                gt
            };
            vec![needs[0].then(|| scatter(&idx_h)), needs[1].then(|| scatter(&idx_w))]
        }),
    )
}

/// Attention layout for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Windowed(usize),
    Global,
    /// Windows of side `ws` on a grid cyclically rolled by `shift` tokens.
    Shifted { ws: usize, shift: usize },
}

#[derive(Debug, Clone)]
struct RelPos {
    table_h: ParamId,
    table_w: ParamId,
}

/// Multi-head self-attention with optional decomposed relative-position bias.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    rel_pos: Option<RelPos>,
}

impl Attention {
    /// `table_extent` is the largest grid side the bias tables must cover.
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        table_extent: Option<usize>,
        owner: Owner,
    ) -> Self {
        let qkv = Linear::new(ps, init, &format!("{name}.qkv"), dim, 3 * dim, owner);
        let proj = Linear::new(ps, init, &format!("{name}.proj"), dim, dim, owner);
        // Zero-initialized so inserting the bias leaves attention unchanged.
        let rel_pos = table_extent.map(|s| RelPos {
            table_h: ps.add(format!("{name}.rel_pos_h"), Tensor::zeros(&[2 * s - 1, heads]), owner, false),
            table_w: ps.add(format!("{name}.rel_pos_w"), Tensor::zeros(&[2 * s - 1, heads]), owner, false),
        });
        Attention { qkv, proj, heads, rel_pos }
    }

    /// Attention over a `[B, H, W, C]` token grid in the given layout.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: AttnMode) -> Result<Tensor> {
        let [_, h, w, _] = *x.shape() else {
            return Err(Error::dim("attention", format!("expected [B, H, W, C], got {:?}", x.shape())));
        };
        match mode {
            AttnMode::Global => self.attend(ps, x, None),
            AttnMode::Windowed(ws) => self.windowed(ps, x, ws),
            AttnMode::Shifted { ws, shift } => {
                if ws % 2 != 0 {
                    return Err(Error::Config(format!("shifted window attention requires an even window size, got {ws}")));
                }
                let rolled = x.roll(1, -(shift as isize))?.roll(2, -(shift as isize))?;
                let y = self.windowed(ps, &rolled, ws)?;
                let _ = (h, w);
                y.roll(1, shift as isize)?.roll(2, shift as isize)
            }
        }
    }

    fn windowed(&self, ps: &ParamStore, x: &Tensor, ws: usize) -> Result<Tensor> {
        let [b, h, w, _] = *x.shape() else { unreachable!("checked by caller") };
        let (windows, pad) = window_partition(x, ws)?;
        let mask = (pad != (0, 0)).then(|| padding_mask(b, h, w, ws));
        let y = self.attend(ps, &windows, mask)?;
        window_unpartition(&y, ws, pad, (h, w))
    }

    /// Full attention inside each of the `N` grids of `x: [N, gh, gw, C]`.
    /// `key_mask` holds an additive per-key logit offset, `[N * gh * gw]`.
    fn attend(&self, ps: &ParamStore, x: &Tensor, key_mask: Option<Vec<f64>>) -> Result<Tensor> {
        let [n, gh, gw, c] = *x.shape() else {
            return Err(Error::dim("attention", format!("expected [N, H, W, C], got {:?}", x.shape())));
        };
        let (l, heads) = (gh * gw, self.heads);
        let hd = c / heads;
        let qkv = self
            .qkv
            .forward(ps, &x.reshape(&[n * l, c])?)?
            .reshape(&[n, l, 3, heads, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let pick = |i: usize| -> Result<Tensor> { qkv.narrow(0, i, 1)?.reshape(&[n * heads, l, hd]) };
        let q = pick(0)?.scale(1.0 / (hd as f64).sqrt())?;
        let k = pick(1)?;
        let v = pick(2)?;
        let mut logits = q.matmul(&k.permute(&[0, 2, 1])?)?.reshape(&[n, heads, l, l])?;
        if let Some(rp) = &self.rel_pos {
            let bias = rel_pos_bias((gh, gw), (gh, gw), ps.get(rp.table_h), ps.get(rp.table_w))?;
            logits = logits.add(&bias)?;
        }
        if let Some(mask) = key_mask {
            logits = logits.add(&Tensor::raw(mask, vec![n, 1, 1, l]))?;
        }
        let attn = logits.softmax(3)?.reshape(&[n * heads, l, l])?;
        let out = attn
            .matmul(&v)?
            .reshape(&[n, heads, l, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * l, c])?;
        self.proj.forward(ps, &out)?.reshape(&[n, gh, gw, c])
    }
}

/// Logit offset that removes padded keys from every window's softmax.
const MASKED_LOGIT: f64 = -1e30;

fn padding_mask(b: usize, h: usize, w: usize, ws: usize) -> Vec<f64> {
    let (nh, nw) = (h.div_ceil(ws), w.div_ceil(ws));
    let mut mask = Vec::with_capacity(b * nh * nw * ws * ws);
    for _ in 0..b {
        for wi in 0..nh {
            for wj in 0..nw {
                for ti in 0..ws {
                    for tj in 0..ws {
                        let real = wi * ws + ti < h && wj * ws + tj < w;
                        mask.push(if real { 0.0 } else { MASKED_LOGIT });
                    }
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvPropKind {
    /// One 3x3 conv.
    Naive,
    /// Two 3x3 convs.
    Basic,
    /// 1x1 -> 3x3 -> 1x1 with inner width C/4.
    Bottleneck,
}

/// Residual conv block `x + F(x)` whose last conv starts at zero, so a freshly
/// inserted block is an exact identity.
#[derive(Debug, Clone)]
pub struct ConvPropBlock {
    layers: Vec<(Conv2d, Option<LayerNorm>)>,
}

impl ConvPropBlock {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, dim: usize, kind: ConvPropKind, owner: Owner) -> Self {
        // (in, out, kernel) per conv
        let plan: Vec<(usize, usize, usize)> = match kind {
            ConvPropKind::Naive => vec![(dim, dim, 3)],
            ConvPropKind::Basic => vec![(dim, dim, 3), (dim, dim, 3)],
            ConvPropKind::Bottleneck => {
                let inner = (dim / 4).max(1);
                vec![(dim, inner, 1), (inner, inner, 3), (inner, dim, 1)]
            }
        };
        let last = plan.len() - 1;
        let layers = plan
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k))| {
                let cname = format!("{name}.conv{}", i + 1);
                if i == last {
                    (Conv2d::zeroed(ps, &cname, cin, cout, k, true, owner), None)
                } else {
                    let conv = Conv2d::new(ps, init, &cname, cin, cout, k, 1, false, owner);
                    (conv, Some(LayerNorm::new(ps, &format!("{name}.norm{}", i + 1), cout, owner)))
                }
            })
            .collect();
        ConvPropBlock { layers }
    }

    /// `x: [B, H, W, C]` -> same shape.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.permute(&[0, 3, 1, 2])?;
        for (conv, norm) in &self.layers {
            y = conv.forward(ps, &y)?;
            if let Some(norm) = norm {
                y = norm.forward(ps, &y, 1)?.gelu()?;
            }
        }
        x.add(&y.permute(&[0, 2, 3, 1])?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    mode: AttnMode,
    drop_path: f64,
    conv_prop: Option<ConvPropBlock>,
}

impl Block {
    fn forward(&self, ps: &ParamStore, x: &Tensor, ctx: &mut RunCtx) -> Result<Tensor> {
        let h = self.attn.forward(ps, &self.norm1.forward(ps, x, 3)?, self.mode)?;
        let x = x.add(&drop_path(&h, self.drop_path, ctx)?)?;
        let m = self.fc2.forward(ps, &self.fc1.forward(ps, &self.norm2.forward(ps, &x, 3)?)?.gelu()?)?;
        let x = x.add(&drop_path(&m, self.drop_path, ctx)?)?;
        match &self.conv_prop {
            Some(cp) => cp.forward(ps, &x),
            None => Ok(x),
        }
    }
}

/// Patch projection plus absolute positional embedding.
///
/// `image: [B, 3, H, W]`, `filters: [dim, 3, p, p]`, `pos_embed: [dim, G, G]`
/// (bicubically resized to the token grid when it differs). Returns tokens
/// `[B, H/p, W/p, dim]`.
pub fn patch_embed(image: &Tensor, filters: &Tensor, bias: Option<&Tensor>, pos_embed: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = *image.shape() else {
        return Err(Error::dim("patch_embed", format!("expected [B, C, H, W], got {:?}", image.shape())));
    };
    let p = filters.shape().get(2).copied().unwrap_or(0);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("patch_embed", format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let tokens = image.conv2d(filters, bias, p, 0)?;
    let pos = interpolate_bicubic(pos_embed, (gh, gw))?;
    tokens.add(&pos)?.permute(&[0, 2, 3, 1])
}

/// Resize square patch-embedding filters `[dim, C, k, k]` to `[dim, C, size, size]`.
pub fn interpolate_patch_filters(filters: &Tensor, size: usize) -> Result<Tensor> {
    let [_, _, kh, kw] = *filters.shape() else {
        return Err(Error::dim("interpolate_patch_filters", format!("expected 4-D filters, got {:?}", filters.shape())));
    };
    if kh != kw {
        return Err(Error::dim("interpolate_patch_filters", format!("filters must be square, got {kh}x{kw}")));
    }
    interpolate_bicubic(filters, (size, size))
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, ps: &mut ParamStore, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (dim, p) = (cfg.dim, cfg.patch_size);
        let patch_w = ps.add("backbone.patch_embed.weight", init.trunc_normal(&[dim, 3, p, p], 0.02), Owner::Embed, true);
        let patch_b = ps.add("backbone.patch_embed.bias", Tensor::zeros(&[dim]), Owner::Embed, false);
        let g = cfg.pretrain_grid;
        let pos_embed = ps.add("backbone.pos_embed", init.trunc_normal(&[dim, g, g], 0.02), Owner::Embed, false);

        let prop = if uses_indices(cfg.prop_strategy) {
            propagation_indices(cfg.depth, cfg.prop_count, cfg.prop_placement)?
        } else {
            Vec::new()
        };
        let grid = cfg.img_size / p;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let owner = Owner::Block(i);
            let name = format!("backbone.blocks.{i}");
            let mode = match cfg.prop_strategy {
                PropStrategy::Global if prop.contains(&i) => AttnMode::Global,
                PropStrategy::ShiftedWindow if i % 2 == 1 => {
                    AttnMode::Shifted { ws: cfg.window_size, shift: cfg.window_size / 2 }
                }
                _ => AttnMode::Windowed(cfg.window_size),
            };
            let extent = match mode {
                AttnMode::Global => grid,
                _ => cfg.window_size,
            };
            let mlp_hidden = ((dim as f64) * cfg.mlp_ratio).round() as usize;
            let conv_prop = match cfg.prop_strategy.conv_kind() {
                Some(kind) if prop.contains(&i) => {
                    Some(ConvPropBlock::new(ps, init, &format!("{name}.conv_prop"), dim, kind, owner))
                }
                _ => None,
            };
            blocks.push(Block {
                norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim, owner),
                attn: Attention::new(
                    ps,
                    init,
                    &format!("{name}.attn"),
                    dim,
                    cfg.heads,
                    cfg.use_rel_pos_bias.then_some(extent),
                    owner,
                ),
                norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim, owner),
                fc1: Linear::new(ps, init, &format!("{name}.mlp.fc1"), dim, mlp_hidden, owner),
                fc2: Linear::new(ps, init, &format!("{name}.mlp.fc2"), mlp_hidden, dim, owner),
                mode,
                drop_path: if cfg.depth > 1 { cfg.drop_path_rate * i as f64 / (cfg.depth - 1) as f64 } else { 0.0 },
                conv_prop,
            });
        }
        Ok(Backbone { cfg: cfg.clone(), patch_w, patch_b, pos_embed, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Attention layout used by block `i`.
    pub fn block_mode(&self, i: usize) -> AttnMode {
        self.blocks[i].mode
    }

    pub fn has_conv_prop(&self, i: usize) -> bool {
        self.blocks[i].conv_prop.is_some()
    }

    /// Per-block drop-path rates.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.drop_path).collect()
    }

    pub fn embed(&self, ps: &ParamStore, image: &Tensor) -> Result<Tensor> {
        patch_embed(image, ps.get(self.patch_w), Some(ps.get(self.patch_b)), ps.get(self.pos_embed))
    }

    /// Run blocks `range` on a token grid `[B, H, W, C]`.
    pub fn forward_blocks(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        range: std::ops::Range<usize>,
        ctx: &mut RunCtx,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks[range] {
            x = block.forward(ps, &x, ctx)?;
        }
        Ok(x)
    }

    /// Image `[B, 3, H, W]` -> final map `[B, H/p, W/p, dim]`.
    pub fn forward(&self, ps: &ParamStore, image: &Tensor, ctx: &mut RunCtx) -> Result<Tensor> {
        let x = self.embed(ps, image)?;
        self.forward_blocks(ps, &x, 0..self.blocks.len(), ctx)
    }

    /// Outputs after each listed block (ascending), the last one being the
    /// deepest requested tap.
    pub fn forward_taps(&self, ps: &ParamStore, image: &Tensor, taps: &[usize], ctx: &mut RunCtx) -> Result<Vec<Tensor>> {
        if taps.windows(2).any(|w| w[0] >= w[1]) || taps.last().is_some_and(|&t| t >= self.blocks.len()) {
            return Err(Error::Config(format!("tap indices {taps:?} must be ascending and below depth {}", self.blocks.len())));
        }
        let mut x = self.embed(ps, image)?;
        let mut out = Vec::with_capacity(taps.len());
        let mut next = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            if next == taps.len() {
                break;
            }
            x = block.forward(ps, &x, ctx)?;
            if taps[next] == i {
                out.push(x.clone());
                next += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(strategy: PropStrategy, placement: Placement) -> BackboneConfig {
        BackboneConfig {
            depth: 4,
            dim: 16,
            heads: 2,
            patch_size: 8,
            window_size: 4,
            mlp_ratio: 2.0,
            prop_strategy: strategy,
            prop_count: 2,
            prop_placement: placement,
            use_rel_pos_bias: true,
            drop_path_rate: 0.0,
            pretrain_grid: 4,
            img_size: 64,
        }
    }

    #[test]
    fn propagation_index_rules() {
        assert_eq!(propagation_indices(24, 4, Placement::Evenly).unwrap(), vec![5, 11, 17, 23]);
        assert_eq!(propagation_indices(12, 4, Placement::Evenly).unwrap(), vec![2, 5, 8, 11]);
        assert_eq!(propagation_indices(12, 4, Placement::LastK).unwrap(), vec![8, 9, 10, 11]);
        assert_eq!(propagation_indices(12, 4, Placement::FirstK).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(propagation_indices(10, 4, Placement::Evenly), Err(Error::Config(_))));
        assert!(propagation_indices(3, 4, Placement::LastK).is_err());
    }

    #[test]
    fn validation_names_keys() {
        let mut cfg = tiny(PropStrategy::Global, Placement::Evenly);
        cfg.depth = 10;
        cfg.prop_count = 4;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("backbone.prop_placement") && msg.contains("backbone.depth") && msg.contains("backbone.prop_count"), "{msg}");
        let mut cfg = tiny(PropStrategy::None, Placement::Evenly);
        cfg.dim = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(PropStrategy::ShiftedWindow, Placement::Evenly);
        cfg.window_size = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partition_padding_arithmetic() {
        let x = Tensor::zeros(&[1, 64, 64, 2]);
        let (w, pad) = window_partition(&x, 14).unwrap();
        assert_eq!(pad, (6, 6));
        assert_eq!(w.shape(), &[25, 14, 14, 2]);
        let y = Tensor::zeros(&[1, 14, 14, 2]);
        let (w, pad) = window_partition(&y, 14).unwrap();
        assert_eq!(pad, (0, 0));
        assert_eq!(w.shape()[0], 1);
    }

    #[test]
    fn rel_pos_table_extent() {
        let t = Tensor::zeros(&[27, 2]);
        let b = rel_pos_bias((14, 14), (14, 14), &t, &t).unwrap();
        assert_eq!(b.shape(), &[2, 196, 196]);
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert!(matches!(rel_pos_bias((15, 14), (15, 14), &t, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn backbone_output_shape() {
        let cfg = tiny(PropStrategy::Global, Placement::Evenly);
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&cfg, &mut ps, &mut Init::new(0)).unwrap();
        let y = bb.forward(&ps, &Tensor::zeros(&[1, 3, 64, 64]), &mut RunCtx::eval()).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 16]);
        assert_eq!(bb.block_mode(1), AttnMode::Global);
        assert_eq!(bb.block_mode(3), AttnMode::Global);
        assert_eq!(bb.block_mode(0), AttnMode::Windowed(4));
    }

    #[test]
    fn patch_embed_shapes_and_errors() {
        let f = Tensor::zeros(&[4, 3, 16, 16]);
        let pos = Tensor::zeros(&[4, 2, 2]);
        let t = patch_embed(&Tensor::ones(&[1, 3, 32, 32]), &f, None, &pos).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(patch_embed(&Tensor::ones(&[1, 3, 40, 32]), &f, None, &pos).is_err());
    }

    #[test]
    fn drop_path_schedule_is_linear() {
        let mut cfg = tiny(PropStrategy::None, Placement::Evenly);
        cfg.drop_path_rate = 0.3;
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&cfg, &mut ps, &mut Init::new(0)).unwrap();
        let r = bb.drop_path_rates();
        assert_eq!(r[0], 0.0);
        assert!((r[3] - 0.3).abs() < 1e-15);
        assert!((r[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn shifted_mode_on_odd_blocks() {
        let cfg = tiny(PropStrategy::ShiftedWindow, Placement::Evenly);
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&cfg, &mut ps, &mut Init::new(0)).unwrap();
        assert_eq!(bb.block_mode(0), AttnMode::Windowed(4));
        assert_eq!(bb.block_mode(1), AttnMode::Shifted { ws: 4, shift: 2 });
    }
}
