//! Multi-scale feature maps from a single-scale backbone.
//!
//! Strides are relative to the patch size `p`: {p/4, p/2, p, 2p}. Every kind
//! except `None` emits all four; `None` emits only stride `p`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{propagation_indices, Placement};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Owner, ParamId, ParamStore};
use crate::tensor::{PoolKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidKind {
    None,
    Fpn4Stage,
    FpnLastMap,
    Simple,
    Aggressive,
}

impl PyramidKind {
    pub const ALL: [PyramidKind; 5] =
        [PyramidKind::None, PyramidKind::Fpn4Stage, PyramidKind::FpnLastMap, PyramidKind::Simple, PyramidKind::Aggressive];
}

impl fmt::Display for PyramidKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PyramidKind::None => "none",
            PyramidKind::Fpn4Stage => "fpn4",
            PyramidKind::FpnLastMap => "fpnlast",
            PyramidKind::Simple => "simple",
            PyramidKind::Aggressive => "aggressive",
        })
    }
}

impl FromStr for PyramidKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => PyramidKind::None,
            "fpn4" => PyramidKind::Fpn4Stage,
            "fpnlast" => PyramidKind::FpnLastMap,
            "simple" => PyramidKind::Simple,
            "aggressive" => PyramidKind::Aggressive,
            _ => return Err(format!("unknown pyramid kind `{s}` (expected none|fpn4|fpnlast|simple|aggressive)")),
        })
    }
}

/// Feature maps `[B, out_dim, H/s, W/s]` keyed by stride, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Tensor)>,
}

impl FeaturePyramid {
    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|(s, _)| *s).collect()
    }

    pub fn get(&self, stride: usize) -> Option<&Tensor> {
        self.levels.iter().find(|(s, _)| *s == stride).map(|(_, t)| t)
    }
}

/// Pyramid strides for a patch size.
pub fn level_strides(kind: PyramidKind, patch: usize) -> Vec<usize> {
    match kind {
        PyramidKind::None => vec![patch],
        _ => vec![patch / 4, patch / 2, patch, patch * 2],
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Debug, Clone)]
struct Deconv {
    w: ParamId,
    b: ParamId,
}

impl Deconv {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (cout * 4) as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), init.normal(&[cin, cout, 2, 2], std), Owner::Head, true);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), Owner::Head, false);
        Deconv { w, b }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(ps.get(self.w), Some(ps.get(self.b)), 2)
    }
}

/// Resampling of one input map to one pyramid stride.
#[derive(Debug, Clone)]
enum Resize {
    /// Max-pool 2x2 stride 2.
    Down,
    Identity,
    Up2(Deconv),
    Up4(Deconv, LayerNorm, Deconv),
}

impl Resize {
    fn build(ps: &mut ParamStore, init: &mut Init, name: &str, factor: i32, dim: usize) -> Self {
        match factor {
            -1 => Resize::Down,
            0 => Resize::Identity,
            1 => Resize::Up2(Deconv::new(ps, init, &format!("{name}.deconv1"), dim, dim / 2)),
            _ => Resize::Up4(
                Deconv::new(ps, init, &format!("{name}.deconv1"), dim, dim / 2),
                LayerNorm::new(ps, &format!("{name}.norm1"), dim / 2, Owner::Head),
                Deconv::new(ps, init, &format!("{name}.deconv2"), dim / 2, dim / 4),
            ),
        }
    }

    fn out_dim(&self, dim: usize) -> usize {
        match self {
            Resize::Down | Resize::Identity => dim,
            Resize::Up2(_) => dim / 2,
            Resize::Up4(..) => dim / 4,
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Resize::Down => x.pool2d(PoolKind::Max, 2, 2),
            Resize::Identity => Ok(x.clone()),
            Resize::Up2(d) => d.forward(ps, x),
            Resize::Up4(d1, norm, d2) => d2.forward(ps, &norm.forward(ps, &d1.forward(ps, x)?, 1)?.gelu()?),
        }
    }
}

/// 1x1 conv + LN, then 3x3 conv + LN, to `out_dim` channels.
#[derive(Debug, Clone)]
pub struct LevelHead {
    reduce: Conv2d,
    norm1: LayerNorm,
    conv: Conv2d,
    norm2: LayerNorm,
}

impl LevelHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, out_dim: usize) -> Self {
        LevelHead {
            reduce: Conv2d::new(ps, init, &format!("{name}.reduce"), cin, out_dim, 1, 1, false, Owner::Head),
            norm1: LayerNorm::new(ps, &format!("{name}.reduce_norm"), out_dim, Owner::Head),
            conv: Conv2d::new(ps, init, &format!("{name}.conv"), out_dim, out_dim, 3, 1, false, Owner::Head),
            norm2: LayerNorm::new(ps, &format!("{name}.conv_norm"), out_dim, Owner::Head),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(ps, &self.reduce.forward(ps, x)?, 1)?;
        self.norm2.forward(ps, &self.conv.forward(ps, &y)?, 1)
    }
}

/// FPN lateral (1x1 + LN) and output (3x3 + LN) convs for one level.
#[derive(Debug, Clone)]
struct FpnLevel {
    lateral: Conv2d,
    lateral_norm: LayerNorm,
    output: Conv2d,
    output_norm: LayerNorm,
}

impl FpnLevel {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, out_dim: usize) -> Self {
        FpnLevel {
            lateral: Conv2d::new(ps, init, &format!("{name}.lateral"), cin, out_dim, 1, 1, true, Owner::Head),
            lateral_norm: LayerNorm::new(ps, &format!("{name}.lateral_norm"), out_dim, Owner::Head),
            output: Conv2d::new(ps, init, &format!("{name}.output"), out_dim, out_dim, 3, 1, true, Owner::Head),
            output_norm: LayerNorm::new(ps, &format!("{name}.output_norm"), out_dim, Owner::Head),
        }
    }
}

/// Top-down pathway over laterals ordered finest first: the coarsest level is
/// its own lateral, every finer one adds the nearest-upsampled coarser result.
pub fn top_down_merge(laterals: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut merged: Vec<Tensor> = Vec::with_capacity(laterals.len());
    for lat in laterals.iter().rev() {
        let m = match merged.last() {
            Some(coarser) => lat.add(&coarser.upsample_nearest(2)?)?,
            None => lat.clone(),
        };
        merged.push(m);
    }
    merged.reverse();
    Ok(merged)
}

#[derive(Debug, Clone)]
enum Layout {
    None(LevelHead),
    Simple(Vec<(Resize, LevelHead)>),
    Fpn { resizes: Vec<Resize>, levels: Vec<FpnLevel> },
    Aggressive { up: Resize, head: LevelHead },
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub kind: PyramidKind,
    pub patch: usize,
    pub out_dim: usize,
    layout: Layout,
    taps: Vec<usize>,
}

/// Resize factor per level, finest first: up 4x, up 2x, identity, down 2x.
const FACTORS: [i32; 4] = [2, 1, 0, -1];

impl Pyramid {
    pub fn new(
        kind: PyramidKind,
        dim: usize,
        depth: usize,
        patch: usize,
        out_dim: usize,
        ps: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        if kind != PyramidKind::None && (!patch.is_multiple_of(4) || !dim.is_multiple_of(4)) {
            return Err(Error::Config(format!(
                "pyramid={kind} needs backbone.patch_size ({patch}) and backbone.dim ({dim}) divisible by 4"
            )));
        }
        if out_dim == 0 {
            return Err(Error::Config("pyramid.out_dim must be positive".into()));
        }
        let mut taps = vec![depth - 1];
        let layout = match kind {
            PyramidKind::None => Layout::None(LevelHead::new(ps, init, "pyramid.p0", dim, out_dim)),
            PyramidKind::Simple => Layout::Simple(
                FACTORS
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| {
                        let resize = Resize::build(ps, init, &format!("pyramid.p{i}"), f, dim);
                        let cin = resize.out_dim(dim);
                        (resize, LevelHead::new(ps, init, &format!("pyramid.p{i}.head"), cin, out_dim))
                    })
                    .collect(),
            ),
            PyramidKind::FpnLastMap | PyramidKind::Fpn4Stage => {
                if kind == PyramidKind::Fpn4Stage {
                    taps = propagation_indices(depth, 4, Placement::Evenly).map_err(|_| {
                        Error::Config(format!("pyramid=fpn4 requires backbone.depth ({depth}) divisible by 4"))
                    })?;
                }
                let mut resizes = Vec::new();
                let mut levels = Vec::new();
                for (i, &f) in FACTORS.iter().enumerate() {
                    let r = Resize::build(ps, init, &format!("pyramid.p{i}"), f, dim);
                    levels.push(FpnLevel::new(ps, init, &format!("pyramid.p{i}"), r.out_dim(dim), out_dim));
                    resizes.push(r);
                }
                Layout::Fpn { resizes, levels }
            }
            PyramidKind::Aggressive => {
                let up = Resize::build(ps, init, "pyramid.up", 2, dim);
                let head = LevelHead::new(ps, init, "pyramid.head", up.out_dim(dim), out_dim);
                Layout::Aggressive { up, head }
            }
        };
        Ok(Pyramid { kind, patch, out_dim, layout, taps })
    }

    /// Backbone blocks whose outputs this pyramid consumes, ascending.
    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn strides(&self) -> Vec<usize> {
        level_strides(self.kind, self.patch)
    }

    /// `maps` are the backbone outputs at [`Self::taps`], channels last
    /// `[B, H, W, C]`.
    pub fn forward(&self, ps: &ParamStore, maps: &[Tensor]) -> Result<FeaturePyramid> {
        if maps.len() != self.taps.len() {
            return Err(Error::Config(format!(
                "pyramid={} expects {} tapped maps, got {}",
                self.kind,
                self.taps.len(),
                maps.len()
            )));
        }
        let nchw: Vec<Tensor> = maps.iter().map(|m| m.permute(&[0, 3, 1, 2])).collect::<Result<_>>()?;
        let last = nchw.last().expect("at least one map");
        let strides = self.strides();
        let outputs = match &self.layout {
            Layout::None(head) => vec![head.forward(ps, last)?],
            Layout::Simple(levels) => levels
                .iter()
                .map(|(resize, head)| head.forward(ps, &resize.forward(ps, last)?))
                .collect::<Result<_>>()?,
            Layout::Fpn { resizes, levels } => {
                // fpn4 feeds the earliest tap to the finest level.
                let laterals: Vec<Tensor> = resizes
                    .iter()
                    .zip(levels)
                    .enumerate()
                    .map(|(i, (r, lvl))| {
                        let src = if nchw.len() == 4 { &nchw[i] } else { last };
                        let y = lvl.lateral.forward(ps, &r.forward(ps, src)?)?;
                        lvl.lateral_norm.forward(ps, &y, 1)
                    })
                    .collect::<Result<_>>()?;
                top_down_merge(&laterals)?
                    .iter()
                    .zip(levels)
                    .map(|(m, lvl)| lvl.output_norm.forward(ps, &lvl.output.forward(ps, m)?, 1))
                    .collect::<Result<_>>()?
            }
            Layout::Aggressive { up, head } => {
                let fine = up.forward(ps, last)?;
                let mut out = vec![head.forward(ps, &fine)?];
                for k in [2, 4, 8] {
                    out.push(head.forward(ps, &fine.pool2d(PoolKind::Avg, k, k)?)?);
                }
                out
            }
        };
        Ok(FeaturePyramid { levels: strides.into_iter().zip(outputs).collect() })
    }
}
