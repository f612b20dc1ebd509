//! Experiment configuration in a sectioned `key = value` text format.
//!
//! ```text
//! [backbone]
//! depth = 8
//! prop_strategy = global
//! [pyramid]
//! kind = simple
//! ```
//!
//! Lists are comma-separated. `#` and `;` start comment lines. Every key is
//! optional; omitted keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{read_snapshot, synth_dataset, Sample, SynthConfig};
use crate::backbone::{BackboneConfig, ConvPropKind, Placement, PropStrategy};
use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::pyramid::PyramidKind;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub kind: PyramidKind,
    pub out_dim: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { kind: PyramidKind::Simple, out_dim: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    /// Generate scenes in memory from `data.seed`.
    Synth,
    /// Read `train/` and `val/` snapshots under `data.path`.
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: String,
    pub train_images: usize,
    pub val_images: usize,
    pub height: usize,
    pub width: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            path: String::new(),
            train_images: 600,
            val_images: 150,
            height: 128,
            width: 128,
            size_min: 8.0,
            size_max: 64.0,
            max_objects: 4,
            seed: 1000,
        }
    }
}

impl DataConfig {
    pub fn synth_config(&self, n_images: usize) -> SynthConfig {
        SynthConfig {
            n_images,
            height: self.height,
            width: self.width,
            size_min: self.size_min,
            size_max: self.size_max,
            max_objects: self.max_objects,
        }
    }

    /// `(train, val)` samples. Synthetic splits use `seed` and `seed + 1`;
    /// snapshots are read from `path/train` and `path/val`.
    pub fn load_splits(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match self.source {
            DataSource::Synth => Ok((
                synth_dataset(self.seed, &self.synth_config(self.train_images))?,
                synth_dataset(self.seed.wrapping_add(1), &self.synth_config(self.val_images))?,
            )),
            DataSource::Snapshot => {
                let root = Path::new(&self.path);
                let (train, _) = read_snapshot(&root.join("train"))?;
                let (val, _) = read_snapshot(&root.join("val"))?;
                Ok((train, val))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Run directory; empty disables file output.
    pub dir: String,
}

/// One propagation setting in an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropCell {
    None,
    Global { count: usize, placement: Placement },
    Conv { count: usize, kind: ConvPropKind },
    Shifted,
    AllGlobal,
}

impl PropCell {
    /// Backbone config with this cell's propagation applied.
    pub fn apply(&self, base: &BackboneConfig) -> BackboneConfig {
        let mut c = base.clone();
        match *self {
            PropCell::None => c.prop_strategy = PropStrategy::None,
            PropCell::Global { count, placement } => {
                c.prop_strategy = PropStrategy::Global;
                c.prop_count = count;
                c.prop_placement = placement;
            }
            PropCell::Conv { count, kind } => {
                c.prop_strategy = match kind {
                    ConvPropKind::Naive => PropStrategy::ConvNaive,
                    ConvPropKind::Basic => PropStrategy::ConvBasic,
                    ConvPropKind::Bottleneck => PropStrategy::ConvBottleneck,
                };
                c.prop_count = count;
                c.prop_placement = Placement::Evenly;
            }
            PropCell::Shifted => c.prop_strategy = PropStrategy::ShiftedWindow,
            PropCell::AllGlobal => {
                c.prop_strategy = PropStrategy::Global;
                c.prop_count = c.depth;
                c.prop_placement = Placement::FirstK;
            }
        }
        c
    }
}

impl std::fmt::Display for PropCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PropCell::None => write!(f, "none"),
            PropCell::Global { count, placement } => {
                let p = match placement {
                    Placement::Evenly => "evenly",
                    Placement::FirstK => "first",
                    Placement::LastK => "last",
                };
                write!(f, "global{count}@{p}")
            }
            PropCell::Conv { count, kind } => {
                let k = match kind {
                    ConvPropKind::Naive => "naive",
                    ConvPropKind::Basic => "basic",
                    ConvPropKind::Bottleneck => "bottleneck",
                };
                write!(f, "conv{count}:{k}")
            }
            PropCell::Shifted => write!(f, "shifted"),
            PropCell::AllGlobal => write!(f, "allglobal"),
        }
    }
}

impl FromStr for PropCell {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("unknown propagation cell `{s}` (expected none, globalN[@evenly|first|last], convN[:naive|basic|bottleneck], shifted, allglobal)");
        match s {
            "none" => return Ok(PropCell::None),
            "shifted" => return Ok(PropCell::Shifted),
            "allglobal" => return Ok(PropCell::AllGlobal),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("global") {
            let (n, p) = rest.split_once('@').unwrap_or((rest, "evenly"));
            let placement = match p {
                "evenly" => Placement::Evenly,
                "first" => Placement::FirstK,
                "last" => Placement::LastK,
                _ => return Err(bad()),
            };
            return Ok(PropCell::Global { count: n.parse().map_err(|_| bad())?, placement });
        }
        if let Some(rest) = s.strip_prefix("conv") {
            let (n, k) = rest.split_once(':').unwrap_or((rest, "basic"));
            let kind = match k {
                "naive" => ConvPropKind::Naive,
                "basic" => ConvPropKind::Basic,
                "bottleneck" => ConvPropKind::Bottleneck,
                _ => return Err(bad()),
            };
            return Ok(PropCell::Conv { count: n.parse().map_err(|_| bad())?, kind });
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub pyramids: Vec<PyramidKind>,
    pub cells: Vec<PropCell>,
    pub seeds: Vec<u64>,
    /// Row label (`pyramid/cell`) deltas are reported against; empty means
    /// the first row.
    pub baseline: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { pyramids: vec![PyramidKind::Simple], cells: vec![PropCell::None], seeds: vec![0], baseline: String::new() }
    }
}

impl GridConfig {
    /// `(pyramid, cell)` rows in enumeration order.
    pub fn rows(&self) -> Vec<(PyramidKind, PropCell)> {
        self.pyramids.iter().flat_map(|&p| self.cells.iter().map(move |&c| (p, c))).collect()
    }
}

pub fn row_label(p: PyramidKind, c: &PropCell) -> String {
    format!("{p}/{c}")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub pyramid: PyramidConfig,
    pub detect: DetectConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub grid: Option<GridConfig>,
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_val(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synth" => Ok(DataSource::Synth),
            "snapshot" => Ok(DataSource::Snapshot),
            _ => Err(format!("unknown data source `{s}` (expected synth|snapshot)")),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synth => "synth",
            DataSource::Snapshot => "snapshot",
        })
    }
}

impl ExperimentConfig {
    /// Desk-scale configuration used by tests and smoke runs.
    #[allow(clippy::field_reassign_with_default)]
    pub fn tiny() -> Self {
        let mut c = ExperimentConfig::default();
        c.backbone = BackboneConfig {
            depth: 4,
            dim: 32,
            heads: 2,
            img_size: 64,
            prop_count: 2,
            mlp_ratio: 2.0,
            ..BackboneConfig::default()
        };
        c.pyramid.out_dim = 16;
        c.detect.head_convs = 1;
        c.detect.roi_batch = 32;
        c.detect.rpn_batch = 64;
        c.data = DataConfig { train_images: 8, val_images: 4, height: 64, width: 64, size_min: 8.0, size_max: 32.0, ..DataConfig::default() };
        c.train.epochs = 1;
        c.train.batch_size = 4;
        c.train.warmup_iters = 2;
        c
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let b = &mut self.backbone;
        let d = &mut self.detect;
        let t = &mut self.train;
        let data = &mut self.data;
        match (section, key) {
            ("backbone", "depth") => b.depth = parse_val(k, v)?,
            ("backbone", "dim") => b.dim = parse_val(k, v)?,
            ("backbone", "heads") => b.heads = parse_val(k, v)?,
            ("backbone", "patch_size") => b.patch_size = parse_val(k, v)?,
            ("backbone", "window_size") => b.window_size = parse_val(k, v)?,
            ("backbone", "mlp_ratio") => b.mlp_ratio = parse_val(k, v)?,
            ("backbone", "prop_strategy") => b.prop_strategy = parse_val(k, v)?,
            ("backbone", "prop_count") => b.prop_count = parse_val(k, v)?,
            ("backbone", "prop_placement") => b.prop_placement = parse_val(k, v)?,
            ("backbone", "use_rel_pos_bias") => b.use_rel_pos_bias = parse_bool(k, v)?,
            ("backbone", "drop_path_rate") => b.drop_path_rate = parse_val(k, v)?,
            ("backbone", "pretrain_grid") => b.pretrain_grid = parse_val(k, v)?,
            ("backbone", "img_size") => b.img_size = parse_val(k, v)?,
            ("pyramid", "kind") => self.pyramid.kind = parse_val(k, v)?,
            ("pyramid", "out_dim") => self.pyramid.out_dim = parse_val(k, v)?,
            ("detect", "num_classes") => d.num_classes = parse_val(k, v)?,
            ("detect", "anchor_factor") => d.anchor_factor = parse_val(k, v)?,
            ("detect", "anchor_ratios") => d.anchor_ratios = parse_list(k, v)?,
            ("detect", "canonical") => d.canonical = parse_val(k, v)?,
            ("detect", "rpn_pos_iou") => d.rpn_pos_iou = parse_val(k, v)?,
            ("detect", "rpn_neg_iou") => d.rpn_neg_iou = parse_val(k, v)?,
            ("detect", "rpn_batch") => d.rpn_batch = parse_val(k, v)?,
            ("detect", "rpn_pos_fraction") => d.rpn_pos_fraction = parse_val(k, v)?,
            ("detect", "pre_nms_topk") => d.pre_nms_topk = parse_val(k, v)?,
            ("detect", "post_nms_topk") => d.post_nms_topk = parse_val(k, v)?,
            ("detect", "rpn_nms") => d.rpn_nms = parse_val(k, v)?,
            ("detect", "roi_batch") => d.roi_batch = parse_val(k, v)?,
            ("detect", "roi_pos_fraction") => d.roi_pos_fraction = parse_val(k, v)?,
            ("detect", "roi_fg_iou") => d.roi_fg_iou = parse_val(k, v)?,
            ("detect", "head_convs") => d.head_convs = parse_val(k, v)?,
            ("detect", "pooler") => d.pooler = parse_val(k, v)?,
            ("detect", "sampling") => d.sampling = parse_val(k, v)?,
            ("detect", "score_thresh") => d.score_thresh = parse_val(k, v)?,
            ("detect", "nms_thresh") => d.nms_thresh = parse_val(k, v)?,
            ("detect", "nms_method") => d.nms_method = parse_val(k, v)?,
            ("detect", "soft_nms_sigma") => d.soft_nms_sigma = parse_val(k, v)?,
            ("detect", "max_dets") => d.max_dets = parse_val(k, v)?,
            ("train", "base_lr") => t.base_lr = parse_val(k, v)?,
            ("train", "weight_decay") => t.weight_decay = parse_val(k, v)?,
            ("train", "beta1") => t.beta1 = parse_val(k, v)?,
            ("train", "beta2") => t.beta2 = parse_val(k, v)?,
            ("train", "eps") => t.eps = parse_val(k, v)?,
            ("train", "warmup_iters") => t.warmup_iters = parse_val(k, v)?,
            ("train", "milestones") => t.milestones = parse_list(k, v)?,
            ("train", "step_factor") => t.step_factor = parse_val(k, v)?,
            ("train", "layer_decay") => t.layer_decay = parse_val(k, v)?,
            ("train", "epochs") => t.epochs = parse_val(k, v)?,
            ("train", "batch_size") => t.batch_size = parse_val(k, v)?,
            ("train", "seed") => t.seed = parse_val(k, v)?,
            ("train", "jitter_min") => t.jitter_min = parse_val(k, v)?,
            ("train", "jitter_max") => t.jitter_max = parse_val(k, v)?,
            ("data", "source") => data.source = parse_val(k, v)?,
            ("data", "path") => data.path = v.to_string(),
            ("data", "train_images") => data.train_images = parse_val(k, v)?,
            ("data", "val_images") => data.val_images = parse_val(k, v)?,
            ("data", "height") => data.height = parse_val(k, v)?,
            ("data", "width") => data.width = parse_val(k, v)?,
            ("data", "size_min") => data.size_min = parse_val(k, v)?,
            ("data", "size_max") => data.size_max = parse_val(k, v)?,
            ("data", "max_objects") => data.max_objects = parse_val(k, v)?,
            ("data", "seed") => data.seed = parse_val(k, v)?,
            ("output", "dir") => self.output.dir = v.to_string(),
            ("grid", _) => {
                let g = self.grid.get_or_insert_with(GridConfig::default);
                match key {
                    "pyramids" => g.pyramids = parse_list(k, v)?,
                    "propagation" => g.cells = parse_list(k, v)?,
                    "seeds" => g.seeds = parse_list(k, v)?,
                    "baseline" => g.baseline = v.to_string(),
                    _ => return Err(Error::Config(format!("unknown key `{k}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// `(section, key, value)` for every field, in file order.
    fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let b = &self.backbone;
        let d = &self.detect;
        let t = &self.train;
        let data = &self.data;
        let mut e = vec![
            ("backbone", "depth", b.depth.to_string()),
            ("backbone", "dim", b.dim.to_string()),
            ("backbone", "heads", b.heads.to_string()),
            ("backbone", "patch_size", b.patch_size.to_string()),
            ("backbone", "window_size", b.window_size.to_string()),
            ("backbone", "mlp_ratio", b.mlp_ratio.to_string()),
            ("backbone", "prop_strategy", b.prop_strategy.to_string()),
            ("backbone", "prop_count", b.prop_count.to_string()),
            ("backbone", "prop_placement", b.prop_placement.to_string()),
            ("backbone", "use_rel_pos_bias", b.use_rel_pos_bias.to_string()),
            ("backbone", "drop_path_rate", b.drop_path_rate.to_string()),
            ("backbone", "pretrain_grid", b.pretrain_grid.to_string()),
            ("backbone", "img_size", b.img_size.to_string()),
            ("pyramid", "kind", self.pyramid.kind.to_string()),
            ("pyramid", "out_dim", self.pyramid.out_dim.to_string()),
            ("detect", "num_classes", d.num_classes.to_string()),
            ("detect", "anchor_factor", d.anchor_factor.to_string()),
            ("detect", "anchor_ratios", join(&d.anchor_ratios)),
            ("detect", "canonical", d.canonical.to_string()),
            ("detect", "rpn_pos_iou", d.rpn_pos_iou.to_string()),
            ("detect", "rpn_neg_iou", d.rpn_neg_iou.to_string()),
            ("detect", "rpn_batch", d.rpn_batch.to_string()),
            ("detect", "rpn_pos_fraction", d.rpn_pos_fraction.to_string()),
            ("detect", "pre_nms_topk", d.pre_nms_topk.to_string()),
            ("detect", "post_nms_topk", d.post_nms_topk.to_string()),
            ("detect", "rpn_nms", d.rpn_nms.to_string()),
            ("detect", "roi_batch", d.roi_batch.to_string()),
            ("detect", "roi_pos_fraction", d.roi_pos_fraction.to_string()),
            ("detect", "roi_fg_iou", d.roi_fg_iou.to_string()),
            ("detect", "head_convs", d.head_convs.to_string()),
            ("detect", "pooler", d.pooler.to_string()),
            ("detect", "sampling", d.sampling.to_string()),
            ("detect", "score_thresh", d.score_thresh.to_string()),
            ("detect", "nms_thresh", d.nms_thresh.to_string()),
            ("detect", "nms_method", d.nms_method.to_string()),
            ("detect", "soft_nms_sigma", d.soft_nms_sigma.to_string()),
            ("detect", "max_dets", d.max_dets.to_string()),
            ("train", "base_lr", t.base_lr.to_string()),
            ("train", "weight_decay", t.weight_decay.to_string()),
            ("train", "beta1", t.beta1.to_string()),
            ("train", "beta2", t.beta2.to_string()),
            ("train", "eps", t.eps.to_string()),
            ("train", "warmup_iters", t.warmup_iters.to_string()),
            ("train", "milestones", join(&t.milestones)),
            ("train", "step_factor", t.step_factor.to_string()),
            ("train", "layer_decay", t.layer_decay.to_string()),
            ("train", "epochs", t.epochs.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "jitter_min", t.jitter_min.to_string()),
            ("train", "jitter_max", t.jitter_max.to_string()),
            ("data", "source", data.source.to_string()),
            ("data", "path", data.path.clone()),
            ("data", "train_images", data.train_images.to_string()),
            ("data", "val_images", data.val_images.to_string()),
            ("data", "height", data.height.to_string()),
            ("data", "width", data.width.to_string()),
            ("data", "size_min", data.size_min.to_string()),
            ("data", "size_max", data.size_max.to_string()),
            ("data", "max_objects", data.max_objects.to_string()),
            ("data", "seed", data.seed.to_string()),
            ("output", "dir", self.output.dir.clone()),
        ];
        if let Some(g) = &self.grid {
            e.push(("grid", "pyramids", join(&g.pyramids)));
            e.push(("grid", "propagation", join(&g.cells)));
            e.push(("grid", "seeds", join(&g.seeds)));
            e.push(("grid", "baseline", g.baseline.clone()));
        }
        e
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, v) in self.entries() {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parse and validate.
    pub fn from_ini(text: &str) -> Result<Self> {
        let cfg = Self::parse_ini(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without cross-field validation.
    pub fn parse_ini(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["backbone", "pyramid", "detect", "train", "data", "output", "grid"].contains(&section.as_str()) {
                    return Err(Error::Config(format!("line {}: unknown section [{section}]", n + 1)));
                }
                if section == "grid" {
                    cfg.grid.get_or_insert_with(GridConfig::default);
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
            };
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: `{}` appears before any [section]", n + 1, k.trim())));
            }
            cfg.set(&section, k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.detect.validate()?;
        self.train.validate()?;
        let b = &self.backbone;
        let d = &self.data;
        let p = b.patch_size;
        if self.pyramid.kind != PyramidKind::None && !p.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "pyramid.kind={} requires backbone.patch_size ({p}) divisible by 4",
                self.pyramid.kind
            )));
        }
        if self.pyramid.kind != PyramidKind::None && !b.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("pyramid.kind={} requires backbone.dim ({}) divisible by 4", self.pyramid.kind, b.dim)));
        }
        if self.pyramid.kind == PyramidKind::Fpn4Stage && !b.depth.is_multiple_of(4) {
            return Err(Error::Config(format!("pyramid.kind=fpn4 requires backbone.depth ({}) divisible by 4", b.depth)));
        }
        if self.pyramid.out_dim == 0 {
            return Err(Error::Config("pyramid.out_dim must be positive".into()));
        }
        for (key, v) in [("data.height", d.height), ("data.width", d.width)] {
            if v == 0 || v % (2 * p) != 0 {
                return Err(Error::Config(format!("{key} ({v}) must be a positive multiple of 2 * backbone.patch_size ({})", 2 * p)));
            }
            if v > b.img_size {
                return Err(Error::Config(format!("{key} ({v}) exceeds backbone.img_size ({})", b.img_size)));
            }
        }
        if self.detect.num_classes != crate::data::CLASS_NAMES.len() && d.source == DataSource::Synth {
            return Err(Error::Config(format!(
                "detect.num_classes ({}) must be {} for data.source=synth",
                self.detect.num_classes,
                crate::data::CLASS_NAMES.len()
            )));
        }
        if d.source == DataSource::Snapshot && d.path.is_empty() {
            return Err(Error::Config("data.source=snapshot requires data.path".into()));
        }
        d.synth_config(d.train_images).validate()?;
        if let Some(g) = &self.grid {
            if g.pyramids.is_empty() || g.cells.is_empty() {
                return Err(Error::Config("grid has no cells: grid.pyramids and grid.propagation must be non-empty".into()));
            }
            if g.seeds.is_empty() {
                return Err(Error::Config("grid.seeds must list at least one seed".into()));
            }
            let labels: Vec<String> = g.rows().iter().map(|(p, c)| row_label(*p, c)).collect();
            if !g.baseline.is_empty() && !labels.contains(&g.baseline) {
                return Err(Error::Config(format!("grid.baseline `{}` is not one of the rows {labels:?}", g.baseline)));
            }
        }
        Ok(())
    }
}
