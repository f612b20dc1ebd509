//! AdamW training with warmup, step decay and layer-wise lr decay.

mod optim;

pub use optim::*;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{eval_ap, large_scale_jitter, stack_images, EvalResult, Sample};
use crate::detect::{Detection, Detector};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore, RunCtx};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_iters: usize,
    /// Fractions of the total iteration count, strictly increasing in (0, 1).
    pub milestones: Vec<f64>,
    pub step_factor: f64,
    pub layer_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub jitter_min: f64,
    pub jitter_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 4e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_iters: 250,
            milestones: vec![0.88, 0.96],
            step_factor: 0.1,
            layer_decay: 1.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            jitter_min: 0.75,
            jitter_max: 1.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return err(format!("train.layer_decay must lie in (0, 1], got {}", self.layer_decay));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("train.base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return err(format!("train.eps must be positive, got {}", self.eps));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("train.milestones must be strictly increasing in (0, 1), got {:?}", self.milestones));
        }
        if !(self.step_factor > 0.0 && self.step_factor <= 1.0) {
            return err(format!("train.step_factor must lie in (0, 1], got {}", self.step_factor));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return err("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.jitter_min > 0.0 && self.jitter_min <= self.jitter_max && self.jitter_max <= 8.0) {
            return err(format!(
                "train.jitter_min ({}) and train.jitter_max ({}) must satisfy 0 < min <= max <= 8",
                self.jitter_min, self.jitter_max
            ));
        }
        Ok(())
    }
}

/// One metric-trace row, emitted after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss_rpn_cls: f64,
    pub loss_rpn_box: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

pub const TRACE_HEADER: &str = "epoch,loss_rpn_cls,loss_rpn_box,loss_cls,loss_box,AP,AP50,AP75";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.loss_rpn_cls, self.loss_rpn_box, self.loss_cls, self.loss_box, self.ap, self.ap50, self.ap75
        )
    }
}

/// Output file names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";

/// Build the detector described by `cfg` with weights drawn from `seed`.
pub fn build_detector(cfg: &ExperimentConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    let mut ps = ParamStore::new();
    let mut init = Init::new(seed);
    let det = Detector::new(&cfg.backbone, cfg.pyramid.kind, cfg.pyramid.out_dim, &cfg.detect, &mut ps, &mut init)?;
    Ok((det, ps))
}

/// Detections for every sample, `batch` images at a time.
pub fn predict(det: &Detector, ps: &ParamStore, samples: &[Sample], batch: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(det.detect(ps, &stack_images(&refs)?)?);
    }
    Ok(out)
}

pub fn evaluate(det: &Detector, ps: &ParamStore, samples: &[Sample], batch: usize) -> Result<EvalResult> {
    let dets = predict(det, ps, samples, batch)?;
    let gts: Vec<_> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok(eval_ap(&dets, &gts, det.cfg.num_classes))
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub params: ParamStore,
    pub trace: Vec<TraceRow>,
}

struct RunFiles {
    checkpoint: PathBuf,
    csv: PathBuf,
    jsonl: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = RunFiles { checkpoint: dir.join(CHECKPOINT_FILE), csv: dir.join(TRACE_CSV), jsonl: dir.join(TRACE_JSONL) };
        fs::write(&files.csv, format!("{TRACE_HEADER}\n")).map_err(|e| Error::io(&files.csv, e))?;
        fs::write(&files.jsonl, "").map_err(|e| Error::io(&files.jsonl, e))?;
        Ok(files)
    }

    fn append(&self, row: &TraceRow) -> Result<()> {
        let json = serde_json::to_string(row).expect("trace rows serialize");
        for (path, line) in [(&self.csv, row.csv()), (&self.jsonl, json)] {
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Replace the checkpoint atomically.
    fn save(&self, ps: &ParamStore, cfg: &ExperimentConfig) -> Result<()> {
        let tmp = self.checkpoint.with_extension("bin.tmp");
        save_checkpoint(&tmp, ps, cfg)?;
        fs::rename(&tmp, &self.checkpoint).map_err(|e| Error::io(&self.checkpoint, e))
    }
}

/// Train on `train`, evaluating on `val` after every epoch. With `out_dir`
/// the trace is appended to `trace.csv`/`trace.jsonl` and the checkpoint is
/// rewritten after each finished epoch; on divergence the last good one
/// stays on disk. `on_epoch` sees each row as it is produced.
pub fn train_loop(
    cfg: &ExperimentConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let tc = &cfg.train;
    let (det, mut ps) = build_detector(cfg, tc.seed)?;
    let groups = param_groups(&ps, cfg.backbone.depth, tc.layer_decay);
    audit_groups(&ps, &groups)?;
    let mut opt = AdamW::new(&ps);
    let files = out_dir.map(RunFiles::create).transpose()?;
    if let Some(f) = &files {
        f.save(&ps, cfg)?;
    }

    let out_hw = (cfg.data.height, cfg.data.width);
    let iters_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = iters_per_epoch * tc.epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0002);
    let mut ctx = RunCtx::train(tc.seed ^ 0x5eed_0003);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut iter = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 4];
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| large_scale_jitter(&train[i], (tc.jitter_min, tc.jitter_max), out_hw, &mut aug_rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            let images = stack_images(&refs)?;
            let targets: Vec<_> = batch.iter().map(|s| s.gt.clone()).collect();
            let losses = det.losses(&ps, &images, &targets, None, &mut ctx)?;
            let total_loss = losses.total()?;
            if !total_loss.item().is_finite() {
                log::error!("loss is {} at epoch {epoch}, batch {bi}", total_loss.item());
                return Err(Error::Diverged { epoch, iter });
            }
            for (s, v) in sums.iter_mut().zip(losses.values()) {
                *s += v;
            }
            total_loss.backward()?;
            opt.step(&mut ps, &groups, lr_at(iter, total, tc), tc)?;
            iter += 1;
        }
        let n = iters_per_epoch as f64;
        let metrics = evaluate(&det, &ps, val, tc.batch_size)?;
        let row = TraceRow {
            epoch,
            loss_rpn_cls: sums[0] / n,
            loss_rpn_box: sums[1] / n,
            loss_cls: sums[2] / n,
            loss_box: sums[3] / n,
            ap: metrics.ap,
            ap50: metrics.ap50,
            ap75: metrics.ap75,
        };
        log::info!("epoch {epoch}: {}", row.csv());
        if let Some(f) = &files {
            f.save(&ps, cfg)?;
            f.append(&row)?;
        }
        on_epoch(&row);
        trace.push(row);
    }
    Ok(TrainOutcome { detector: det, params: ps, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_must_increase() {
        let c = TrainConfig { milestones: vec![0.9, 0.5], ..TrainConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("train.milestones"));
        let c = TrainConfig { layer_decay: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_epoch_smoke() {
        let cfg = ExperimentConfig::tiny();
        let (train, val) = cfg.data.load_splits().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&cfg, &train, &val, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(out.trace.len(), 1);
        let csv = fs::read_to_string(dir.path().join(TRACE_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
    }
}
