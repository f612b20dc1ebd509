//! Datasets, augmentation and evaluation.

pub mod coco;
pub mod eval;
pub mod jitter;
pub mod synth;

use std::fs;
use std::path::Path;

pub use coco::{load_coco_json, parse_coco, CocoImage, CocoIndex};
pub use eval::{coco_thresholds, eval_ap, eval_ap_at, EvalResult};
pub use jitter::large_scale_jitter;
pub use synth::{synth_dataset, SynthConfig, CLASS_NAMES};

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image `[3, H, W]` in [0, 1] with its `(box, class)` ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub gt: Vec<(BBox, usize)>,
}

/// Stack same-sized images into `[B, 3, H, W]`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim("stack_images", format!("{:?} vs {:?}", s.image.shape(), shape)));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(data, &full)
}

const INDEX_FILE: &str = "index.json";

/// Write samples as raw little-endian f64 `.bin` images plus a COCO index.
pub fn write_snapshot(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let [_, h, w] = *s.image.shape() else {
            return Err(Error::dim("write_snapshot", format!("expected [3, H, W], got {:?}", s.image.shape())));
        };
        let file_name = format!("images/{:06}.bin", i + 1);
        let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file_name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        images.push(CocoImage { id: i as u64 + 1, file_name, width: w, height: h, gt: s.gt.clone() });
    }
    let categories = CLASS_NAMES.iter().enumerate().map(|(i, n)| (i as u64 + 1, n.to_string())).collect();
    let index = CocoIndex { images, categories };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&coco::to_coco_json(&index)).expect("json values serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read a snapshot written by [`write_snapshot`] (or any COCO index whose
/// `file_name`s point at raw `[3, H, W]` f64 images).
pub fn read_snapshot(dir: &Path) -> Result<(Vec<Sample>, CocoIndex)> {
    let index = load_coco_json(&dir.join(INDEX_FILE))?;
    let mut samples = Vec::with_capacity(index.images.len());
    for im in &index.images {
        let path = dir.join(&im.file_name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expect = 3 * im.height * im.width * 8;
        if bytes.len() != expect {
            return Err(Error::Schema(format!(
                "{} holds {} bytes, expected {expect} for a 3x{}x{} image",
                path.display(),
                bytes.len(),
                im.height,
                im.width
            )));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        samples.push(Sample { image: Tensor::new(data, &[3, im.height, im.width])?, gt: im.gt.clone() });
    }
    Ok((samples, index))
}
