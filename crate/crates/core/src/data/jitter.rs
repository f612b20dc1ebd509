use rand::Rng;

use super::Sample;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize of a `[C, H, W]` image (half-pixel centres, edge clamp).
pub fn resize_bilinear(img: &[f64], c: usize, hw: (usize, usize), out: (usize, usize)) -> Vec<f64> {
    if hw == out {
        return img.to_vec();
    }
    let (h, w) = hw;
    let (oh, ow) = out;
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let s = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, oh), axis(w, ow));
    let mut res = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                res[ch * oh * ow + oy * ow + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    res
}

/// Rescale by a uniform factor from `scale_range`, then random-crop or
/// zero-pad (bottom/right) to `out_hw`. Boxes follow the transform, are
/// clipped to the canvas, and dropped below 1 px of area.
pub fn large_scale_jitter<R: Rng>(sample: &Sample, scale_range: (f64, f64), out_hw: (usize, usize), rng: &mut R) -> Result<Sample> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && hi <= 8.0 && lo <= hi) {
        return Err(Error::Config(format!("train.jitter range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 8")));
    }
    let [c, h, w] = *sample.image.shape() else {
        return Err(Error::dim("large_scale_jitter", format!("expected [C, H, W], got {:?}", sample.image.shape())));
    };
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let nh = ((h as f64 * s).round() as usize).max(1);
    let nw = ((w as f64 * s).round() as usize).max(1);
    let (sy, sx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let resized = resize_bilinear(sample.image.data(), c, (h, w), (nh, nw));
    let (oh, ow) = out_hw;
    let oy = if nh > oh { rng.random_range(0..=nh - oh) } else { 0 };
    let ox = if nw > ow { rng.random_range(0..=nw - ow) } else { 0 };
    let mut canvas = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh.min(nh - oy) {
            let src = &resized[ch * nh * nw + (y + oy) * nw + ox..][..ow.min(nw - ox)];
            canvas[ch * oh * ow + y * ow..][..src.len()].copy_from_slice(src);
        }
    }
    let gt = sample
        .gt
        .iter()
        .filter_map(|(b, cls)| {
            let t = BBox::new(b.x1 * sx - ox as f64, b.y1 * sy - oy as f64, b.x2 * sx - ox as f64, b.y2 * sy - oy as f64)
                .clip(oh as f64, ow as f64);
            (t.area() >= 1.0 && t.is_valid()).then_some((t, *cls))
        })
        .collect();
    Ok(Sample { image: Tensor::raw(canvas, vec![c, oh, ow]), gt })
}
