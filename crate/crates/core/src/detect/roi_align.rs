//! Quantization-free region pooling (aligned variant: pixel centres sit at
//! integer coordinates after the half-pixel shift).

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear taps `(flat index, weight)` at `(y, x)` on an `h x w` map. Points
/// more than one pixel outside contribute nothing; near edges the coordinate
/// is clamped.
fn bilinear_taps(mut y: f64, mut x: f64, h: usize, w: usize, out: &mut Vec<(usize, f64)>, scale: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let (mut y0, mut x0) = (y as usize, x as usize);
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, hy * hx * scale));
    out.push((y0 * w + x1, hy * lx * scale));
    out.push((y1 * w + x0, ly * hx * scale));
    out.push((y1 * w + x1, ly * lx * scale));
}

/// Pool each `(batch index, box)` from `features: [B, C, H, W]` into
/// `[R, C, out, out]`, averaging `sampling x sampling` bilinear samples per
/// bin. Boxes are in input pixels; `spatial_scale` maps them onto the map.
/// Gradients flow to `features` only.
pub fn roi_align(features: &Tensor, rois: &[(usize, BBox)], spatial_scale: f64, out: usize, sampling: usize) -> Result<Tensor> {
    let [b, c, h, w] = *features.shape() else {
        return Err(Error::dim("roi_align", format!("expected [B, C, H, W], got {:?}", features.shape())));
    };
    if rois.is_empty() || out == 0 || sampling == 0 {
        return Err(Error::dim("roi_align", format!("{} rois, output {out}, sampling {sampling}", rois.len())));
    }
    if let Some((bi, _)) = rois.iter().find(|(bi, _)| *bi >= b) {
        return Err(Error::dim("roi_align", format!("batch index {bi} for batch of {b}")));
    }
    let r = rois.len();
    let cells = out * out;
    // Taps per (roi, cell), shared across channels.
    let mut offsets = Vec::with_capacity(r * cells + 1);
    let mut taps: Vec<(usize, f64)> = Vec::new();
    let inv = 1.0 / (sampling * sampling) as f64;
    for (_, bx) in rois {
        let sx = bx.x1 * spatial_scale - 0.5;
        let sy = bx.y1 * spatial_scale - 0.5;
        let bin_w = bx.width() * spatial_scale / out as f64;
        let bin_h = bx.height() * spatial_scale / out as f64;
        for ph in 0..out {
            for pw in 0..out {
                offsets.push(taps.len());
                for iy in 0..sampling {
                    let y = sy + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                    for ix in 0..sampling {
                        let x = sx + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                        bilinear_taps(y, x, h, w, &mut taps, inv);
                    }
                }
            }
        }
    }
    offsets.push(taps.len());
    let plane = h * w;
    let batch_of: Vec<usize> = rois.iter().map(|(bi, _)| *bi).collect();
    let f = features.data();
    let mut data = vec![0.0; r * c * cells];
    for ri in 0..r {
        for ch in 0..c {
            let src = &f[(batch_of[ri] * c + ch) * plane..][..plane];
            for cell in 0..cells {
                let t = &taps[offsets[ri * cells + cell]..offsets[ri * cells + cell + 1]];
                data[(ri * c + ch) * cells + cell] = t.iter().map(|&(i, wgt)| src[i] * wgt).sum();
            }
        }
    }
    let n_in = features.numel();
    Tensor::from_op(
        "roi_align",
        data,
        vec![r, c, out, out],
        &[features],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n_in];
            for ri in 0..r {
                for ch in 0..c {
                    let base = (batch_of[ri] * c + ch) * plane;
                    for cell in 0..cells {
                        let go = g[(ri * c + ch) * cells + cell];
                        for &(i, wgt) in &taps[offsets[ri * cells + cell]..offsets[ri * cells + cell + 1]] {
                            gx[base + i] += go * wgt;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_gives_constant_output() {
        let f = Tensor::full(&[1, 2, 8, 8], 3.0);
        let y = roi_align(&f, &[(0, BBox::new(1.3, 0.7, 6.2, 5.9))], 1.0, 7, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 7, 7]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn centre_samples_reproduce_grid_cells() {
        let vals: Vec<f64> = (0..49).map(|i| (i * i % 13) as f64).collect();
        let f = Tensor::new(vals.clone(), &[1, 1, 7, 7]).unwrap();
        let y = roi_align(&f, &[(0, BBox::new(0.0, 0.0, 7.0, 7.0))], 1.0, 7, 1).unwrap();
        assert_eq!(y.data(), &vals[..]);
    }

    #[test]
    fn rejects_bad_batch_index() {
        let f = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(roi_align(&f, &[(1, BBox::new(0.0, 0.0, 2.0, 2.0))], 1.0, 2, 2).is_err());
    }
}
