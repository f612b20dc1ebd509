//! Spatial kernels over `[B, C, H, W]` maps.

use std::sync::Arc;

use super::ops::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, format!("expected a 4-D tensor, got {:?}", t.shape()))),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold one image `[C, H, W]` into `[C*kh*kw, oh*ow]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if xx < 0 || xx >= self.w as isize { 0.0 } else { src[xx as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: fold columns back, summing overlaps.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let n = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + y as usize) * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation with zero padding. `w` is `[O, C, kh, kw]`.
    pub fn conv2d(&self, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (b, c, h, wd) = dims4("conv2d", self)?;
        let (o, wc, kh, kw) = dims4("conv2d", w)?;
        if wc != c {
            return Err(Error::dim("conv2d", format!("input {:?} vs weight {:?}", self.shape(), w.shape())));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {o} outputs", bias.shape())));
            }
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let g = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let (ckk, n) = (c * kh * kw, oh * ow);
        let x = self.data();
        let wt = w.data();
        let mut out = vec![0.0; b * o * n];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * n] };
        for bi in 0..b {
            let xb = &x[bi * c * h * wd..(bi + 1) * c * h * wd];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[bi * o * n..(bi + 1) * o * n];
            if let Some(bias) = bias {
                for (row, &bv) in ob.chunks_mut(n).zip(bias.data()) {
                    row.fill(bv);
                }
            }
            gemm(o, ckk, n, wt, (ckk, 1), src, (n, 1), ob, bias.is_some());
        }
        let (xs, ws) = (self.clone(), w.clone());
        let mut inputs = vec![self, w];
        if let Some(bias) = bias {
            inputs.push(bias);
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            "conv2d",
            out,
            vec![b, o, oh, ow],
            &inputs,
            Box::new(move |gout, needs| {
                let x = xs.data();
                let wt = ws.data();
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wt.len()]);
                let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * n }];
                let mut gcols = vec![0.0; ckk * n];
                for bi in 0..b {
                    let gb = &gout[bi * o * n..(bi + 1) * o * n];
                    let xb = &x[bi * c * h * wd..(bi + 1) * c * h * wd];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[f64] = if g.is_pointwise() {
                            xb
                        } else {
                            g.im2col(xb, &mut cols);
                            &cols
                        };
                        // dW += dY · colsᵀ
                        gemm(o, n, ckk, gb, (n, 1), src, (1, n), gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if g.is_pointwise() {
                            gemm(ckk, o, n, wt, (1, ckk), gb, (n, 1), gxb, true);
                        } else {
                            gemm(ckk, o, n, wt, (1, ckk), gb, (n, 1), &mut gcols, false);
                            g.col2im(&gcols, gxb);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut gbias = vec![0.0; o];
                        for bi in 0..b {
                            for (oc, acc) in gbias.iter_mut().enumerate() {
                                *acc += gout[(bi * o + oc) * n..(bi * o + oc + 1) * n].iter().sum::<f64>();
                            }
                        }
                        gbias
                    }));
                }
                grads
            }),
        )
    }

    /// Transposed convolution with kernel equal to stride, so every input
    /// pixel scatters into a disjoint `stride x stride` output block.
    /// `w` is `[C, O, k, k]`.
    pub fn conv_transpose2d(&self, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let (b, c, h, wd) = dims4("conv_transpose2d", self)?;
        let (wc, o, kh, kw) = dims4("conv_transpose2d", w)?;
        if kh != stride || kw != stride {
            return Err(Error::Unsupported {
                op: "conv_transpose2d",
                detail: format!("kernel {kh}x{kw} with stride {stride}; only kernel == stride is supported"),
            });
        }
        if wc != c {
            return Err(Error::dim("conv_transpose2d", format!("input {:?} vs weight {:?}", self.shape(), w.shape())));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::dim("conv_transpose2d", format!("bias {:?} for {o} outputs", bias.shape())));
            }
        }
        let s = stride;
        let (hw, oss) = (h * wd, o * s * s);
        let (oh, ow) = (h * s, wd * s);
        let x = self.data();
        let wt = w.data();
        let mut out = vec![0.0; b * o * oh * ow];
        let mut y = vec![0.0; oss * hw];
        for bi in 0..b {
            // Y[(o,di,dj), hw] = Wᵀ · X
            gemm(oss, c, hw, wt, (1, oss), &x[bi * c * hw..], (hw, 1), &mut y, false);
            let ob = &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow];
            for oc in 0..o {
                let bv = bias.map_or(0.0, |t| t.data()[oc]);
                for di in 0..s {
                    for dj in 0..s {
                        let row = &y[((oc * s + di) * s + dj) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..wd {
                                ob[(oc * oh + i * s + di) * ow + j * s + dj] = row[i * wd + j] + bv;
                            }
                        }
                    }
                }
            }
        }
        let (xs, ws) = (self.clone(), w.clone());
        let mut inputs = vec![self, w];
        if let Some(bias) = bias {
            inputs.push(bias);
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            "conv_transpose2d",
            out,
            vec![b, o, oh, ow],
            &inputs,
            Box::new(move |gout, needs| {
                let x = xs.data();
                let wt = ws.data();
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wt.len()]);
                let mut gbias = vec![0.0; o];
                let mut gy = vec![0.0; oss * hw];
                for bi in 0..b {
                    let gb = &gout[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    for oc in 0..o {
                        for di in 0..s {
                            for dj in 0..s {
                                let row = &mut gy[((oc * s + di) * s + dj) * hw..][..hw];
                                for i in 0..h {
                                    for j in 0..wd {
                                        let v = gb[(oc * oh + i * s + di) * ow + j * s + dj];
                                        row[i * wd + j] = v;
                                        gbias[oc] += v;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dX = W · dY
                        gemm(c, oss, hw, wt, (oss, 1), &gy, (hw, 1), &mut gx[bi * c * hw..], true);
                    }
                    if let Some(gw) = gw.as_mut() {
                        // dW = X · dYᵀ
                        gemm(c, hw, oss, &x[bi * c * hw..], (hw, 1), &gy, (1, hw), gw, true);
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then_some(gbias));
                }
                grads
            }),
        )
    }

    /// Max or average pooling. Extents must tile exactly: the caller pads.
    pub fn pool2d(&self, kind: PoolKind, kernel: usize, stride: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("pool2d", self)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("pool2d", "kernel and stride must be positive"));
        }
        if h % stride != 0 || w % stride != 0 || h < kernel || w < kernel || !(h - kernel).is_multiple_of(stride) || !(w - kernel).is_multiple_of(stride) {
            return Err(Error::dim(
                "pool2d",
                format!("{h}x{w} map does not tile with kernel {kernel}, stride {stride}"),
            ));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let x = self.data();
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = if kind == PoolKind::Max { vec![0usize; out.len()] } else { Vec::new() };
        let area = (kernel * kernel) as f64;
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let oidx = (p * oh + i) * ow + j;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut total = 0.0;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let at = (i * stride + di) * w + j * stride + dj;
                            let v = plane[at];
                            total += v;
                            if v > best {
                                best = v;
                                best_at = p * h * w + at;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[oidx] = best;
                            argmax[oidx] = best_at;
                        }
                        PoolKind::Avg => out[oidx] = total / area,
                    }
                }
            }
        }
        let n_in = x.len();
        Tensor::from_op(
            match kind {
                PoolKind::Max => "max_pool2d",
                PoolKind::Avg => "avg_pool2d",
            },
            out,
            vec![b, c, oh, ow],
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n_in];
                match kind {
                    PoolKind::Max => {
                        for (gi, &at) in g.iter().zip(&argmax) {
                            gx[at] += gi;
                        }
                    }
                    PoolKind::Avg => {
                        for p in 0..planes {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = g[(p * oh + i) * ow + j] / area;
                                    for di in 0..kernel {
                                        for dj in 0..kernel {
                                            gx[p * h * w + (i * stride + di) * w + j * stride + dj] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("upsample_nearest", self)?;
        if factor == 0 {
            return Err(Error::dim("upsample_nearest", "factor must be positive"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = x[(p * h + i / factor) * w + j / factor];
                }
            }
        }
        let n_in = x.len();
        Ok(Tensor::from_op_unchecked(
            "upsample_nearest",
            Arc::new(out),
            vec![b, c, oh, ow],
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n_in];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(p * h + i / factor) * w + j / factor] += g[(p * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

const CUBIC_A: f64 = -0.75;

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Row-major `[out_len, in_len]` resampling matrix for separable bicubic
/// interpolation (half-pixel centres, border taps clamped).
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == out_len {
        for i in 0..in_len {
            m[i * in_len + i] = 1.0;
        }
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let wgt = cubic_weight(t - k as f64);
            let idx = (base as i64 + k).clamp(0, in_len as i64 - 1) as usize;
            m[o * in_len + idx] += wgt;
        }
    }
    m
}

/// Bicubic resize of the two trailing axes. Returns the input unchanged when
/// the size already matches.
pub fn interpolate_bicubic(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::dim("interpolate_bicubic", format!("need at least 2-D input, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    if h < 2 || w < 2 {
        return Err(Error::dim("interpolate_bicubic", format!("spatial extent {h}x{w} below 2x2")));
    }
    let (oh, ow) = out;
    if oh == 0 || ow == 0 {
        return Err(Error::dim("interpolate_bicubic", "output extent must be positive"));
    }
    let mut y = x.clone();
    if oh != h {
        let rh = Tensor::raw(bicubic_matrix(h, oh), vec![oh, h]);
        y = rh.matmul(&y)?;
    }
    if ow != w {
        // [w', w]ᵀ laid out as [w, w']
        let rw = bicubic_matrix(w, ow);
        let mut rwt = vec![0.0; w * ow];
        for o in 0..ow {
            for i in 0..w {
                rwt[i * ow + o] = rw[o * w + i];
            }
        }
        y = y.matmul(&Tensor::raw(rwt, vec![w, ow]))?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_conv() {
        let x = Tensor::new((0..16).map(|v| v as f64 * 0.5 - 3.0).collect(), &[1, 1, 4, 4]).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn padded_3x3_counts_taps() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_output_extent_formula() {
        let x = Tensor::ones(&[2, 3, 9, 7]);
        let w = Tensor::ones(&[4, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
        assert!(Tensor::ones(&[1, 1, 2, 2]).conv2d(&Tensor::ones(&[1, 1, 5, 5]), None, 1, 1).is_err());
    }

    #[test]
    fn deconv_scatters_one_pixel() {
        let x = Tensor::new(vec![5.0], &[1, 1, 1, 1]).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = x.conv_transpose2d(&w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);
        let z = Tensor::ones(&[1, 3, 7, 7]).conv_transpose2d(&Tensor::ones(&[3, 4, 2, 2]), None, 2).unwrap();
        assert_eq!(z.shape(), &[1, 4, 14, 14]);
        assert!(matches!(
            Tensor::ones(&[1, 1, 2, 2]).conv_transpose2d(&Tensor::ones(&[1, 1, 3, 3]), None, 2),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn pooling_definitions() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.pool2d(PoolKind::Max, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(x.pool2d(PoolKind::Avg, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[1, 2, 64, 64], 0.7);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let p = c.pool2d(kind, 2, 2).unwrap();
            assert_eq!(p.shape(), &[1, 2, 32, 32]);
            assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
        assert!(Tensor::ones(&[1, 1, 5, 4]).pool2d(PoolKind::Max, 2, 2).is_err());
    }

    #[test]
    fn bicubic_identity_and_constants() {
        let x = Tensor::new((0..42).map(|v| (v as f64).sin()).collect(), &[3, 2, 7]).unwrap();
        assert_eq!(interpolate_bicubic(&x, (2, 7)).unwrap().data(), x.data());
        let c = Tensor::full(&[2, 3, 14, 14], 0.37);
        let r = interpolate_bicubic(&c, (16, 16)).unwrap();
        assert_eq!(r.shape(), &[2, 3, 16, 16]);
        assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-9));
    }

    #[test]
    fn bicubic_rows_sum_to_one() {
        for (a, b) in [(14, 16), (16, 14), (4, 9), (9, 4)] {
            let m = bicubic_matrix(a, b);
            for row in m.chunks(a) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
