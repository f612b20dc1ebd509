use std::sync::Arc;

use super::{axis_split, numel, Tensor};
use crate::error::{Error, Result};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// How the second operand of a binary op maps onto the output.
enum Bcast {
    Same,
    /// `b` equals a trailing slice of `a`'s shape and repeats.
    Suffix(usize),
    General { out_shape: Vec<usize>, ia: Vec<usize>, ib: Vec<usize> },
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source offsets of every output element for an operand broadcast to `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Bcast::Suffix(numel(b)));
    }
    let out_shape = broadcast_shape(a, b)
        .ok_or_else(|| Error::dim(op, format!("cannot broadcast {a:?} with {b:?}")))?;
    let ia = broadcast_index(a, &out_shape);
    let ib = broadcast_index(b, &out_shape);
    Ok(Bcast::General { out_shape, ia, ib })
}

/// Sum `g` (laid out over the output) back onto an operand.
fn reduce_to(g: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (gi, &i) in g.iter().zip(idx) {
        out[i] += gi;
    }
    out
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.data(), other.data());
        match plan("add", self.shape(), other.shape())? {
            Bcast::Same => {
                let data: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                Tensor::from_op(
                    "add",
                    data,
                    self.shape().to_vec(),
                    &[self, other],
                    Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
                )
            }
            Bcast::Suffix(nb) => {
                let mut data = a.to_vec();
                for chunk in data.chunks_mut(nb) {
                    chunk.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                Tensor::from_op(
                    "add",
                    data,
                    self.shape().to_vec(),
                    &[self, other],
                    Box::new(move |g, needs| {
                        let gb = needs[1].then(|| {
                            let mut acc = vec![0.0; nb];
                            for chunk in g.chunks(nb) {
                                acc.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                            }
                            acc
                        });
                        vec![Some(g.to_vec()), gb]
                    }),
                )
            }
            Bcast::General { out_shape, ia, ib } => {
                let data: Vec<f64> = ia.iter().zip(&ib).map(|(&i, &j)| a[i] + b[j]).collect();
                let (na, nb) = (a.len(), b.len());
                Tensor::from_op(
                    "add",
                    data,
                    out_shape,
                    &[self, other],
                    Box::new(move |g, needs| {
                        vec![
                            needs[0].then(|| reduce_to(g, &ia, na)),
                            needs[1].then(|| reduce_to(g, &ib, nb)),
                        ]
                    }),
                )
            }
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0)?)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (ta, tb) = (self.clone(), other.clone());
        let (a, b) = (self.data(), other.data());
        let (out_shape, ia, ib): (Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>) =
            match plan("mul", self.shape(), other.shape())? {
                Bcast::Same => (self.shape().to_vec(), None, None),
                Bcast::Suffix(nb) => {
                    let ib = (0..a.len()).map(|i| i % nb).collect();
                    (self.shape().to_vec(), None, Some(ib))
                }
                Bcast::General { out_shape, ia, ib } => (out_shape, Some(ia), Some(ib)),
            };
        let n = numel(&out_shape);
        let at = |i: usize, idx: &Option<Vec<usize>>| idx.as_ref().map_or(i, |v| v[i]);
        let data: Vec<f64> = (0..n).map(|i| a[at(i, &ia)] * b[at(i, &ib)]).collect();
        Tensor::from_op(
            "mul",
            data,
            out_shape,
            &[self, other],
            Box::new(move |g, needs| {
                let (a, b) = (ta.data(), tb.data());
                let ga = needs[0].then(|| {
                    let mut out = vec![0.0; a.len()];
                    for (i, gi) in g.iter().enumerate() {
                        out[at(i, &ia)] += gi * b[at(i, &ib)];
                    }
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = vec![0.0; b.len()];
                    for (i, gi) in g.iter().enumerate() {
                        out[at(i, &ib)] += gi * a[at(i, &ia)];
                    }
                    out
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| vec![Some(g.iter().map(|x| x * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(
            "add_scalar",
            data,
            self.shape().to_vec(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Multiply every slice along axis 0 by a constant factor (no gradient to
    /// the factors). Used for per-sample drop path.
    pub fn scale_leading(&self, factors: &[f64]) -> Result<Tensor> {
        let lead = self.shape().first().copied().unwrap_or(0);
        if factors.len() != lead {
            return Err(Error::dim(
                "scale_leading",
                format!("{} factors for leading extent {lead}", factors.len()),
            ));
        }
        let inner = self.numel() / lead;
        let mut data = self.to_vec();
        for (chunk, f) in data.chunks_mut(inner).zip(factors) {
            chunk.iter_mut().for_each(|x| *x *= f);
        }
        let factors = factors.to_vec();
        Tensor::from_op(
            "scale_leading",
            data,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| {
                let mut out = g.to_vec();
                for (chunk, f) in out.chunks_mut(inner).zip(&factors) {
                    chunk.iter_mut().for_each(|x| *x *= f);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![total], vec![], &[self], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op_unchecked(
            "reshape",
            Arc::clone(&self.0.data),
            shape.to_vec(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != rank || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op_unchecked(
            "permute",
            Arc::new(data),
            out_shape,
            &[self],
            Box::new(move |g, _| vec![Some(permute_data(g, &out_shape_c, &inverse))]),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis} range {start}..{} of shape {:?}", start + len, self.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op_unchecked(
            "narrow",
            Arc::new(data),
            shape,
            &[self],
            Box::new(move |g, _| {
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Zero-pad `before`/`after` entries along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("pad", format!("axis {axis} of shape {:?}", self.shape())));
        }
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let m = n + before + after;
        let src = self.data();
        let mut data = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = m;
        Ok(Tensor::from_op_unchecked(
            "pad",
            Arc::new(data),
            shape,
            &[self],
            Box::new(move |g, _| {
                let mut out = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let s = (o * m + before) * inner;
                    out.extend_from_slice(&g[s..s + n * inner]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Cyclic shift along `axis`: output[i] = input[(i - shift) mod n].
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("roll", format!("axis {axis} of shape {:?}", self.shape())));
        }
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let s = shift.rem_euclid(n as isize) as usize;
        if s == 0 {
            return Ok(self.clone());
        }
        let roll_data = move |src: &[f64], s: usize| {
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..n {
                    let j = (i + s) % n;
                    let from = (o * n + i) * inner;
                    let to = (o * n + j) * inner;
                    out[to..to + inner].copy_from_slice(&src[from..from + inner]);
                }
            }
            out
        };
        let data = roll_data(self.data(), s);
        Ok(Tensor::from_op_unchecked(
            "roll",
            Arc::new(data),
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| vec![Some(roll_data(g, n - s))]),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} of shape {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape())));
            }
        }
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op_unchecked(
            "concat",
            Arc::new(data),
            shape,
            &refs,
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(extents.len());
                for (k, &e) in extents.iter().enumerate() {
                    if needs[k] {
                        let mut gk = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gk.extend_from_slice(&g[s..s + e * inner]);
                        }
                        out.push(Some(gk));
                    } else {
                        out.push(None);
                    }
                    offset += e;
                }
                out
            }),
        ))
    }

    /// Gather slices along axis 0. Indices may repeat; gradients scatter-add.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let lead = self.shape().first().copied().unwrap_or(0);
        if indices.is_empty() {
            return Err(Error::dim("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= lead) {
            return Err(Error::dim("index_select", format!("index {bad} out of range for {lead}")));
        }
        let inner = self.numel() / lead;
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(Tensor::from_op_unchecked(
            "index_select",
            Arc::new(data),
            shape,
            &[self],
            Box::new(move |g, _| {
                let mut out = vec![0.0; lead * inner];
                for (k, &i) in indices.iter().enumerate() {
                    out[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcasting over the leading (batch) extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("operands must be at least 2-D: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb);
        let Some(batch) = batch.filter(|_| k == k2) else {
            return Err(Error::dim("matmul", format!("incompatible shapes {sa:?} x {sb:?}")));
        };
        let nbatch = numel(&batch);
        let ia = broadcast_index(ba, &batch);
        let ib = broadcast_index(bb, &batch);
        let mut out = vec![0.0; nbatch * m * n];
        let (a, b) = (self.data(), other.data());
        for t in 0..nbatch {
            gemm(
                m,
                k,
                n,
                &a[ia[t] * m * k..],
                (k, 1),
                &b[ib[t] * k * n..],
                (n, 1),
                &mut out[t * m * n..],
                false,
            );
        }
        check_finite("matmul", &out)?;
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op_unchecked(
            "matmul",
            Arc::new(out),
            shape,
            &[self, other],
            Box::new(move |g, needs| {
                let (a, b) = (ta.data(), tb.data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; a.len()];
                    for t in 0..nbatch {
                        // dA = dC · Bᵀ
                        gemm(m, n, k, &g[t * m * n..], (n, 1), &b[ib[t] * k * n..], (1, n), &mut ga[ia[t] * m * k..], true);
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b.len()];
                    for t in 0..nbatch {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, &a[ia[t] * m * k..], (1, k), &g[t * m * n..], (n, 1), &mut gb[ib[t] * k * n..], true);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("softmax", format!("axis {axis} of shape {:?}", self.shape())));
        }
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] /= total;
                }
            }
        }
        check_finite("softmax", &y)?;
        let y = Arc::new(y);
        let saved = Arc::clone(&y);
        Ok(Tensor::from_op_unchecked(
            "softmax",
            y,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| {
                let y = &saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over `axis` with per-channel affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        if axis >= self.rank() {
            return Err(Error::dim("layer_norm", format!("axis {axis} of shape {:?}", self.shape())));
        }
        let (outer, c, inner) = axis_split(self.shape(), axis);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * c + j) * inner + i;
                let mean = (0..c).map(|j| x[at(j)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|j| (x[at(j)] - mean).powi(2)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..c {
                    let h = (x[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    y[at(j)] = h * gm[j] + bt[j];
                }
            }
        }
        check_finite("layer_norm", &y)?;
        let gamma_c = gamma.clone();
        Tensor::from_op(
            "layer_norm",
            y,
            self.shape().to_vec(),
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gm = gamma_c.data();
                let mut gx = needs[0].then(|| vec![0.0; xhat.len()]);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * c + j) * inner + i;
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let gh = g[at(j)] * gm[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[at(j)];
                            gg[j] += g[at(j)] * xhat[at(j)];
                            gb[j] += g[at(j)];
                        }
                        mean_gh /= c as f64;
                        mean_ghx /= c as f64;
                        if let Some(gx) = gx.as_mut() {
                            let r = inv_std[o * inner + i];
                            for j in 0..c {
                                let gh = g[at(j)] * gm[j];
                                gx[at(j)] = r * (gh - mean_gh - xhat[at(j)] * mean_ghx);
                            }
                        }
                    }
                }
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        match kind {
            Activation::Gelu => self.gelu(),
            Activation::Relu => self.relu(),
        }
    }

    /// GeLU with the exact Gaussian CDF.
    pub fn gelu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| gelu(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            "gelu",
            data,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.iter().zip(input.data()).map(|(gi, &x)| gi * gelu_grad(x)).collect())]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let input = self.clone();
        Tensor::from_op(
            "relu",
            data,
            self.shape().to_vec(),
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.iter().zip(input.data()).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect())]
            }),
        )
    }
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // Innermost output axis is copied in a tight loop.
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], strides[last]);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    let rows = total / n_last;
    for _ in 0..rows {
        let mut o = off;
        for _ in 0..n_last {
            out.push(src[o]);
            o += s_last;
        }
        for d in (0..last).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}

/// `c (+)= a · b` for row/column-strided operands. `a` is m×k, `b` is k×n, `c`
/// is a contiguous m×n block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every address dgemm touches within the
    // three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
