//! Parameter storage and the handful of layer types shared by every module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to. Drives layer-wise
/// learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    /// Patch and positional embeddings.
    Embed,
    /// Transformer block `i` (including any propagation block inserted after it).
    Block(usize),
    /// Pyramid and detection heads.
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub owner: Owner,
    /// Whether weight decay applies (false for norms, biases, bias tables).
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered registry of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, owner: Owner, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value: value.detach().requires_grad(), owner, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Replace a parameter's values; the new leaf starts without a gradient.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.value.numel() {
            return Err(Error::dim("ParamStore::set_data", format!("{}: {} values for shape {:?}", p.name, data.len(), p.value.shape())));
        }
        p.value = Tensor::new(data, p.value.shape())?.requires_grad();
        Ok(())
    }

    /// Copy of the store with one parameter swapped for `value` as given
    /// (kept in the graph), used to differentiate with respect to it.
    pub fn replaced(&self, id: ParamId, value: Tensor) -> ParamStore {
        let mut out = self.clone();
        out.params[id.0].value = value;
        out
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value = p.value.detach().requires_grad();
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor::raw((0..n).map(|_| dist.sample(&mut self.rng)).collect(), shape.to_vec())
    }

    /// Normal resampled until it falls inside two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect();
        Tensor::raw(data, shape.to_vec())
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::raw((0..n).map(|_| self.rng.random_range(lo..hi)).collect(), shape.to_vec())
    }

    /// He-normal for a conv weight `[O, C, kh, kw]` (fan-out mode).
    pub fn kaiming_conv(&mut self, shape: &[usize]) -> Tensor {
        let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
        self.normal(shape, (2.0 / fan_out).sqrt())
    }
}

/// Forward-pass context: training flag plus the RNG used by stochastic
/// layers and sampling.
pub struct RunCtx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl RunCtx {
    pub fn eval() -> Self {
        RunCtx { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        RunCtx { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Stochastic depth: zero each sample's residual branch with probability
/// `rate` and rescale survivors by `1 / (1 - rate)`.
pub fn drop_path(x: &Tensor, rate: f64, ctx: &mut RunCtx) -> Result<Tensor> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let factors: Vec<f64> = (0..x.shape()[0])
        .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    x.scale_leading(&factors)
}

/// Fully connected layer; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize, owner: Owner) -> Self {
        let w = ps.add(format!("{name}.weight"), init.trunc_normal(&[din, dout], 0.02), owner, true);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]), owner, false);
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.last() != Some(&self.din) {
            return Err(Error::dim("linear", format!("input {:?} for in-features {}", shape, self.din)));
        }
        let rows = x.numel() / self.din;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().expect("non-empty") = self.dout;
        x.reshape(&[rows, self.din])?
            .matmul(ps.get(self.w))?
            .add(ps.get(self.b))?
            .reshape(&out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        owner: Owner,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), init.kaiming_conv(&[cout, cin, k, k]), owner, true);
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), owner, false));
        Conv2d { w, b, stride, pad: k / 2 }
    }

    /// Same layer but with weight and bias set to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, bias: bool, owner: Owner) -> Self {
        let w = ps.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]), owner, true);
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), owner, false));
        Conv2d { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv2d(ps.get(self.w), self.b.map(|b| ps.get(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, owner: Owner) -> Self {
        let gamma = ps.add(format!("{name}.weight"), Tensor::ones(&[dim]), owner, false);
        let beta = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]), owner, false);
        LayerNorm { gamma, beta, eps: 1e-6 }
    }

    /// Normalize over `axis` (last axis for tokens, axis 1 for NCHW maps).
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, axis: usize) -> Result<Tensor> {
        x.layer_norm(ps.get(self.gamma), ps.get(self.beta), axis, self.eps)
    }
}
