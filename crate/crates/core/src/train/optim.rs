use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Owner, ParamId, ParamStore};

/// Learning-rate multiplier for layer-wise decay: block `i` gets
/// `d^(depth - i)`, embeddings `d^(depth + 1)`, heads 1.
pub fn layer_decay_multiplier(owner: Owner, depth: usize, d: f64) -> f64 {
    match owner {
        Owner::Embed => d.powi(depth as i32 + 1),
        Owner::Block(i) => d.powi((depth - i) as i32),
        Owner::Head => 1.0,
    }
}

/// Linear warmup from 0, then `base * factor^(milestones passed)`, with
/// milestones given as fractions of `total_iters`.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.base_lr * iter as f64 / cfg.warmup_iters as f64;
    }
    let passed = cfg.milestones.iter().filter(|&&m| iter as f64 >= m * total_iters as f64).count();
    cfg.base_lr * cfg.step_factor.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub owner: Owner,
    pub decay: bool,
    pub lr_mult: f64,
    pub wd_mult: f64,
    #[serde(skip)]
    pub ids: Vec<ParamId>,
}

/// Partition trainables by (owner, decays?). Norms, biases and bias tables
/// carry `decay = false` and get no weight decay.
pub fn param_groups(ps: &ParamStore, depth: usize, layer_decay: f64) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for id in ps.ids() {
        let p = ps.param(id);
        match groups.iter_mut().find(|g| g.owner == p.owner && g.decay == p.decay) {
            Some(g) => g.ids.push(id),
            None => groups.push(ParamGroup {
                owner: p.owner,
                decay: p.decay,
                lr_mult: layer_decay_multiplier(p.owner, depth, layer_decay),
                wd_mult: if p.decay { 1.0 } else { 0.0 },
                ids: vec![id],
            }),
        }
    }
    groups
}

/// Every parameter in exactly one group.
pub fn audit_groups(ps: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
    let mut seen = vec![0usize; ps.len()];
    for g in groups {
        for id in &g.ids {
            seen[id.index()] += 1;
        }
    }
    match seen.iter().position(|&n| n != 1) {
        Some(i) => Err(Error::Contract(format!(
            "parameter {} appears in {} groups",
            ps.iter().nth(i).map(|p| p.name.as_str()).unwrap_or("?"),
            seen[i]
        ))),
        None => Ok(()),
    }
}

/// One AdamW update of a flat parameter: decoupled decay `lr * wd * w` plus
/// the bias-corrected adaptive step. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, wd: f64, betas: (f64, f64), eps: f64) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] -= lr * wd * w[i] + lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW state over a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = ps.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Apply gradients held on the store's leaves, then reset them.
    pub fn step(&mut self, ps: &mut ParamStore, groups: &[ParamGroup], lr: f64, cfg: &TrainConfig) -> Result<()> {
        for id in ps.ids() {
            if let Some(g) = ps.get(id).grad() {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad(format!("{} (element {k})", ps.param(id).name)));
                }
            }
        }
        self.t += 1;
        for group in groups {
            for &id in &group.ids {
                let Some(g) = ps.get(id).grad() else { continue };
                let mut w = ps.get(id).to_vec();
                let i = id.index();
                adamw_step(
                    &mut w,
                    &g,
                    &mut self.m[i],
                    &mut self.v[i],
                    self.t,
                    lr * group.lr_mult,
                    cfg.weight_decay * group.wd_mult,
                    (cfg.beta1, cfg.beta2),
                    cfg.eps,
                );
                ps.set_data(id, w)?;
            }
        }
        ps.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hand_evaluated_first_step() {
        let (mut w, mut m, mut v) = (vec![1.0], vec![0.0], vec![0.0]);
        adamw_step(&mut w, &[1.0], &mut m, &mut v, 1, 0.1, 0.1, (0.9, 0.999), 1e-8);
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.01;
        assert!((w[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_wd_is_fixed_point() {
        let (mut w, mut m, mut v) = (vec![0.3, -2.0], vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0, (0.9, 0.999), 1e-8);
        assert_eq!(w, vec![0.3, -2.0]);
    }

    #[test]
    fn decay_multipliers() {
        assert_eq!(layer_decay_multiplier(Owner::Block(11), 12, 0.7), 0.7);
        assert!((layer_decay_multiplier(Owner::Embed, 12, 0.7) - 0.7f64.powi(13)).abs() < 1e-15);
        assert_eq!(layer_decay_multiplier(Owner::Head, 12, 0.7), 1.0);
        assert_eq!(layer_decay_multiplier(Owner::Block(0), 12, 1.0), 1.0);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { base_lr: 1.0, warmup_iters: 10, ..TrainConfig::default() };
        assert_eq!(lr_at(5, 100, &cfg), 0.5);
        assert_eq!(lr_at(50, 100, &cfg), 1.0);
        assert!((lr_at(97, 100, &cfg) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn groups_cover_store() {
        let mut ps = ParamStore::new();
        ps.add("a.weight", Tensor::ones(&[2]), Owner::Block(0), true);
        ps.add("a.bias", Tensor::ones(&[2]), Owner::Block(0), false);
        ps.add("h.weight", Tensor::ones(&[2]), Owner::Head, true);
        let g = param_groups(&ps, 1, 0.5);
        assert_eq!(g.len(), 3);
        audit_groups(&ps, &g).unwrap();
        let mut dup = g.clone();
        let extra = dup[1].ids[0];
        dup[0].ids.push(extra);
        assert!(audit_groups(&ps, &dup).is_err());
    }
}
