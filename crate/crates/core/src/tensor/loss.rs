//! Fused loss kernels. Each returns an unnormalized scalar sum; callers divide
//! by their own normalizer.

use super::Tensor;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Summed binary cross-entropy between logits and constant targets in [0, 1].
    pub fn bce_with_logits_sum(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::dim("bce_with_logits", format!("{} targets for {} logits", targets.len(), self.numel())));
        }
        let loss: f64 = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let logits = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            "bce_with_logits",
            vec![loss],
            vec![],
            &[self],
            Box::new(move |g, _| {
                vec![Some(logits.data().iter().zip(&targets).map(|(&x, &t)| g[0] * (sigmoid(x) - t)).collect())]
            }),
        )
    }

    /// Summed smooth-L1 (Huber with transition `beta`; `beta == 0` is L1).
    pub fn smooth_l1_sum(&self, targets: &[f64], beta: f64) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::dim("smooth_l1", format!("{} targets for {} predictions", targets.len(), self.numel())));
        }
        let loss: f64 = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let pred = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            "smooth_l1",
            vec![loss],
            vec![],
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    pred.data()
                        .iter()
                        .zip(&targets)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            let dd = if d.abs() < beta { d / beta } else { d.signum() };
                            g[0] * dd
                        })
                        .collect(),
                )]
            }),
        )
    }

    /// Summed softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy_sum(&self, labels: &[usize]) -> Result<Tensor> {
        let [n, k] = *self.shape() else {
            return Err(Error::dim("cross_entropy", format!("expected [N, K] logits, got {:?}", self.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::dim("cross_entropy", format!("{} labels (max class {k}) for {n} rows", labels.len())));
        }
        let x = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        Tensor::from_op(
            "cross_entropy",
            vec![loss],
            vec![],
            &[self],
            Box::new(move |g, _| {
                let mut gx = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gx[r * k + label] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= g[0]);
                vec![Some(gx)]
            }),
        )
    }
}
