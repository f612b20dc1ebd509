use crate::error::Result;
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Owner, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

fn conv_ln(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> (Conv2d, LayerNorm) {
    (
        Conv2d::new(ps, init, name, cin, cout, 3, 1, false, Owner::Head),
        LayerNorm::new(ps, &format!("{name}.norm"), cout, Owner::Head),
    )
}

fn small_conv1x1(ps: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, std: f64) -> Conv2d {
    let w = ps.add(format!("{name}.weight"), init.normal(&[cout, cin, 1, 1], std), Owner::Head, true);
    let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), Owner::Head, false);
    Conv2d { w, b: Some(b), stride: 1, pad: 0 }
}

fn trunk(ps: &ParamStore, layers: &[(Conv2d, LayerNorm)], x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    for (conv, norm) in layers {
        y = norm.forward(ps, &conv.forward(ps, &y)?, 1)?.gelu()?;
    }
    Ok(y)
}

/// Two hidden 3x3 conv layers shared across levels, then 1x1 objectness
/// and box-delta predictors.
#[derive(Debug, Clone)]
pub struct RpnHead {
    convs: Vec<(Conv2d, LayerNorm)>,
    objectness: Conv2d,
    deltas: Conv2d,
    pub anchors_per_location: usize,
}

impl RpnHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, dim: usize, anchors_per_location: usize) -> Self {
        let convs = (0..2).map(|i| conv_ln(ps, init, &format!("rpn.conv{i}"), dim, dim)).collect();
        RpnHead {
            convs,
            objectness: small_conv1x1(ps, init, "rpn.objectness", dim, anchors_per_location, 0.01),
            deltas: small_conv1x1(ps, init, "rpn.deltas", dim, 4 * anchors_per_location, 0.01),
            anchors_per_location,
        }
    }

    /// Objectness logits `[B, N]` and deltas `[B, N, 4]` over all anchors,
    /// level by level in the anchor ordering.
    pub fn forward(&self, ps: &ParamStore, fp: &FeaturePyramid) -> Result<(Tensor, Tensor)> {
        let a = self.anchors_per_location;
        let mut logits = Vec::with_capacity(fp.levels.len());
        let mut deltas = Vec::with_capacity(fp.levels.len());
        for (_, x) in &fp.levels {
            let [b, _, h, w] = *x.shape() else { unreachable!("pyramid levels are 4-D") };
            let t = trunk(ps, &self.convs, x)?;
            logits.push(self.objectness.forward(ps, &t)?.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w * a])?);
            deltas.push(
                self.deltas
                    .forward(ps, &t)?
                    .reshape(&[b, a, 4, h, w])?
                    .permute(&[0, 3, 4, 1, 2])?
                    .reshape(&[b, h * w * a, 4])?,
            );
        }
        Ok((Tensor::concat(&logits, 1)?, Tensor::concat(&deltas, 1)?))
    }
}

/// Four hidden 3x3 conv layers on pooled RoI features, then a class
/// classifier (`K + 1` logits, background last) and per-class deltas.
#[derive(Debug, Clone)]
pub struct BoxHead {
    convs: Vec<(Conv2d, LayerNorm)>,
    cls: Linear,
    reg: Linear,
    pub num_classes: usize,
}

impl BoxHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, dim: usize, pooled: usize, num_classes: usize, hidden: usize) -> Self {
        let convs = (0..hidden).map(|i| conv_ln(ps, init, &format!("roi_head.conv{i}"), dim, dim)).collect();
        let flat = dim * pooled * pooled;
        BoxHead {
            convs,
            cls: Linear::new(ps, init, "roi_head.cls", flat, num_classes + 1, Owner::Head),
            reg: Linear::new(ps, init, "roi_head.reg", flat, 4 * num_classes, Owner::Head),
            num_classes,
        }
    }

    /// `[R, C, P, P]` -> (`[R, K + 1]` logits, `[R, 4K]` deltas).
    pub fn forward(&self, ps: &ParamStore, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let r = pooled.shape()[0];
        let t = trunk(ps, &self.convs, pooled)?;
        let flat = t.reshape(&[r, t.numel() / r])?;
        Ok((self.cls.forward(ps, &flat)?, self.reg.forward(ps, &flat)?))
    }
}
