//! Seeded synthetic shape scenes on value-noise backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::detect::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["rect", "disc", "tri"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Object side range in pixels, sampled log-uniformly.
    pub size_min: f64,
    pub size_max: f64,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_images: 100, height: 128, width: 128, size_min: 8.0, size_max: 64.0, max_objects: 4 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_min < 2.0 || self.size_max < self.size_min {
            return Err(Error::Config(format!(
                "data.size_min ({}) must be >= 2 and not exceed data.size_max ({})",
                self.size_min, self.size_max
            )));
        }
        if self.size_max > self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "data.size_max ({}) exceeds the image side ({})",
                self.size_max,
                self.height.min(self.width)
            )));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("data.max_objects must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth random texture: bilinear interpolation of a coarse random lattice.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Pixel-centre membership test for each shape class inside its placement box.
fn covers(class: usize, b: &BBox, px: f64, py: f64) -> bool {
    let (cx, cy) = b.center();
    let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
    match class {
        0 => px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2,
        1 => ((px - cx) / hw).powi(2) + ((py - cy) / hh).powi(2) <= 1.0,
        _ => {
            // Apex at the top centre, base along the bottom edge.
            if py < b.y1 || py >= b.y2 {
                return false;
            }
            let t = (py - b.y1) / b.height();
            (px - cx).abs() <= t * hw
        }
    }
}

fn render_one(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; 3 * h * w];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.55));
    for (c, b) in base.iter().enumerate() {
        let coarse = value_noise(rng, h, w, 16);
        let fine = value_noise(rng, h, w, 4);
        for i in 0..h * w {
            img[c * h * w + i] = (b + 0.25 * (coarse[i] - 0.5) + 0.1 * (fine[i] - 0.5)).clamp(0.0, 1.0);
        }
    }
    let n_obj = rng.random_range(1..=cfg.max_objects);
    let (lo, hi) = (cfg.size_min.ln(), cfg.size_max.ln());
    let mut placed: Vec<BBox> = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..n_obj {
        for _attempt in 0..20 {
            let class = rng.random_range(0..CLASS_NAMES.len());
            let side = rng.random_range(lo..=hi).exp();
            let aspect: f64 = if class == 1 { 1.0 } else { rng.random_range(0.67..1.5) };
            let (bw, bh) = ((side * aspect.sqrt()).min(w as f64), (side / aspect.sqrt()).min(h as f64));
            let x1 = rng.random_range(0.0..=(w as f64 - bw));
            let y1 = rng.random_range(0.0..=(h as f64 - bh));
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if placed.iter().any(|p| iou(p, &b) > 0.0) {
                continue;
            }
            let color: [f64; 3] = std::array::from_fn(|c| {
                let v: f64 = rng.random();
                if (v - base[c]).abs() < 0.25 {
                    (base[c] + 0.5).min(1.0)
                } else {
                    v
                }
            });
            let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
            let (ys, ye) = (b.y1.floor() as usize, (b.y2.ceil() as usize).min(h));
            let (xs, xe) = (b.x1.floor() as usize, (b.x2.ceil() as usize).min(w));
            for y in ys..ye {
                for x in xs..xe {
                    if covers(class, &b, x as f64 + 0.5, y as f64 + 0.5) {
                        for (c, col) in color.iter().enumerate() {
                            img[c * h * w + y * w + x] = *col;
                        }
                        minx = minx.min(x);
                        miny = miny.min(y);
                        maxx = maxx.max(x);
                        maxy = maxy.max(y);
                    }
                }
            }
            if minx == usize::MAX {
                continue;
            }
            let tight = BBox::new(minx as f64, miny as f64, (maxx + 1) as f64, (maxy + 1) as f64);
            placed.push(b);
            gt.push((tight, class));
            break;
        }
    }
    Sample { image: Tensor::raw(img, vec![3, h, w]), gt }
}

/// `n_images` scenes; bit-identical for equal seeds.
pub fn synth_dataset(seed: u64, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.n_images).map(|_| render_one(&mut rng, cfg)).collect())
}
