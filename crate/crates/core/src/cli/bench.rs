//! Relative backbone timing across propagation strategies.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, ConvPropKind, Placement};
use crate::config::{ExperimentConfig, PropCell};
use crate::error::Result;
use crate::nn::{Init, ParamStore, RunCtx};
use crate::tensor::Tensor;

pub const MIN_PASSES: usize = 20;
const WARMUP_PASSES: usize = 2;

/// The four settings compared: windowed only, 4 bottleneck conv blocks,
/// 4 evenly placed global blocks, all blocks global.
pub fn bench_cells() -> Vec<PropCell> {
    vec![
        PropCell::None,
        PropCell::Conv { count: 4, kind: ConvPropKind::Bottleneck },
        PropCell::Global { count: 4, placement: Placement::Evenly },
        PropCell::AllGlobal,
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub median_ms: f64,
    pub multiplier: f64,
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<20}  {:>10}  {:>10}\n", "strategy", "median_ms", "multiplier");
    for r in rows {
        s += &format!("{:<20}  {:>10.2}  {:>9.2}x\n", r.strategy, r.median_ms, r.multiplier);
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median backbone forward time per cell over `passes` interleaved rounds
/// (each round times every cell once), relative to the first cell.
pub fn run_bench(cfg: &ExperimentConfig, cells: &[PropCell], passes: usize) -> Result<Vec<BenchRow>> {
    let passes = passes.max(MIN_PASSES);
    let mut models = Vec::with_capacity(cells.len());
    for cell in cells {
        let bcfg = cell.apply(&cfg.backbone);
        bcfg.validate()?;
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&bcfg, &mut ps, &mut Init::new(0))?;
        models.push((bb, ps));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (h, w) = (cfg.data.height, cfg.data.width);
    let image = Tensor::new((0..3 * h * w).map(|_| rng.random::<f64>()).collect(), &[1, 3, h, w])?;
    let mut times = vec![Vec::with_capacity(passes); cells.len()];
    for round in 0..WARMUP_PASSES + passes {
        for (k, (bb, ps)) in models.iter().enumerate() {
            let t0 = Instant::now();
            let out = bb.forward(ps, &image, &mut RunCtx::eval())?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            if round >= WARMUP_PASSES {
                times[k].push(dt);
            }
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    Ok(cells
        .iter()
        .zip(&medians)
        .map(|(c, &m)| BenchRow { strategy: c.to_string(), median_ms: m, multiplier: m / medians[0] })
        .collect())
}
