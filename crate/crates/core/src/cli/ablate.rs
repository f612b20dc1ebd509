//! Pyramid x propagation ablation grids.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{row_label, ExperimentConfig, GridConfig, PropCell};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::pyramid::PyramidKind;
use crate::train::{train_loop, TraceRow};

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub pyramid: PyramidKind,
    pub cell: PropCell,
    pub seeds: Vec<SeedResult>,
    /// Means over the seeds that finished; NaN when none did.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub delta_ap: f64,
    pub delta_ap50: f64,
}

impl AblationRow {
    pub fn seeds_ok(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_none()).count()
    }

    pub fn error(&self) -> Option<String> {
        let errs: Vec<String> =
            self.seeds.iter().filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed))).collect();
        (!errs.is_empty()).then(|| errs.join("; "))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// `+1.2` style difference in AP points.
fn signed_points(d: f64) -> String {
    if d.is_nan() {
        "n/a".into()
    } else {
        format!("{:+.1}", 100.0 * d)
    }
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("row,pyramid,propagation,seeds_ok,AP,AP50,AP75,dAP,dAP50,error\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.pyramid,
                r.cell,
                r.seeds_ok(),
                r.ap,
                r.ap50,
                r.ap75,
                r.delta_ap,
                r.delta_ap50,
                r.error().unwrap_or_default().replace(',', ";")
            );
        }
        s
    }

    pub fn seeds_csv(&self) -> String {
        let mut s = String::from("row,seed,AP,AP50,AP75,error\n");
        for r in &self.rows {
            for sr in &r.seeds {
                s += &format!(
                    "{},{},{},{},{},{}\n",
                    r.label,
                    sr.seed,
                    sr.ap,
                    sr.ap50,
                    sr.ap75,
                    sr.error.clone().unwrap_or_default().replace(',', ";")
                );
            }
        }
        s
    }

    /// Aligned table with AP points and `(+x.x)` deltas against the baseline.
    pub fn text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
        let mut s = format!("baseline: {}\n{:<w$}  {:>14}  {:>14}  {:>6}  seeds\n", self.baseline, "row", "AP", "AP50", "AP75");
        for r in &self.rows {
            let ap = format!("{:.1} ({})", 100.0 * r.ap, signed_points(r.delta_ap));
            let ap50 = format!("{:.1} ({})", 100.0 * r.ap50, signed_points(r.delta_ap50));
            let seeds: Vec<String> = r
                .seeds
                .iter()
                .map(|sr| match &sr.error {
                    None => format!("{:.1}", 100.0 * sr.ap),
                    Some(_) => "err".into(),
                })
                .collect();
            s += &format!("{:<w$}  {ap:>14}  {ap50:>14}  {:>6.1}  {}\n", r.label, 100.0 * r.ap75, seeds.join(" "));
        }
        for r in &self.rows {
            if let Some(e) = r.error() {
                s += &format!("{}: {e}\n", r.label);
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("ablation.csv", self.csv()), ("ablation_seeds.csv", self.seeds_csv()), ("ablation.txt", self.text())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Train every grid row once per seed. A failing run is recorded in its row
/// and the grid moves on. With `out`, each run writes its own
/// `cells/<row>/seed<k>` directory.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, u64, &Result<f64>),
) -> Result<AblationReport> {
    let grid: &GridConfig = cfg.grid.as_ref().ok_or_else(|| Error::Config("no cells: config has no [grid] section".into()))?;
    if grid.pyramids.is_empty() || grid.cells.is_empty() {
        return Err(Error::Config("no cells: grid.pyramids and grid.propagation must be non-empty".into()));
    }
    let mut rows = Vec::new();
    for (pyramid, cell) in grid.rows() {
        let label = row_label(pyramid, &cell);
        let mut seeds = Vec::new();
        for &seed in &grid.seeds {
            let mut run = cfg.clone();
            run.grid = None;
            run.pyramid.kind = pyramid;
            run.backbone = cell.apply(&cfg.backbone);
            run.train.seed = seed;
            let dir = out.map(|o| o.join("cells").join(label.replace('/', "__")).join(format!("seed{seed}")));
            let res = train_loop(&run, train, val, dir.as_deref(), |_| {});
            let sr = match res {
                Ok(o) => {
                    let last = o.trace.last().expect("at least one epoch").clone();
                    SeedResult { seed, ap: last.ap, ap50: last.ap50, ap75: last.ap75, error: None, trace: o.trace }
                }
                Err(e) => SeedResult {
                    seed,
                    ap: f64::NAN,
                    ap50: f64::NAN,
                    ap75: f64::NAN,
                    error: Some(e.to_string()),
                    trace: Vec::new(),
                },
            };
            let shown = match &sr.error {
                None => Ok(sr.ap),
                Some(e) => Err(Error::Contract(e.clone())),
            };
            progress(&label, seed, &shown);
            seeds.push(sr);
        }
        let ok = || seeds.iter().filter(|s| s.error.is_none());
        rows.push(AblationRow {
            label,
            pyramid,
            cell,
            ap: mean(ok().map(|s| s.ap)),
            ap50: mean(ok().map(|s| s.ap50)),
            ap75: mean(ok().map(|s| s.ap75)),
            seeds,
            delta_ap: f64::NAN,
            delta_ap50: f64::NAN,
        });
    }
    let baseline = if grid.baseline.is_empty() { rows[0].label.clone() } else { grid.baseline.clone() };
    let (b_ap, b_ap50) = rows.iter().find(|r| r.label == baseline).map(|r| (r.ap, r.ap50)).unwrap_or((f64::NAN, f64::NAN));
    for r in &mut rows {
        r.delta_ap = r.ap - b_ap;
        r.delta_ap50 = r.ap50 - b_ap50;
    }
    let report = AblationReport { baseline, rows };
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}
