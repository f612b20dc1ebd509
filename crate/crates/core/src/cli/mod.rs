//! The `plaindet` command line.

pub mod ablate;
pub mod bench;
pub mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::data::write_snapshot;
use crate::detect::CocoResult;
use crate::error::{Error, Result};
use crate::train::{build_detector, predict, train_loop, CHECKPOINT_FILE};

pub use ablate::{run_ablation, AblationReport, AblationRow};
pub use bench::{bench_cells, bench_table, run_bench, BenchRow};
pub use gradcheck::{run_gradcheck, GradOptions, GradReport};

#[derive(Debug, Parser)]
#[command(name = "plaindet", version, about = "Plain-ViT detector: train, evaluate, ablate, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes checkpoint.bin, trace.csv and trace.jsonl.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Train every cell of the config's [grid] and tabulate AP deltas.
    Ablate(RunArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradArgs),
    /// Time backbone forward passes per propagation strategy.
    Bench(BenchArgs),
    /// Write the configured synthetic train/val splits as snapshots.
    GenData(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override: train.seed for train, data.seed for gen-data.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose [data] section selects the evaluation split; the
    /// checkpoint's own snapshot is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for metrics.json and detections.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    /// Model config; the built-in tiny model when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-op relative-error threshold.
    #[arg(long, default_value_t = gradcheck::DEFAULT_OP_TOL)]
    pub tol: f64,
    /// End-to-end relative-error threshold.
    #[arg(long, default_value_t = gradcheck::DEFAULT_E2E_TOL)]
    pub e2e_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt every backward pass by 1 % to exercise the failure path.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
    /// Directory for gradcheck.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Timed rounds (at least 20).
    #[arg(long, default_value_t = bench::MIN_PASSES)]
    pub passes: usize,
    /// Directory for bench.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(flag: Option<&Path>, cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None if !cfg.output.dir.is_empty() => PathBuf::from(&cfg.output.dir),
        None => PathBuf::from(fallback),
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(a.out.as_deref(), &cfg, "runs/train");
    let (train, val) = cfg.data.load_splits()?;
    write(&dir.join("config.ini"), cfg.to_ini())?;
    let out = train_loop(&cfg, &train, &val, Some(&dir), |row| {
        println!("epoch {:>3}  loss {:.4}  AP {:.1}  AP50 {:.1}", row.epoch, row.loss_rpn_cls + row.loss_rpn_box + row.loss_cls + row.loss_box, 100.0 * row.ap, 100.0 * row.ap50);
    })?;
    let last = out.trace.last().expect("at least one epoch");
    println!("wrote {}  final AP {:.1}", dir.join(CHECKPOINT_FILE).display(), 100.0 * last.ap);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model_cfg = ck.config()?;
    let data_cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.data,
        None => model_cfg.data.clone(),
    };
    let (det, mut ps) = build_detector(&model_cfg, 0)?;
    ck.apply(&mut ps)?;
    let (_, val) = data_cfg.load_splits()?;
    let dets = predict(&det, &ps, &val, model_cfg.train.batch_size)?;
    let gts: Vec<_> = val.iter().map(|s| s.gt.clone()).collect();
    let metrics = crate::data::eval_ap(&dets, &gts, det.cfg.num_classes);
    println!("AP {:.2}  AP50 {:.2}  AP75 {:.2}", 100.0 * metrics.ap, 100.0 * metrics.ap50, 100.0 * metrics.ap75);
    if let Some(dir) = &a.out {
        let cats: Vec<u64> = (1..=det.cfg.num_classes as u64).collect();
        let results: Vec<CocoResult> =
            dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(|x| x.to_coco(i as u64 + 1, &cats)).collect::<Vec<_>>()).collect();
        write(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics).expect("metrics serialize"))?;
        write(&dir.join("detections.json"), serde_json::to_string(&results).expect("detections serialize"))?;
        write(&dir.join("metrics.csv"), format!("AP,AP50,AP75\n{},{},{}\n", metrics.ap, metrics.ap50, metrics.ap75))?;
    }
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let (Some(s), Some(g)) = (a.seed, cfg.grid.as_mut()) {
        g.seeds = vec![s];
    }
    cfg.validate()?;
    let dir = out_dir(a.out.as_deref(), &cfg, "runs/ablate");
    let (train, val) = cfg.data.load_splits()?;
    let report = run_ablation(&cfg, &train, &val, Some(&dir), |row, seed, res| match res {
        Ok(ap) => println!("{row} seed {seed}: AP {:.1}", 100.0 * ap),
        Err(e) => println!("{row} seed {seed}: failed: {e}"),
    })?;
    print!("{}", report.text());
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: &GradArgs) -> Result<bool> {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::tiny(),
    };
    let opts = GradOptions { op_tol: a.tol, e2e_tol: a.e2e_tol, corrupt_backward: a.corrupt_backward, seed: a.seed };
    let report = run_gradcheck(&cfg, opts)?;
    print!("{}", report.table());
    println!("max rel err: per-op {:.3e}, end-to-end {:.3e}", report.max_op_err(), report.max_e2e_err());
    if let Some(dir) = &a.out {
        write(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report.pass())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let rows = run_bench(&cfg, &bench_cells(), a.passes)?;
    print!("{}", bench_table(&rows));
    if let Some(dir) = &a.out {
        let mut csv = String::from("strategy,median_ms,multiplier\n");
        for r in &rows {
            csv += &format!("{},{},{}\n", r.strategy, r.median_ms, r.multiplier);
        }
        write(&dir.join("bench.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gen_data(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data.source = crate::config::DataSource::Synth;
    cfg.validate()?;
    let dir = out_dir(a.out.as_deref(), &cfg, "data");
    let (train, val) = cfg.data.load_splits()?;
    write_snapshot(&dir.join("train"), &train)?;
    write_snapshot(&dir.join("val"), &val)?;
    println!("wrote {} train and {} val images under {}", train.len(), val.len(), dir.display());
    Ok(())
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
    };
    match res {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Io { .. } => 2,
                _ => 1,
            }
        }
    }
}
