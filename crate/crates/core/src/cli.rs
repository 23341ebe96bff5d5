//! `elastic-attn` command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    head_activation_heatmap, progressive_sparsify, retrieval_score, similarity_report, write_heatmap_csv,
    write_scores_csv, write_sparsify_csv, Centering,
};
use crate::attention::{serial_dispatch, unified_dispatch, AttnMode, DispatchStats};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, Routing};
use crate::gradsuite::run_suite;
use crate::pipeline::{check_model, eval_batches, probe_batch, run_pretrain, run_router};
use crate::rng::{stream, uniform_tensor};

#[derive(Debug, Parser)]
#[command(name = "elastic-attn", version, about = "Elastic per-head attention routing on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory or manifest.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoutingArg {
    /// The checkpoint's router if it has one, else all heads full.
    Auto,
    Full,
    Sparse,
    Router,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Heatmap,
    Retrieval,
    Sparsify,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CenteringArg {
    None,
    UnionMean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the backbone under full attention.
    Pretrain(Common),
    /// Train the router; pretrains first unless --checkpoint is given.
    TrainRouter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy and sparsity per task.
    Eval {
        #[command(flatten)]
        ckpt: WithCheckpoint,
        #[arg(long, value_enum, default_value = "auto")]
        routing: RoutingArg,
    },
    /// Export one analysis table.
    Analyze {
        #[arg(value_enum)]
        which: Analysis,
        #[command(flatten)]
        ckpt: WithCheckpoint,
        /// Layer used by the similarity analysis.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value = "none")]
        centering: CenteringArg,
    },
    /// Finite-difference checks of every registered gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Serial vs unified head dispatch on random assignments.
    BenchDispatch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The checkpoint plus the config to run with: the explicit one if given,
/// otherwise the one stored in the checkpoint.
fn load_checkpoint(c: &WithCheckpoint) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let mut cfg = match &c.common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => ckpt.config.clone(),
    };
    if let Some(s) = c.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    check_model(&cfg, &ckpt)?;
    Ok((cfg, ckpt))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(dir.join(name))
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let t = Instant::now();
    let (_, report) = run_pretrain(&cfg, &c.out)?;
    println!(
        "pretrained {} steps in {:.1}s: needle {:.3}, local {:.3}",
        report.steps,
        t.elapsed().as_secs_f64(),
        report.needle_accuracy,
        report.local_accuracy
    );
    println!("wrote {}", c.out.display());
    Ok(())
}

fn cmd_train_router(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let t = Instant::now();
    let backbone = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            check_model(&cfg, &ckpt)?;
            ckpt.backbone
        }
        None => {
            let (b, report) = run_pretrain(&cfg, &c.out)?;
            println!("pretrained {} steps", report.steps);
            b
        }
    };
    let run = run_router(&cfg, &backbone, &c.out)?;
    let last = run.records.len().saturating_sub(crate::tasks::TaskKind::ALL.len());
    for r in &run.records[last..] {
        println!(
            "{}: msr {:.3}, lm {:.4}, lambda ({:.3}, {:.3})",
            r.task_id, r.msr, r.lm_loss, r.lambda1, r.lambda2
        );
    }
    println!("{} steps in {:.1}s, checkpoint {}", run.state.step, t.elapsed().as_secs_f64(), run.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    task_id: &'a str,
    accuracy: f64,
    correct: usize,
    total: usize,
    msr: f64,
    esr: f64,
}

fn cmd_eval(c: &WithCheckpoint, routing: RoutingArg) -> Result<()> {
    let (cfg, ckpt) = load_checkpoint(c)?;
    let m = &cfg.model;
    let uniform = |mode| vec![vec![mode; m.heads]; m.layers];
    let (full, sparse) = (uniform(AttnMode::Full), uniform(AttnMode::Sparse));
    let routing = match (routing, &ckpt.router) {
        (RoutingArg::Full, _) | (RoutingArg::Auto, None) => Routing::Fixed(&full),
        (RoutingArg::Sparse, _) => Routing::Fixed(&sparse),
        (RoutingArg::Router | RoutingArg::Auto, Some(r)) => Routing::Router(r),
        (RoutingArg::Router, None) => return Err(no_router(&c.checkpoint)),
    };
    let results = eval_batches(&cfg)?
        .iter()
        .map(|b| evaluate(&ckpt.backbone, &cfg, b, &routing))
        .collect::<Result<Vec<EvalResult>>>()?;
    let summary: Vec<EvalSummary> = results
        .iter()
        .map(|r| EvalSummary {
            task_id: &r.task_id,
            accuracy: r.accuracy,
            correct: r.correct,
            total: r.total,
            msr: r.msr,
            esr: r.esr,
        })
        .collect();
    let path = write_json(&c.common.out, "eval.json", &summary)?;
    for r in &summary {
        println!("{}: accuracy {:.3}, msr {:.3}, esr {:.3}", r.task_id, r.accuracy, r.msr, r.esr);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn no_router(path: &Path) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: "checkpoint has no router".into(),
    }
}

fn cmd_analyze(c: &WithCheckpoint, which: Analysis, layer: usize, centering: CenteringArg) -> Result<()> {
    let (cfg, ckpt) = load_checkpoint(c)?;
    let out = &c.common.out;
    let router = || ckpt.router.as_ref().ok_or_else(|| no_router(&c.checkpoint));
    let path = match which {
        Analysis::Retrieval => {
            let table = retrieval_score(&ckpt.backbone, &cfg, &probe_batch(&cfg)?)?;
            for s in &table.scores {
                println!("layer {} head {}: score {:.4}, rank {}", s.layer, s.head, s.score, s.rank);
            }
            let mut w = create(out, "retrieval.csv")?;
            write_scores_csv(&mut w, &table)?;
            w.flush()?;
            out.join("retrieval.csv")
        }
        Analysis::Sparsify => {
            let table = retrieval_score(&ckpt.backbone, &cfg, &probe_batch(&cfg)?)?;
            let points = progressive_sparsify(&ckpt.backbone, &cfg, &table, &cfg.eval.msr_grid, &eval_batches(&cfg)?)?;
            for p in &points {
                println!("msr {:.3} {}: accuracy {:.3} ({:.3} of full)", p.omega_msr, p.task_id, p.accuracy, p.relative);
            }
            let mut w = create(out, "sparsify.csv")?;
            write_sparsify_csv(&mut w, &points)?;
            w.flush()?;
            out.join("sparsify.csv")
        }
        Analysis::Heatmap => {
            let map = head_activation_heatmap(&ckpt.backbone, router()?, &cfg, &eval_batches(&cfg)?)?;
            for (l, row) in map.consistency.iter().enumerate() {
                println!("layer {l}: {row:?}");
            }
            let mut w = create(out, "heatmap.csv")?;
            write_heatmap_csv(&mut w, &map)?;
            w.flush()?;
            write_json(out, "heatmap.json", &map)?;
            out.join("heatmap.csv")
        }
        Analysis::Similarity => {
            let centering = match centering {
                CenteringArg::None => Centering::None,
                CenteringArg::UnionMean => Centering::UnionMean,
            };
            let report = similarity_report(&ckpt.backbone, router()?, &cfg, &eval_batches(&cfg)?, layer, centering)?;
            println!(
                "layer {layer}: mean off-diagonal |M| {:.4} before, {:.4} after the task MLP",
                report.before.mean_off_diagonal_abs(),
                report.after.mean_off_diagonal_abs()
            );
            write_json(out, "similarity.json", &report)?
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(c: &Common, seeds: usize) -> Result<()> {
    load_config(c)?;
    let t = Instant::now();
    let reports = run_suite(seeds)?;
    for r in &reports {
        println!(
            "{:<20} {} max rel err {:.2e} (tol {:.0e})",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.tolerance
        );
    }
    let path = write_json(&c.out, "gradcheck.json", &reports)?;
    println!("{} checks x {seeds} seeds in {:.1}s, wrote {}", reports.len(), t.elapsed().as_secs_f64(), path.display());
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub trials: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub d_head: usize,
    pub identical: bool,
    pub serial_seconds: f64,
    pub unified_seconds: f64,
    pub serial: DispatchStats,
    pub unified: DispatchStats,
}

/// Runs both dispatch paths on the same random inputs and head modes.
pub fn bench_dispatch(cfg: &RunConfig, trials: usize) -> Result<BenchReport> {
    let m = &cfg.model;
    let (s, width) = (m.seq_len, m.d_model());
    let pattern = cfg.pattern.pattern();
    let mut report = BenchReport {
        trials,
        seq_len: s,
        heads: m.heads,
        d_head: m.d_head,
        identical: true,
        serial_seconds: 0.0,
        unified_seconds: 0.0,
        serial: DispatchStats::default(),
        unified: DispatchStats::default(),
    };
    for i in 0..trials as u64 {
        let [q, k, v] = [0, 1, 2].map(|j| uniform_tensor(&mut stream(cfg.seed, "bench/qkv", 3 * i + j), &[s, width], -2.0, 2.0));
        let mut rng = stream(cfg.seed, "bench/modes", i);
        let modes: Vec<AttnMode> = (0..m.heads)
            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { AttnMode::Sparse } else { AttnMode::Full })
            .collect();
        let t = Instant::now();
        let (a, sa) = serial_dispatch(&q, &k, &v, m.heads, &modes, &pattern)?;
        report.serial_seconds += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (b, sb) = unified_dispatch(&q, &k, &v, m.heads, &modes, &pattern)?;
        report.unified_seconds += t.elapsed().as_secs_f64();
        report.identical &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        for (acc, st) in [(&mut report.serial, sa), (&mut report.unified, sb)] {
            acc.allocations += st.allocations;
            acc.floats_allocated += st.floats_allocated;
        }
    }
    Ok(report)
}

fn cmd_bench_dispatch(c: &Common, trials: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let r = bench_dispatch(&cfg, trials)?;
    println!(
        "serial: {:.3}s, {} allocations ({} floats)",
        r.serial_seconds, r.serial.allocations, r.serial.floats_allocated
    );
    println!(
        "unified: {:.3}s, {} allocations ({} floats)",
        r.unified_seconds, r.unified.allocations, r.unified.floats_allocated
    );
    println!("outputs bit-identical: {}", r.identical);
    let path = write_json(&c.out, "bench_dispatch.json", &r)?;
    println!("wrote {}", path.display());
    if r.identical {
        Ok(())
    } else {
        Err(Error::CheckFailed("serial and unified dispatch outputs differ".into()))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::TrainRouter { common, checkpoint } => cmd_train_router(&common, checkpoint.as_deref()),
        Command::Eval { ckpt, routing } => cmd_eval(&ckpt, routing),
        Command::Analyze {
            which,
            ckpt,
            layer,
            centering,
        } => cmd_analyze(&ckpt, which, layer, centering),
        Command::Gradcheck { common, seeds } => cmd_gradcheck(&common, seeds),
        Command::BenchDispatch { common, trials } => cmd_bench_dispatch(&common, trials),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    match run(Cli::parse()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error ({:?}): {e}", e.category());
            e.category().exit_code()
        }
    }
}
