//! Single entrypoint: verification, benchmarking, simulation and training,
//! machine-readable output first.
//!
//! Exit codes: 0 success, 1 property failure, 2 configuration error,
//! 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_fuse::config::RunConfig;
use sparse_fuse::error::Error as CoreError;
use sparse_fuse::harness::{
    bench_recurrent, evaluate_scene, records_to_csv, run_multiframe_baseline, run_property_suite,
    train_toy, FaultInjection, Scene,
};
use sparse_fuse::model::Model;
use sparse_fuse::rng::derive_seed;
use sparse_fuse::SCHEMA_VERSION;

#[derive(Parser)]
#[command(name = "sparse-fuse", version, about = "Recurrent sparse multi-view perception harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every derived stream is a pure function of it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports, CSV, logs and weights.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-key config overrides, e.g. --set model.decoder.feature_dim=32
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-equivalence, gradient and geometry property suite.
    Verify {
        /// Deliberately corrupt one aggregation weight to prove the suite
        /// can fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Benchmark the recurrent mode against the multi-frame baseline.
    Bench,
    /// Run scenes with the current (or loaded) weights and report metrics.
    Simulate {
        /// Load weights from a file instead of seeded initialization.
        #[arg(long)]
        weights_in: Option<PathBuf>,
    },
    /// Train the toy model and write weights, logs and metrics.
    Train {
        /// Epoch count override (full passes over the scene set).
        #[arg(long)]
        epochs: Option<usize>,
        /// Step-count cap override (one step per frame).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        weights_in: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("SPARSE_FUSE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SPARSE_FUSE_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<CoreError>() {
                Some(CoreError::InvalidConfig(_)) => 2,
                Some(CoreError::Divergence(_)) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(
        common.config.as_deref(),
        common.seed,
        &common.overrides,
    )?)
}

fn build_scenes(cfg: &RunConfig) -> anyhow::Result<Vec<Scene>> {
    (0..cfg.scenes)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &format!("scene-{i}"));
            Ok(Scene::generate(&cfg.scene, cfg.model.channels, seed)?)
        })
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    std::fs::create_dir_all(&cli.common.out)?;
    match &cli.command {
        Command::Verify { inject_fault } => cmd_verify(&cli.common, &cfg, *inject_fault),
        Command::Bench => cmd_bench(&cli.common, &cfg),
        Command::Simulate { weights_in } => cmd_simulate(&cli.common, &cfg, weights_in.as_deref()),
        Command::Train { epochs, steps, weights_in } => {
            cmd_train(&cli.common, &cfg, *epochs, *steps, weights_in.as_deref())
        }
    }
}

fn cmd_verify(common: &Common, cfg: &RunConfig, inject_fault: bool) -> anyhow::Result<ExitCode> {
    let fault = inject_fault.then_some(FaultInjection::PerturbAggregationWeight);
    let results = run_property_suite(cfg.seed, fault);
    let all_pass = results.iter().all(|r| r.pass);
    println!("{:<28} {:<6} detail", "property", "state");
    for r in &results {
        println!("{:<28} {:<6} {}", r.name, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        if let Some(case) = &r.failing_case {
            let path = common.out.join(format!("verify_failing_{}.json", r.name));
            write_json(&path, case)?;
            eprintln!("  failing case written to {}", path.display());
        }
    }
    let report = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "fault_injected": inject_fault,
        "results": results,
        "all_pass": all_pass,
    });
    write_json(&common.out.join("verify_report.json"), &report)?;
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Least-squares fit `y = a*x + b`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return (0.0, sy / n);
    }
    let a = (n * sxy - sx * sy) / denom;
    (a, (sy - a * sx) / n)
}

fn cmd_bench(common: &Common, cfg: &RunConfig) -> anyhow::Result<ExitCode> {
    let model = Model::new(cfg.model.clone())?;
    let scene_seed = derive_seed(cfg.seed, "bench-scene");
    let scene = Scene::generate(&cfg.scene, cfg.model.channels, scene_seed)?;
    let frames = cfg.bench.frames.min(scene.frames());

    let mut all_records = Vec::new();
    let rec_report = bench_recurrent(&model, &scene, frames, cfg.bench.repeats)?;
    all_records.extend(rec_report.records.clone());
    let mut summaries = vec![serde_json::to_value(&rec_report)?];
    for &t in &cfg.bench.t_list {
        let rep = run_multiframe_baseline(&model, &scene, t, frames, cfg.bench.repeats)?;
        all_records.extend(rep.records.clone());
        summaries.push(serde_json::to_value(&rep)?);
    }

    let csv = records_to_csv(&all_records);
    std::fs::write(common.out.join("bench.csv"), &csv)?;

    // linear-in-T claim: steady-state aggregation calls per frame vs T
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &t in &cfg.bench.t_list {
        if let Some(r) = all_records
            .iter()
            .find(|r| r.mode == "multiframe" && r.t_window == t && r.frame + 1 == frames)
        {
            xs.push(t as f64);
            ys.push(r.agg_calls as f64);
        }
    }
    let (slope, intercept) = linear_fit(&xs, &ys);
    let layers = cfg.model.decoder.num_single_frame_layers + cfg.model.decoder.num_multi_frame_layers;
    let expected_slope = (layers * cfg.model.decoder.total_instances) as f64;
    println!(
        "multiframe agg_calls vs T: slope {slope:.1} (expected {expected_slope:.1}), intercept {intercept:.1}"
    );

    // constant-in-t claim: recurrent per-frame dispersion after warm-up
    let rec_walls: Vec<f64> = rec_report.records.iter().skip(1).map(|r| r.wall_ns as f64).collect();
    let rec_calls: Vec<u64> = rec_report.records.iter().skip(1).map(|r| r.agg_calls).collect();
    let mean = rec_walls.iter().sum::<f64>() / rec_walls.len().max(1) as f64;
    let var = rec_walls.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
        / rec_walls.len().max(1) as f64;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    let calls_constant = rec_calls.windows(2).all(|w| w[0] == w[1]);
    println!(
        "recurrent per-frame wall time: mean {:.3} ms, cv {:.3}; agg_calls constant: {}",
        mean / 1e6,
        cv,
        calls_constant
    );

    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "frames": frames,
        "t_list": cfg.bench.t_list,
        "call_slope": slope,
        "call_intercept": intercept,
        "expected_slope": expected_slope,
        "recurrent_wall_cv": cv,
        "recurrent_calls_constant": calls_constant,
        "runs": summaries,
    });
    write_json(&common.out.join("bench_summary.json"), &summary)?;
    println!("bench records: {} rows -> {}", all_records.len(), common.out.join("bench.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(common: &Common, cfg: &RunConfig, weights_in: Option<&Path>) -> anyhow::Result<ExitCode> {
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(path) = weights_in {
        model.store.load(path)?;
    }
    let scenes = build_scenes(cfg)?;
    use rayon::prelude::*;
    let metrics: Vec<_> = scenes
        .par_iter()
        .map(|scene| evaluate_scene(&model, scene, cfg.train.ablate_temporal))
        .collect::<Result<Vec<_>, _>>()?;
    let recall_mean = metrics.iter().map(|m| m.recall).sum::<f64>() / metrics.len().max(1) as f64;
    for (i, m) in metrics.iter().enumerate() {
        println!(
            "scene {i}: recall {:.3}, center_mae {:?}, velocity_mae {:?}",
            m.recall, m.center_mae, m.velocity_mae
        );
    }
    let report = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "scenes": metrics.len(),
        "recall_mean": recall_mean,
        "per_scene": metrics,
    });
    write_json(&common.out.join("metrics.json"), &report)?;
    println!("metrics -> {}", common.out.join("metrics.json").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    common: &Common,
    cfg: &RunConfig,
    epochs: Option<usize>,
    steps: Option<usize>,
    weights_in: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let mut train_cfg = cfg.train.clone();
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if steps.is_some() {
        train_cfg.steps = steps;
    }
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(path) = weights_in {
        model.store.load(path)?;
    }
    let scenes = build_scenes(cfg)?;
    let log = train_toy(&mut model, &scenes, &train_cfg)?;

    let weights_path = common.out.join("weights.bin");
    model.store.save(&weights_path)?;

    let mut log_lines = String::new();
    for e in &log.entries {
        log_lines.push_str(&serde_json::to_string(e)?);
        log_lines.push('\n');
    }
    std::fs::write(common.out.join("train_log.jsonl"), log_lines)?;

    let metrics: Vec<_> = scenes
        .iter()
        .map(|scene| evaluate_scene(&model, scene, train_cfg.ablate_temporal))
        .collect::<Result<Vec<_>, _>>()?;
    let report = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "steps": log.entries.len(),
        "final_total_loss": log.entries.last().map(|e| e.total),
        "per_scene": metrics,
    });
    write_json(&common.out.join("train_metrics.json"), &report)?;
    if let Some(last) = log.entries.last() {
        println!(
            "trained {} steps: box {:.4}, cls {:.4}, depth {:.4}",
            last.step, last.box_l1, last.cls_loss, last.depth_loss
        );
    } else {
        println!("trained 0 steps; weights are the seeded initialization");
    }
    println!("weights -> {}", weights_path.display());
    Ok(ExitCode::SUCCESS)
}
