//! Command-line driver: simulate datasets, run the estimator, evaluate
//! trajectories, and reproduce the three-mode comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use quadvio::dataset::{
    read_dataset_file, read_trajectory_file, write_dataset_file, write_trajectory_file,
};
use quadvio::estimator::{run_estimator, EstimatorMode, EstimatorOutput, WindowConfig};
use quadvio::eval::{trajectory_error, AlignMode, TrajectoryErrorReport};
use quadvio::parallel::{map_ordered, Threading};
use quadvio::sim::{simulate, GaitConfig, PathKind, WobblePreset};

#[derive(Parser)]
#[command(
    name = "quadvio",
    about = "Quadruped visual-inertial odometry with adaptive leg kinematic constraints",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gait dataset.
    Simulate(SimulateArgs),
    /// Run one estimator mode over a dataset and write the trajectory.
    Estimate(EstimateArgs),
    /// Compare an estimated trajectory against the dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Run all three estimator modes over paths, presets, and seeds.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Gait config file (key = value) applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; the dataset is written as dataset.ds.
    #[arg(long)]
    output: PathBuf,
    /// Path shape.
    #[arg(long, value_parser = parse_path)]
    path: Option<PathKind>,
    /// Walking-motion preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<WobblePreset>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory; writes estimate.txt and estimate_diagnostics.csv.
    #[arg(long)]
    output: PathBuf,
    /// Estimator mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EstimatorMode>,
    /// Estimator config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset file providing the ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Estimated trajectory file (EST records).
    #[arg(long)]
    estimate: PathBuf,
    /// Output directory; writes report.txt, error_series.csv,
    /// distance_bins.csv.
    #[arg(long)]
    output: PathBuf,
    /// Alignment used before computing errors.
    #[arg(long, value_parser = parse_align, default_value = "se3")]
    align: AlignMode,
}

#[derive(Args)]
struct CompareArgs {
    /// Output directory; writes compare_summary.{txt,csv} and
    /// compare_cells.csv.
    #[arg(long)]
    output: PathBuf,
    /// Seed range `start..end` (end exclusive).
    #[arg(long)]
    seeds: Option<String>,
    /// Single seed (alternative to --seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one path (default: all three).
    #[arg(long, value_parser = parse_path)]
    path: Option<PathKind>,
    /// Restrict to one preset (default: both).
    #[arg(long, value_parser = parse_preset)]
    preset: Option<WobblePreset>,
    /// Gait config overrides applied to every generated dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Alignment used for the error metric.
    #[arg(long, value_parser = parse_align, default_value = "se3")]
    align: AlignMode,
    /// Estimator config applied to every run.
    #[arg(long)]
    estimator_config: Option<PathBuf>,
}

fn parse_path(s: &str) -> Result<PathKind, String> {
    PathKind::from_name(s).ok_or_else(|| format!("expected square | circle | figure8, got '{s}'"))
}

fn parse_preset(s: &str) -> Result<WobblePreset, String> {
    WobblePreset::from_name(s).ok_or_else(|| format!("expected smooth | aggressive, got '{s}'"))
}

fn parse_mode(s: &str) -> Result<EstimatorMode, String> {
    EstimatorMode::from_name(s)
        .ok_or_else(|| format!("expected vio | vio-leg-fixed | walk-vio, got '{s}'"))
}

fn parse_align(s: &str) -> Result<AlignMode, String> {
    AlignMode::from_name(s).ok_or_else(|| format!("expected se3 | posyaw, got '{s}'"))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn build_gait_config(
    path: Option<PathKind>,
    preset: Option<WobblePreset>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<GaitConfig> {
    let mut cfg = GaitConfig::preset(
        path.unwrap_or(PathKind::Circle),
        preset.unwrap_or(WobblePreset::Smooth),
        seed.unwrap_or(0),
    );
    if let Some(file) = config {
        let text = fs::read_to_string(file)
            .with_context(|| format!("reading gait config {}", file.display()))?;
        cfg.apply_text(&text).context("parsing gait config")?;
    }
    // explicit flags win over the config file
    if let Some(p) = path {
        cfg.path = p;
        cfg.path_scale = p.default_scale();
    }
    if let Some(pr) = preset {
        let (sway, rp) = pr.amplitudes();
        cfg.sway_amplitude = sway;
        cfg.roll_pitch_amplitude = rp;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_window_config(
    mode: Option<EstimatorMode>,
    config: Option<&Path>,
) -> Result<WindowConfig> {
    let mut wc = match config {
        Some(file) => {
            let text = fs::read_to_string(file)
                .with_context(|| format!("reading estimator config {}", file.display()))?;
            WindowConfig::from_text(&text).context("parsing estimator config")?
        }
        None => WindowConfig::default(),
    };
    if let Some(m) = mode {
        wc.mode = m;
    }
    Ok(wc)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = build_gait_config(args.path, args.preset, args.seed, args.config.as_deref())?;
    let ds = simulate(&cfg).context("simulation failed")?;
    fs::create_dir_all(&args.output)?;
    let out = args.output.join("dataset.ds");
    write_dataset_file(&ds, &out).context("writing dataset")?;
    println!(
        "wrote {} ({} frames, {} imu samples, {} observations)",
        out.display(),
        ds.cams.len(),
        ds.imu.len(),
        ds.obs.len()
    );
    Ok(())
}

fn diagnostics_csv(output: &EstimatorOutput) -> String {
    let mut s = String::from(
        "frame,timestamp,iterations,initial_cost,final_cost,gradient_norm,stop,\
         gamma_1,gamma_2,gamma_unclamped_1,gamma_unclamped_2,\
         imu_factors,leg_factors,vision_factors,window_len\n",
    );
    for r in &output.rounds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:?},{},{},{},{},{},{},{},{}",
            r.frame_index,
            r.timestamp,
            r.iterations,
            r.initial_cost,
            r.final_cost,
            r.gradient_norm,
            r.stop,
            r.gamma_eigenvalues[1],
            r.gamma_eigenvalues[2],
            r.gamma_unclamped[1],
            r.gamma_unclamped[2],
            r.num_imu_factors,
            r.num_leg_factors,
            r.num_vision_factors,
            r.window_len
        );
    }
    s
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let ds = read_dataset_file(&args.dataset)
        .with_context(|| format!("reading dataset {}", args.dataset.display()))?;
    let wc = load_window_config(args.mode, args.config.as_deref())?;
    let output = run_estimator(&ds, wc).context("estimator failed")?;
    fs::create_dir_all(&args.output)?;
    let est_path = args.output.join("estimate.txt");
    write_trajectory_file(&output.trajectory(), "EST", &est_path)?;
    fs::write(args.output.join("estimate_diagnostics.csv"), diagnostics_csv(&output))?;
    println!("wrote {} ({} poses)", est_path.display(), output.estimates.len());
    Ok(())
}

fn report_text(report: &TrajectoryErrorReport) -> String {
    let mut s = String::new();
    let q = report.alignment.rotation;
    let t = report.alignment.translation;
    let _ = writeln!(s, "rmse = {}", report.rmse);
    let _ = writeln!(s, "max_error = {}", report.max_error);
    let _ = writeln!(s, "matched_samples = {}", report.errors.len());
    let _ = writeln!(s, "align_mode = {}", report.align_mode.name());
    let _ = writeln!(s, "alignment_rotation = {} {} {} {}", q.w, q.x, q.y, q.z);
    let _ = writeln!(s, "alignment_translation = {} {} {}", t.x, t.y, t.z);
    s
}

fn write_report(dir: &Path, report: &TrajectoryErrorReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), report_text(report))?;
    let mut series = String::from("timestamp,error\n");
    for (t, e) in &report.errors {
        let _ = writeln!(series, "{t},{e}");
    }
    fs::write(dir.join("error_series.csv"), series)?;
    let mut bins = String::from(
        "distance_start,distance_end,count,q1,median,q3,whisker_low,whisker_high\n",
    );
    for b in &report.distance_bins {
        let _ = writeln!(
            bins,
            "{},{},{},{},{},{},{},{}",
            b.distance_start, b.distance_end, b.count, b.q1, b.median, b.q3,
            b.whisker_low, b.whisker_high
        );
    }
    fs::write(dir.join("distance_bins.csv"), bins)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ds = read_dataset_file(&args.dataset)
        .with_context(|| format!("reading dataset {}", args.dataset.display()))?;
    let est = read_trajectory_file(&args.estimate, "EST")
        .with_context(|| format!("reading estimate {}", args.estimate.display()))?;
    let report = trajectory_error(&est, &ds.gt, args.align, 10).context("evaluation failed")?;
    write_report(&args.output, &report)?;
    println!(
        "rmse = {:.6} m, max = {:.6} m over {} samples",
        report.rmse,
        report.max_error,
        report.errors.len()
    );
    Ok(())
}

const ALL_MODES: [EstimatorMode; 3] =
    [EstimatorMode::Vio, EstimatorMode::VioLegFixed, EstimatorMode::WalkVio];

fn parse_seed_range(args: &CompareArgs) -> Result<Vec<u64>> {
    if let Some(range) = &args.seeds {
        let Some((a, b)) = range.split_once("..") else {
            bail!("--seeds expects start..end, got '{range}'");
        };
        let start: u64 = a.trim().parse().context("seed range start")?;
        let end: u64 = b.trim().parse().context("seed range end")?;
        if end <= start {
            bail!("empty seed range {range}");
        }
        Ok((start..end).collect())
    } else {
        Ok(vec![args.seed.unwrap_or(0)])
    }
}

struct CompareCell {
    path: PathKind,
    preset: WobblePreset,
    seed: u64,
    /// (rmse, max_error) per mode, [vio, vio-leg-fixed, walk-vio].
    results: Vec<(f64, f64)>,
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let seeds = parse_seed_range(&args)?;
    let paths: Vec<PathKind> = match args.path {
        Some(p) => vec![p],
        None => vec![PathKind::Square, PathKind::Circle, PathKind::Figure8],
    };
    let presets: Vec<WobblePreset> = match args.preset {
        Some(p) => vec![p],
        None => vec![WobblePreset::Smooth, WobblePreset::Aggressive],
    };
    let wc = load_window_config(None, args.estimator_config.as_deref())?;

    let mut jobs = Vec::new();
    for &path in &paths {
        for &preset in &presets {
            for &seed in &seeds {
                jobs.push((path, preset, seed));
            }
        }
    }

    let config_file = args.config.as_deref();
    let align = args.align;
    let cells: Vec<Result<CompareCell>> = map_ordered(Threading::default(), &jobs, |job| {
        let (path, preset, seed) = *job;
        let cfg = build_gait_config(Some(path), Some(preset), Some(seed), config_file)?;
        let ds = simulate(&cfg)?;
        let mut results = Vec::with_capacity(3);
        for mode in ALL_MODES {
            let mut mode_wc = wc.clone();
            mode_wc.mode = mode;
            let out = run_estimator(&ds, mode_wc)?;
            let report = trajectory_error(&out.trajectory(), &ds.gt, align, 10)?;
            results.push((report.rmse, report.max_error));
        }
        Ok(CompareCell { path, preset, seed, results })
    });
    let cells: Vec<CompareCell> = cells.into_iter().collect::<Result<_>>()?;

    fs::create_dir_all(&args.output)?;
    let mut cells_csv =
        String::from("path,preset,seed,mode,rmse,max_error\n");
    for c in &cells {
        for (mode, (rmse, max)) in ALL_MODES.iter().zip(c.results.iter()) {
            let _ = writeln!(
                cells_csv,
                "{},{},{},{},{},{}",
                c.path.name(),
                c.preset.name(),
                c.seed,
                mode.name(),
                rmse,
                max
            );
        }
    }
    fs::write(args.output.join("compare_cells.csv"), cells_csv)?;

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.len() % 2 == 1 { v[v.len() / 2] } else { 0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2]) }
    };

    let mut summary_csv = String::from(
        "path,preset,vio_rmse,vio_max,vio_leg_fixed_rmse,vio_leg_fixed_max,\
         walk_vio_rmse,walk_vio_max\n",
    );
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<22} {:>12} {:>12} {:>16} {:>12} {:>12} {:>12}",
        "path + preset", "vio rmse", "vio max", "leg-fixed rmse", "leg-fixed max",
        "walk-vio rmse", "walk-vio max"
    );
    for &path in &paths {
        for &preset in &presets {
            let group: Vec<&CompareCell> = cells
                .iter()
                .filter(|c| c.path == path && c.preset == preset)
                .collect();
            if group.is_empty() {
                continue;
            }
            let stat = |mode_idx: usize, max: bool| {
                median(
                    group
                        .iter()
                        .map(|c| if max { c.results[mode_idx].1 } else { c.results[mode_idx].0 })
                        .collect(),
                )
            };
            let row = [
                stat(0, false), stat(0, true),
                stat(1, false), stat(1, true),
                stat(2, false), stat(2, true),
            ];
            let _ = writeln!(
                summary_csv,
                "{},{},{},{},{},{},{},{}",
                path.name(), preset.name(), row[0], row[1], row[2], row[3], row[4], row[5]
            );
            let _ = writeln!(
                table,
                "{:<22} {:>12.4} {:>12.4} {:>16.4} {:>12.4} {:>12.4} {:>12.4}",
                format!("{} + {}", path.name(), preset.name()),
                row[0], row[1], row[2], row[3], row[4], row[5]
            );
        }
    }
    fs::write(args.output.join("compare_summary.csv"), summary_csv)?;
    fs::write(args.output.join("compare_summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}
