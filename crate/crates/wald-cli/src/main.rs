//! Batch command-line front end: dataset generation, training, evaluation,
//! robustness sweeps, and plot emission. Results go to files and stdout;
//! diagnostics go to stderr; the exit code is zero iff the command
//! completed.

mod config;
mod detjson;
mod plot;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wald::detector::train::{train, TrainOptions};
use wald::detector::{load_checkpoint, save_checkpoint, DetectorModel, ModelConfig};
use wald::eval::{
    detect_dataset, directional_stats, grid_shift_set, modality_gt, mr_curve, robustness_sweep,
    score_detections, weak_aligned_bound, DirAngle, EvalFilter, EvalReport, MetricKind,
    Modality, WeakBoundReport,
};
use wald::paired::{
    generate_dataset, load_dataset, save_dataset, shift_statistics, ScenePair,
};

use config::{load_json, write_resolved, GenConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "wald",
    version,
    about = "Weakly-aligned multi-modal detection toolkit",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for data-parallel stages (overrides WALD_WORKERS;
    /// default 1 for bit-reproducible runs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic weakly-aligned dataset.
    GenData(GenDataArgs),
    /// Train a detector on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or externally supplied detections).
    Eval(EvalArgs),
    /// Shift-sweep robustness evaluation (grid surface and/or directional).
    Sweep(SweepArgs),
    /// Render plots from an evaluation report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generation config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disable the region feature alignment module.
    #[arg(long)]
    no_rfa: bool,
    /// Disable RoI jitter augmentation.
    #[arg(long)]
    no_jitter: bool,
    /// Disable confidence-aware fusion.
    #[arg(long)]
    no_caf: bool,
    /// Disable the adjacent similarity constraint.
    #[arg(long)]
    no_asc: bool,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint; optional when --detections is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mr")]
    metric: MetricKindArg,
    #[arg(long)]
    out: PathBuf,
    /// Detection confidence floor fed into the metric curves.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    /// Reasonable-filter height threshold, pixels.
    #[arg(long, default_value_t = 0.0)]
    min_height: f64,
    /// Score externally produced detections instead of a checkpoint.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Grid half-width: evaluates every integer shift in [-N, N]^2.
    #[arg(long)]
    grid: Option<i32>,
    /// Run the directional protocol (weakly-aligned bounds + per-angle
    /// mean/std table).
    #[arg(long)]
    directional: bool,
    /// Checkpoint whose degradation defines the weakly-aligned bounds
    /// (defaults to the evaluated checkpoint).
    #[arg(long)]
    bounds_checkpoint: Option<PathBuf>,
    /// Search range for the weakly-aligned bound, steps.
    #[arg(long, default_value_t = 10)]
    max_px: u32,
    #[arg(long, default_value = "mr")]
    metric: MetricKindArg,
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    min_height: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// Evaluation report JSON.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone)]
struct MetricKindArg(MetricKind);

impl std::str::FromStr for MetricKindArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(MetricKindArg)
    }
}

fn main() {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .or_else(|| std::env::var("WALD_WORKERS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args, workers),
        Command::Train(args) => cmd_train(args, workers),
        Command::Eval(args) => cmd_eval(args, workers),
        Command::Sweep(args) => cmd_sweep(args, workers),
        Command::Plot(args) => cmd_plot(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn percentish(metric: MetricKind, v: f64) -> String {
    format!("{} = {:.2}%", metric.as_str(), v * 100.0)
}

fn cmd_gen_data(args: GenDataArgs, workers: usize) -> Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => GenConfig::default(),
    };
    if let Some(n) = args.scenes {
        cfg.scenes = n;
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let params = cfg.generator_params();
    let scenes = generate_dataset(
        &params,
        cfg.scenes,
        cfg.objects_per_scene,
        cfg.master_seed,
        workers,
    )?;
    fs::create_dir_all(&args.out)?;
    save_dataset(&scenes, &args.out)?;
    write_resolved(&args.out, "gen-data", &cfg)?;

    let stats = shift_statistics(&scenes);
    let n_objects = stats.n_paired + stats.n_unpaired;
    let unpaired_pct = if n_objects > 0 {
        100.0 * stats.n_unpaired as f64 / n_objects as f64
    } else {
        0.0
    };
    println!(
        "wrote {} scenes ({} objects, {:.1}% unpaired) to {}",
        scenes.len(),
        n_objects,
        unpaired_pct,
        args.out.display()
    );
    println!(
        "shift magnitude: mode {:.1} px, mean {:.2} px, shifted fraction {:.1}%",
        stats.mode_magnitude(),
        stats.mean_magnitude,
        100.0 * stats.shifted_fraction(1.0)
    );
    Ok(())
}

fn dataset_classes(scenes: &[ScenePair]) -> Vec<String> {
    let mut classes: Vec<String> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.class_label.clone()))
        .collect();
    classes.sort();
    classes.dedup();
    classes
}

fn cmd_train(args: TrainArgs, _workers: usize) -> Result<()> {
    let cfg: TrainConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    let scenes = load_dataset(&args.data)
        .with_context(|| format!("cannot load dataset from {}", args.data.display()))?;
    if scenes.is_empty() {
        bail!("dataset {} holds no scenes", args.data.display());
    }

    let classes = cfg
        .classes
        .clone()
        .unwrap_or_else(|| dataset_classes(&scenes));
    if classes.is_empty() {
        bail!("no object classes found in the dataset or config");
    }
    let mut model_cfg = cfg.model.clone().unwrap_or_else(|| {
        let mut m = ModelConfig::small(classes.clone());
        m.input = scenes[0].extent;
        m
    });
    // auto-enable the 3-D head when the data carries 3-D ground truth
    let has_3d = scenes
        .iter()
        .any(|s| s.intrinsics.is_some() && s.objects.iter().any(|o| o.box3d.is_some()));
    if has_3d && cfg.model.is_none() {
        model_cfg.with_3d = true;
        model_cfg.sensed_scale = sensed_scale_for_depth(&scenes);
        model_cfg.class_dims = mean_class_dims(&scenes);
    }
    if args.no_rfa {
        model_cfg.rfa_enabled = false;
    }
    if args.no_caf {
        model_cfg.caf_enabled = false;
    }
    let mut opts = cfg.train.clone().unwrap_or_default();
    if args.no_jitter {
        opts.jitter_enabled = false;
    }
    if args.no_asc {
        opts.asc_enabled = false;
    }
    if let Some(seed) = args.seed {
        opts.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        opts.epochs = epochs;
    }
    let init_seed = cfg.init_seed.unwrap_or(7);

    let mut model = DetectorModel::init(model_cfg, init_seed)?;
    eprintln!(
        "training on {} scenes for {} epochs (rfa {}, jitter {}, caf {}, asc {})",
        scenes.len(),
        opts.epochs,
        model.config.rfa_enabled,
        opts.jitter_enabled,
        model.config.caf_enabled,
        opts.asc_enabled && model.config.rfa_enabled,
    );
    let log = train(&mut model, &scenes, &opts)?;

    fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let mut log_file = fs::File::create(args.out.join("train_log.jsonl"))?;
    for entry in &log.entries {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
    }
    #[derive(serde::Serialize)]
    struct ResolvedTrain<'a> {
        model: &'a ModelConfig,
        train: &'a TrainOptions,
        init_seed: u64,
        data_dir: String,
        final_loss: f64,
    }
    write_resolved(
        &args.out,
        "train",
        &ResolvedTrain {
            model: &model.config,
            train: &opts,
            init_seed,
            data_dir: args.data.display().to_string(),
            final_loss: log.final_loss,
        },
    )?;
    println!("final loss {:.4}; checkpoint at {}", log.final_loss, ckpt.display());
    Ok(())
}

fn sensed_scale_for_depth(scenes: &[ScenePair]) -> f64 {
    let max = scenes
        .iter()
        .flat_map(|s| s.sensed_image.iter().copied())
        .fold(0.0f64, f64::max);
    if max > 0.0 {
        1.0 / max
    } else {
        1.0
    }
}

fn mean_class_dims(scenes: &[ScenePair]) -> wald::box3d::ClassDims {
    let mut acc: std::collections::BTreeMap<String, ([f64; 3], usize)> = Default::default();
    for s in scenes {
        for o in &s.objects {
            if let Some(b3) = &o.box3d {
                let e = acc.entry(o.class_label.clone()).or_insert(([0.0; 3], 0));
                e.0[0] += b3.l;
                e.0[1] += b3.w;
                e.0[2] += b3.h;
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(k, (sum, n))| (k, [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]))
        .collect()
}

fn cmd_eval(args: EvalArgs, workers: usize) -> Result<()> {
    let scenes = load_dataset(&args.data)?;
    let metric = args.metric.0;
    let filter = EvalFilter { min_height: args.min_height, ..Default::default() };

    let detections = match (&args.detections, &args.checkpoint) {
        (Some(path), _) => detjson::load_detections(path, &scenes)?,
        (None, Some(ckpt)) => {
            let model = load_checkpoint(ckpt)?;
            detect_dataset(&model, &scenes, args.threshold, workers)?
        }
        (None, None) => bail!("either --checkpoint or --detections is required"),
    };

    let value = score_detections(&detections, &scenes, metric, &filter)?;
    let mut report = EvalReport::new(Some(metric), scenes.len());
    report.set_metric_value(metric, value);
    if matches!(metric, MetricKind::Mr | MetricKind::MrRef | MetricKind::MrSensed) {
        let modality = if metric == MetricKind::MrSensed {
            Modality::Sensed
        } else {
            Modality::Reference
        };
        let gts: Vec<_> = scenes.iter().map(|s| modality_gt(s, modality, &filter)).collect();
        report.mr_curve = Some(mr_curve(&detections, &gts, 0.5)?);
    }

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    #[derive(serde::Serialize)]
    struct ResolvedEval {
        metric: MetricKind,
        threshold: f64,
        min_height: f64,
        data_dir: String,
        n_scenes: usize,
    }
    write_resolved(
        &args.out,
        "eval",
        &ResolvedEval {
            metric,
            threshold: args.threshold,
            min_height: args.min_height,
            data_dir: args.data.display().to_string(),
            n_scenes: scenes.len(),
        },
    )?;
    println!("{}", percentish(metric, value));
    Ok(())
}

fn cmd_sweep(args: SweepArgs, workers: usize) -> Result<()> {
    let scenes = load_dataset(&args.data)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let metric = args.metric.0;
    let filter = EvalFilter { min_height: args.min_height, ..Default::default() };
    fs::create_dir_all(&args.out)?;

    let mut report = EvalReport::new(Some(metric), scenes.len());
    let run_grid = args.grid.is_some() || !args.directional;

    if run_grid {
        let half = args.grid.unwrap_or(6);
        let shift_set = grid_shift_set(half);
        eprintln!("sweeping {} shift patterns...", shift_set.len());
        let surface = robustness_sweep(
            &model,
            &scenes,
            &shift_set,
            metric,
            &filter,
            args.threshold,
            workers,
        )?;
        let origin = surface
            .iter()
            .find(|p| p.dx == 0 && p.dy == 0)
            .map(|p| p.value)
            .unwrap_or(f64::NAN);
        report.set_metric_value(metric, origin);
        plot::plot_surface(&surface, &args.out.join("surface.png"))?;
        report.shift_surface = Some(surface);
        println!("origin {}", percentish(metric, origin));
    }

    if args.directional {
        let bounds_model = match &args.bounds_checkpoint {
            Some(p) => load_checkpoint(p)?,
            None => model.clone(),
        };
        let mut directional = Vec::new();
        let mut weak_bounds = Vec::new();
        for angle in DirAngle::all() {
            let bounds = weak_aligned_bound(
                &bounds_model,
                &scenes,
                angle,
                args.max_px,
                metric,
                &filter,
                args.threshold,
                workers,
            )?;
            let stats = directional_stats(
                &model,
                &scenes,
                angle,
                bounds,
                metric,
                &filter,
                args.threshold,
                workers,
            )?;
            println!(
                "S{:<3} O {:.4}  mu {:.4}  sigma {:.4}  (bounds {:?} / {:?})",
                angle.degrees(),
                stats.origin,
                stats.mean,
                stats.std_dev,
                bounds.0,
                bounds.1
            );
            weak_bounds.push(WeakBoundReport {
                angle_deg: angle.degrees(),
                positive: bounds.0,
                negative: bounds.1,
            });
            directional.push(stats);
        }
        report.set_metric_value(
            metric,
            directional.first().map(|d| d.origin).unwrap_or(f64::NAN),
        );
        report.directional = Some(directional);
        report.weak_bounds = Some(weak_bounds);
    }

    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    #[derive(serde::Serialize)]
    struct ResolvedSweep {
        metric: MetricKind,
        grid: Option<i32>,
        directional: bool,
        max_px: u32,
        threshold: f64,
        min_height: f64,
        checkpoint: String,
        data_dir: String,
    }
    write_resolved(
        &args.out,
        "sweep",
        &ResolvedSweep {
            metric,
            grid: args.grid,
            directional: args.directional,
            max_px: args.max_px,
            threshold: args.threshold,
            min_height: args.min_height,
            checkpoint: args.checkpoint.display().to_string(),
            data_dir: args.data.display().to_string(),
        },
    )?;
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)
        .with_context(|| format!("cannot read report {}", args.report.display()))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    fs::create_dir_all(&args.out)?;
    let mut emitted = 0;
    if let Some(surface) = &report.shift_surface {
        let path = args.out.join("surface.png");
        plot::plot_surface(surface, &path)?;
        println!("wrote {}", path.display());
        emitted += 1;
    }
    if let Some(curve) = &report.mr_curve {
        let path = args.out.join("mr_curve.png");
        plot::plot_mr_curve(curve, &path)?;
        println!("wrote {}", path.display());
        emitted += 1;
    }
    if emitted == 0 {
        bail!("report holds neither a shift surface nor a miss-rate curve");
    }
    Ok(())
}
