//! Argument parsing and the subcommands of `fwl`.
//!
//! Commands print `key=value` lines on stdout. Settings that are not flags
//! come from the pipeline config given with `--config` (its defaults without
//! one): the sensor for geometry, `preprocess` for inference and training,
//! `model`, `pretrain` and `finetune` for training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fwl_core::annotate::{annotate_frame, map_from_scene, read_regions, GtMap, MapOptions, Region, RegionKind};
use fwl_core::baselines::{
    heuristic_waveform_classifier, mirror_symmetry_ghost_detect, radius_outlier_filter, statistical_outlier_filter,
    strongest_peaks_cloud, voxel_downsample, RadiusSpec, StatisticalSpec,
};
use fwl_core::frame::peak_to_point;
use fwl_core::io::{
    read_frame, read_labels, read_peaks_csv, read_ply, read_tum, write_frame, write_labels, write_peaks_csv, write_ply,
    write_tum,
};
use fwl_core::metrics::{ate, ghost_fp_rate, ghost_recall, ghost_removal_rate, parse_detections, rte};
use fwl_core::scenes::{glass_room, room_viewpoints};
use fwl_core::signal::{accumulate, detect_frame_peaks, preprocess, select_label_bins, PreprocessPlan};
use fwl_core::synth::{read_scene, synth_frame, Scene};
use fwl_core::{FwlFrame, PeakClass, PointCloud, Pose, Trajectory};
use fwl_nn::checkpoint::{load_model, save_model};
use fwl_nn::infer::{infer, remove_ghosts};
use fwl_nn::model::Model;
use fwl_nn::train::{finetune, format_loss_csv, pretrain};

use crate::config::{parse_planes, validate_config, PipelineConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{fmt_ratio, frame_tiles, label_tiles, recall_set, run_pipeline};

#[derive(Debug, Parser)]
#[command(name = "fwl", version, about = "Full-waveform LiDAR ghost removal toolkit")]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render frames, labels and ground-truth peaks of a scene.
    Synth(SynthArgs),
    /// Average repeated frames of one viewpoint.
    Accumulate(AccumulateArgs),
    /// Label the peaks of a frame against a reference map.
    Annotate(AnnotateArgs),
    /// Crop rows and leading bins, then downsample bins.
    Preprocess(PreprocessArgs),
    /// Detect peaks of every pixel.
    Peaks(PeaksArgs),
    /// Run a classical point-cloud or waveform baseline.
    Baseline(BaselineArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Train the classification head on a frozen encoder.
    Finetune(FinetuneArgs),
    /// Per-voxel classes of a raw frame.
    Infer(InferArgs),
    /// Point cloud of every peak not labelled Ghost.
    RemoveGhosts(RemoveGhostsArgs),
    /// Compute one evaluation metric.
    Eval(EvalArgs),
    /// Run the configured stages with caching and write a report.
    Pipeline(PipelineArgs),
    /// Check a config file and list every violated constraint.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene file; without it the procedural room `--room` is used.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub room: u64,
    /// One frame per pose; overrides `--views`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Jittered viewpoints around the origin; 0 renders the identity pose.
    #[arg(long, default_value_t = 0)]
    pub views: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AccumulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub frame: PathBuf,
    /// Derive the map from a scene file instead of `--map` and `--regions`.
    #[arg(long, conflicts_with_all = ["map", "regions"])]
    pub scene: Option<PathBuf>,
    /// Reference map (PLY).
    #[arg(long, requires = "regions")]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, default_value_t = fwl_core::annotate::DEFAULT_TAU_M)]
    pub tau_m: f64,
    #[arg(long, default_value_t = 3.0)]
    pub threshold_counts: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub peaks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires = "labels_out")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PeaksArgs {
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub threshold_counts: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the peaks as points.
    #[arg(long)]
    pub cloud_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Two strongest peaks per pixel.
    Dual,
    /// Three strongest peaks per pixel.
    Multi,
    /// Statistical outlier filter.
    Sof,
    /// Radius outlier filter.
    Rof,
    /// Mirror-symmetry ghost detection against known glass planes.
    Mirror,
    /// Relative-amplitude waveform rule.
    Heuristic,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Frame input (dual, multi, heuristic).
    #[arg(long)]
    pub frame: Option<PathBuf>,
    /// Cloud input (sof, rof, mirror).
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub threshold_counts: f64,
    /// Downsample the input cloud first.
    #[arg(long)]
    pub voxel_size_m: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub neighbors: usize,
    #[arg(long, default_value_t = 2.0)]
    pub std_ratio: f64,
    #[arg(long, default_value_t = 50)]
    pub min_points: usize,
    #[arg(long, default_value_t = 0.5)]
    pub radius_m: f64,
    /// Glass planes, one `px py pz nx ny nz` line each.
    #[arg(long)]
    pub planes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub eps_m: f64,
    #[arg(long, default_value_t = 0.5)]
    pub glass_amp_ratio: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub frames: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub frames: Vec<PathBuf>,
    /// One label volume per frame, same order.
    #[arg(long, required = true, num_args = 1..)]
    pub labels: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long, default_value_t = fwl_nn::infer::DEFAULT_CLASS_THRESHOLD)]
    pub class_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RemoveGhostsArgs {
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub threshold_counts: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Recall,
    Removal,
    Fp,
    Ate,
    Rte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// recall: predicted label volume.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// recall: ground-truth peaks (CSV).
    #[arg(long)]
    pub gt_peaks: Option<PathBuf>,
    /// recall: ground-truth labels; restricts recall to ghosts that keep a
    /// Ghost voxel after expansion.
    #[arg(long)]
    pub gt_labels: Option<PathBuf>,
    /// recall: ignore ghost peaks weaker than this.
    #[arg(long, default_value_t = 0.0)]
    pub min_amplitude_counts: f64,
    /// removal: ground-truth ghost points (PLY).
    #[arg(long)]
    pub gt_cloud: Option<PathBuf>,
    /// removal: de-ghosted cloud (PLY).
    #[arg(long)]
    pub denoised: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    pub radius_m: f64,
    /// fp: detections, `label cx cy cz hx hy hz yaw score` per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// fp: region file; reflection boxes are the ghost regions.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, default_value = "pedestrian")]
    pub class: String,
    /// ate / rte: estimated trajectory (TUM).
    #[arg(long)]
    pub est: Option<PathBuf>,
    /// ate / rte: ground-truth trajectory (TUM).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Config to check; defaults to `--config`.
    pub path: Option<PathBuf>,
}

/// Parsed arguments plus the configuration they select.
struct Ctx {
    cfg: PipelineConfig,
    threads: usize,
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::Config(format!("--{flag} is required here")))
}

fn print_kv(entries: &[(&str, String)]) {
    for (k, v) in entries {
        println!("{k}={v}");
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => validate_config(p).map_err(CliError::Diagnostics)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads > 0 && !matches!(cli.command, Command::Pipeline(_)) {
        // Ignore a second initialization; the first pool stays.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let ctx = Ctx {
        cfg,
        threads: cli.threads,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Accumulate(a) => {
            let frames = a.frames.iter().map(|p| read_frame(p)).collect::<fwl_core::Result<Vec<_>>>()?;
            let acc = accumulate(&frames)?;
            write_frame(&a.out, &acc)?;
            print_kv(&[("frames", frames.len().to_string()), ("dims", acc.dims().to_string())]);
            Ok(())
        }
        Command::Annotate(a) => annotate(&ctx, a),
        Command::Preprocess(a) => {
            let frame = read_frame(&a.frame)?;
            let out = preprocess(&frame, &ctx.cfg.preprocess)?;
            write_frame(&a.out, &out)?;
            if let (Some(l), Some(lo)) = (&a.labels, &a.labels_out) {
                let plan = PreprocessPlan::new(frame.dims(), &ctx.cfg.preprocess)?;
                write_labels(lo, &select_label_bins(&read_labels(l)?, &plan)?)?;
            }
            print_kv(&[("input", frame.dims().to_string()), ("output", out.dims().to_string())]);
            Ok(())
        }
        Command::Peaks(a) => {
            let frame = read_frame(&a.frame)?;
            let peaks = detect_frame_peaks(&frame, a.threshold_counts);
            write_peaks_csv(&a.out, &peaks)?;
            if let Some(c) = &a.cloud_out {
                let pts = peaks
                    .iter()
                    .map(|p| {
                        let mut q = *p;
                        q.position = frame.original_bin(p.position);
                        peak_to_point(&q, &frame.pose, &ctx.cfg.sensor)
                    })
                    .collect::<fwl_core::Result<Vec<_>>>()?;
                write_ply(c, &PointCloud::new(pts))?;
            }
            print_kv(&[("peaks", peaks.len().to_string())]);
            Ok(())
        }
        Command::Baseline(a) => baseline(&ctx, a),
        Command::Pretrain(a) => {
            let tiles = training_tiles(&ctx, &a.frames)?;
            let mut model = Model::new(ctx.cfg.model.clone(), ctx.cfg.seed)?;
            let logs = pretrain(&mut model, &tiles, &ctx.cfg.pretrain)?;
            save_model(&a.out, &model)?;
            if let Some(p) = &a.loss_csv {
                std::fs::write(p, format_loss_csv(&logs))?;
            }
            let last = logs.last().map_or(f64::NAN, |l| l.loss);
            print_kv(&[("tiles", tiles.len().to_string()), ("epochs", logs.len().to_string()), ("final_loss", last.to_string())]);
            Ok(())
        }
        Command::Finetune(a) => {
            if a.frames.len() != a.labels.len() {
                return Err(CliError::Config(format!(
                    "{} frames but {} label volumes",
                    a.frames.len(),
                    a.labels.len()
                )));
            }
            let mut model = load_model(&a.model)?;
            let mut data = Vec::new();
            for (f, l) in a.frames.iter().zip(&a.labels) {
                let frame = read_frame(f)?;
                let plan = PreprocessPlan::new(frame.dims(), &ctx.cfg.preprocess)?;
                let ft = frame_tiles(&frame, &plan, ctx.cfg.preprocess.tile_hw)?;
                let lt = label_tiles(&read_labels(l)?, &plan, ctx.cfg.preprocess.tile_hw)?;
                data.extend(ft.into_iter().zip(lt));
            }
            let logs = finetune(&mut model, &data, &ctx.cfg.finetune)?;
            save_model(&a.out, &model)?;
            if let Some(p) = &a.loss_csv {
                std::fs::write(p, format_loss_csv(&logs))?;
            }
            let last = logs.last().map_or(f64::NAN, |l| l.loss);
            print_kv(&[("tiles", data.len().to_string()), ("epochs", logs.len().to_string()), ("final_loss", last.to_string())]);
            Ok(())
        }
        Command::Infer(a) => {
            let model = load_model(&a.model)?;
            let frame = read_frame(&a.frame)?;
            let labels = infer(&frame, &model, &ctx.cfg.preprocess, a.class_threshold)?;
            write_labels(&a.out, &labels)?;
            let mut out = vec![("dims", labels.dims().to_string())];
            for c in PeakClass::TRAINABLE.into_iter().chain([PeakClass::Undefined]) {
                out.push((c.name(), labels.count(c).to_string()));
            }
            print_kv(&out);
            Ok(())
        }
        Command::RemoveGhosts(a) => {
            let frame = read_frame(&a.frame)?;
            let labels = read_labels(&a.labels)?;
            let cloud = remove_ghosts(&frame, &labels, a.threshold_counts, &ctx.cfg.sensor)?;
            write_ply(&a.out, &cloud)?;
            print_kv(&[("points", cloud.len().to_string())]);
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => {
            let report = run_pipeline(&ctx.cfg, &a.out, ctx.threads)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Validate(a) => {
            let path = a
                .path
                .or(cli.config)
                .ok_or_else(|| CliError::Config("give a config path or --config".into()))?;
            // A config given with --config was already checked above.
            validate_config(&path).map_err(CliError::Diagnostics)?;
            println!("ok");
            Ok(())
        }
    }
}

fn training_tiles(ctx: &Ctx, paths: &[PathBuf]) -> Result<Vec<FwlFrame>> {
    let mut tiles = Vec::new();
    for p in paths {
        let frame = read_frame(p)?;
        let plan = PreprocessPlan::new(frame.dims(), &ctx.cfg.preprocess)?;
        tiles.extend(frame_tiles(&frame, &plan, ctx.cfg.preprocess.tile_hw)?);
    }
    Ok(tiles)
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut scene: Scene = match &a.scene {
        Some(p) => read_scene(p)?,
        None => glass_room(a.room, &ctx.cfg.scenes.room)?,
    };
    if a.scene.is_none() {
        scene.rng_seed = crate::pipeline::scene_noise_seed(ctx.cfg.seed, a.room);
    }
    let poses: Vec<Pose> = match (&a.trajectory, a.views) {
        (Some(t), _) => read_tum(t)?.poses().to_vec(),
        (None, 0) => vec![Pose::identity()],
        (None, n) => room_viewpoints(a.room, n),
    };
    std::fs::create_dir_all(&a.out)?;
    let (mut peaks, mut ghosts) = (0, 0);
    for (i, pose) in poses.iter().enumerate() {
        let sf = synth_frame(&scene, pose, &ctx.cfg.sensor, i as u64)?;
        let stem = format!("{i:05}");
        write_frame(&a.out.join(format!("{stem}.fwl")), &sf.frame)?;
        write_labels(&a.out.join(format!("{stem}.fwll")), &sf.labels)?;
        write_peaks_csv(&a.out.join(format!("{stem}.csv")), &sf.peaks)?;
        peaks += sf.peaks.len();
        ghosts += sf.peaks.iter().filter(|p| p.label == PeakClass::Ghost).count();
    }
    write_tum(&a.out.join("trajectory.tum"), &Trajectory::new(poses.clone())?)?;
    print_kv(&[
        ("frames", poses.len().to_string()),
        ("peaks", peaks.to_string()),
        ("ghost_peaks", ghosts.to_string()),
    ]);
    Ok(())
}

fn annotate(ctx: &Ctx, a: AnnotateArgs) -> Result<()> {
    let frame = read_frame(&a.frame)?;
    let map = match (&a.scene, &a.map, &a.regions) {
        (Some(s), _, _) => map_from_scene(
            &read_scene(s)?,
            &MapOptions {
                tau: a.tau_m,
                ..MapOptions::default()
            },
        )?,
        (None, Some(m), Some(r)) => {
            let regions: Vec<Region> = read_regions(r)?;
            GtMap::new(read_ply(m)?, &regions, a.tau_m, Pose::identity())?
        }
        _ => return Err(CliError::Config("give --scene, or --map with --regions".into())),
    };
    let (peaks, labels) = annotate_frame(&frame, a.threshold_counts, &map, &ctx.cfg.sensor)?;
    write_labels(&a.out, &labels)?;
    if let Some(p) = &a.peaks_out {
        write_peaks_csv(p, &peaks)?;
    }
    let mut out = vec![("peaks", peaks.len().to_string())];
    for c in PeakClass::TRAINABLE {
        out.push((c.name(), peaks.iter().filter(|p| p.label == c).count().to_string()));
    }
    print_kv(&out);
    Ok(())
}

fn input_cloud(a: &BaselineArgs) -> Result<PointCloud> {
    let cloud = read_ply(need(&a.cloud, "cloud")?)?;
    Ok(match a.voxel_size_m {
        Some(s) => voxel_downsample(&cloud, s)?,
        None => cloud,
    })
}

fn baseline(ctx: &Ctx, a: BaselineArgs) -> Result<()> {
    match a.method {
        Method::Dual | Method::Multi => {
            let k = if a.method == Method::Dual { 2 } else { 3 };
            let frame = read_frame(need(&a.frame, "frame")?)?;
            let cloud = strongest_peaks_cloud(&frame, k, a.threshold_counts, &ctx.cfg.sensor)?;
            write_ply(&a.out, &cloud)?;
            print_kv(&[("points", cloud.len().to_string())]);
        }
        Method::Sof | Method::Rof => {
            let cloud = input_cloud(&a)?;
            let kept = if a.method == Method::Sof {
                statistical_outlier_filter(
                    &cloud,
                    &StatisticalSpec {
                        neighbors: a.neighbors,
                        std_ratio: a.std_ratio,
                    },
                )?
            } else {
                if a.min_points == 0 || !(a.radius_m > 0.0) {
                    return Err(CliError::Config("--min-points and --radius-m must be > 0".into()));
                }
                radius_outlier_filter(
                    &cloud,
                    &RadiusSpec {
                        min_points: a.min_points,
                        radius_m: a.radius_m,
                    },
                )
            };
            write_ply(&a.out, &kept)?;
            print_kv(&[("input", cloud.len().to_string()), ("kept", kept.len().to_string())]);
        }
        Method::Mirror => {
            let cloud = input_cloud(&a)?;
            let path = need(&a.planes, "planes")?;
            let planes = parse_planes(&std::fs::read_to_string(path)?, path)?;
            let flags = mirror_symmetry_ghost_detect(&cloud, &planes, a.eps_m);
            let kept: Vec<_> = cloud.points.iter().zip(&flags).filter(|(_, &g)| !g).map(|(p, _)| *p).collect();
            let kept = PointCloud::new(kept);
            write_ply(&a.out, &kept)?;
            print_kv(&[
                ("input", cloud.len().to_string()),
                ("flagged", flags.iter().filter(|&&g| g).count().to_string()),
                ("kept", kept.len().to_string()),
            ]);
        }
        Method::Heuristic => {
            let frame = read_frame(need(&a.frame, "frame")?)?;
            let (peaks, labels) = heuristic_waveform_classifier(&frame, a.glass_amp_ratio, a.threshold_counts);
            write_labels(&a.out, &labels)?;
            let ghosts = peaks.iter().filter(|p| p.label == PeakClass::Ghost).count();
            print_kv(&[("peaks", peaks.len().to_string()), ("ghost_peaks", ghosts.to_string())]);
        }
    }
    Ok(())
}

fn emit(format: Format, task: &str, entries: &[(&str, String)]) {
    match format {
        Format::Text => {
            println!("task={task}");
            print_kv(entries);
        }
        Format::Csv => {
            let keys: Vec<&str> = entries.iter().map(|(k, _)| *k).collect();
            let vals: Vec<&str> = entries.iter().map(|(_, v)| v.as_str()).collect();
            println!("task,{}", keys.join(","));
            println!("{task},{}", vals.join(","));
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    match a.task {
        Task::Recall => {
            let pred = read_labels(need(&a.pred, "pred")?)?;
            let peaks = read_peaks_csv(need(&a.gt_peaks, "gt-peaks")?)?;
            let set: Vec<_> = match &a.gt_labels {
                Some(p) => recall_set(&peaks, &read_labels(p)?, a.min_amplitude_counts),
                None => peaks
                    .into_iter()
                    .filter(|p| p.label == PeakClass::Ghost && p.amplitude >= a.min_amplitude_counts)
                    .collect(),
            };
            let r = ghost_recall(&pred, &set)?;
            emit(a.format, "recall", &[("ghost_peaks", set.len().to_string()), ("recall", fmt_ratio(r))]);
        }
        Task::Removal => {
            let gt = read_ply(need(&a.gt_cloud, "gt-cloud")?)?;
            let den = read_ply(need(&a.denoised, "denoised")?)?;
            if !(a.radius_m > 0.0) {
                return Err(CliError::Config("--radius-m must be > 0".into()));
            }
            let r = ghost_removal_rate(&gt, &den, a.radius_m);
            emit(a.format, "removal", &[("gt_points", gt.len().to_string()), ("removal_rate", fmt_ratio(r))]);
        }
        Task::Fp => {
            let dp = need(&a.detections, "detections")?;
            let dets = parse_detections(&std::fs::read_to_string(dp)?, dp)?;
            let regions: Vec<_> = read_regions(need(&a.regions, "regions")?)?
                .into_iter()
                .filter(|r| r.kind == RegionKind::Reflection)
                .map(|r| r.bbox)
                .collect();
            let r = ghost_fp_rate(&dets, &regions, &a.class)?;
            let n = dets.iter().filter(|d| d.label == a.class).count();
            emit(a.format, "fp", &[("detections", n.to_string()), ("ghost_fp_percent", fmt_ratio(r))]);
        }
        Task::Ate | Task::Rte => {
            let est = read_tum(need(&a.est, "est")?)?;
            let gt = read_tum(need(&a.gt, "gt")?)?;
            let (name, (mean, std)) = if a.task == Task::Ate {
                ("ate", ate(&est, &gt)?)
            } else {
                ("rte", rte(&est, &gt, a.window)?)
            };
            emit(a.format, name, &[("mean_m", format!("{mean:.6}")), ("std_m", format!("{std:.6}"))]);
        }
    }
    Ok(())
}
