//! Staged pipeline: synth, pretrain, finetune, eval.
//!
//! Stages run in order, each inside the content-addressed cache. Every stage
//! writes a `summary.txt` of `key=value` lines next to its artifacts; the
//! report is assembled from those files, so a cached stage contributes exactly
//! what a fresh one would. Wall-clock times go to a separate timings file and
//! never into the report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fwl_core::baselines::heuristic_waveform_classifier;
use fwl_core::frame::peak_to_point;
use fwl_core::io::{read_frame, read_labels, read_peaks_csv, write_frame, write_labels, write_peaks_csv};
use fwl_core::metrics::{ghost_recall, ghost_removal_rate, support};
use fwl_core::scenes::{glass_room, room_viewpoints};
use fwl_core::signal::{apply_plan, detect_peaks, select_label_bins, tile, tile_labels, PreprocessPlan};
use fwl_core::synth::{read_scene, synth_frame, Scene};
use fwl_core::{Dims, FwlFrame, LabelVolume, Peak, PeakClass, PointCloud, SensorConfig};
use fwl_nn::checkpoint::{load_model, save_model};
use fwl_nn::infer::{infer, remove_ghosts};
use fwl_nn::model::Model;
use fwl_nn::train::{finetune, format_loss_csv, pretrain};
use rayon::prelude::*;

use crate::cache::{hash_parts, sha256_hex, StageCache};
use crate::config::{check_config, PipelineConfig, Predictor, SceneFamily, SceneIds, Stage};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub output_hash: String,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    /// Deterministic `key=value` entries in emission order.
    pub entries: Vec<(String, String)>,
    pub stages: Vec<StageRecord>,
}

impl Report {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed numeric entry; `None` when absent or `NA`.
    pub fn number(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    fn push(&mut self, k: impl Into<String>, v: impl ToString) {
        self.entries.push((k.into(), v.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# fwl pipeline report\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// `metric.*` entries as `split,metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("split,metric,value\n");
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix("metric.") {
                let (split, name) = rest.split_once('.').unwrap_or(("all", rest));
                s.push_str(&format!("{split},{name},{v}\n"));
            }
        }
        s
    }

    pub fn timings_text(&self) -> String {
        let mut s = String::from("stage,seconds,cached\n");
        for r in &self.stages {
            s.push_str(&format!("{},{:.3},{}\n", r.stage.name(), r.seconds, r.cached));
        }
        s
    }
}

/// Formats a ratio for the report; `NA` when undefined.
pub fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Noise seed of scene `id` under pipeline seed `seed`.
pub fn scene_noise_seed(seed: u64, id: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ id
}

pub fn load_scene(cfg: &PipelineConfig, id: u64) -> Result<Scene> {
    let mut scene = match cfg.scenes.family {
        SceneFamily::GlassRoom => glass_room(id, &cfg.scenes.room)?,
        SceneFamily::Files => {
            let path = cfg
                .scenes
                .files
                .get(id as usize)
                .ok_or_else(|| CliError::Config(format!("scene id {id} has no file")))?;
            read_scene(path)?
        }
    };
    scene.rng_seed = scene_noise_seed(cfg.seed, id);
    Ok(scene)
}

/// Runs the configured stages below `out`, inside a pool of `threads`
/// workers (0: the ambient pool), and writes `report.txt`, `metrics.csv` and
/// `timings.csv` there.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, threads: usize) -> Result<Report> {
    let ds = check_config(cfg);
    if !ds.is_empty() {
        return Err(CliError::Diagnostics(ds));
    }
    let report = if threads == 0 {
        run_stages(cfg, out)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::runtime(e.to_string()))?;
        pool.install(|| run_stages(cfg, out))?
    };
    std::fs::write(out.join("report.txt"), report.to_text())?;
    std::fs::write(out.join("metrics.csv"), report.metrics_csv())?;
    std::fs::write(out.join("timings.csv"), report.timings_text())?;
    Ok(report)
}

fn run_stages(cfg: &PipelineConfig, out: &Path) -> Result<Report> {
    std::fs::create_dir_all(out)?;
    let cache = StageCache::new(out.join("cache"));
    let config_text = cfg.to_toml();
    let mut report = Report::default();
    report.push("config_sha256", sha256_hex(config_text.as_bytes()));
    report.push("seed", cfg.seed);
    report.push("seed.pretrain", cfg.pretrain.seed);
    report.push("seed.finetune", cfg.finetune.seed);
    report.push("stages", cfg.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));

    let mut synth_out: Option<(PathBuf, String)> = None;
    let mut pretrain_out: Option<(PathBuf, String)> = None;
    let mut finetune_out: Option<(PathBuf, String)> = None;

    for &stage in &cfg.stages {
        let start = Instant::now();
        let (key, inputs) = match stage {
            Stage::Synth => {
                let parts = [
                    section(&cfg.sensor),
                    section(&cfg.scenes),
                    scene_file_digests(cfg),
                    section(&cfg.split),
                    cfg.seed.to_string(),
                ];
                (stage_key(stage, &parts, &[]), Vec::new())
            }
            Stage::Pretrain => {
                let inputs = vec![synth_out.as_ref().expect("synth precedes pretrain").1.clone()];
                let parts = [section(&cfg.preprocess), section(&cfg.model), section(&cfg.pretrain), cfg.seed.to_string()];
                (stage_key(stage, &parts, &inputs), inputs)
            }
            Stage::Finetune => {
                let pre = pretrain_out.as_ref().expect("pretrain precedes finetune");
                let inputs = vec![synth_out.as_ref().expect("synth precedes finetune").1.clone(), pre.1.clone()];
                let parts = [section(&cfg.preprocess), section(&cfg.finetune)];
                (stage_key(stage, &parts, &inputs), inputs)
            }
            Stage::Eval => {
                let mut inputs = vec![synth_out.as_ref().expect("synth precedes eval").1.clone()];
                inputs.extend(pretrain_out.iter().chain(&finetune_out).map(|(_, h)| h.clone()));
                let parts = [section(&cfg.preprocess), section(&cfg.sensor), section(&cfg.eval)];
                (stage_key(stage, &parts, &inputs), inputs)
            }
        };
        let synth_dir = synth_out.as_ref().map(|s| s.0.as_path());
        let result = cache.run(stage.name(), &key, |dir| match stage {
            Stage::Synth => run_synth(cfg, dir),
            Stage::Pretrain => run_pretrain(cfg, synth_dir.expect("synth dir"), dir),
            Stage::Finetune => run_finetune(
                cfg,
                synth_dir.expect("synth dir"),
                &pretrain_out.as_ref().expect("pretrain").0,
                dir,
            ),
            Stage::Eval => run_eval(
                cfg,
                synth_dir.expect("synth dir"),
                pretrain_out.as_ref().map(|p| p.0.as_path()),
                finetune_out.as_ref().map(|p| p.0.as_path()),
                dir,
            ),
        });
        let output = result.map_err(|e| CliError::Stage {
            stage: stage.name().to_string(),
            inputs: inputs.clone(),
            source: Box::new(e),
        })?;
        report.push(format!("stage.{}.key", stage.name()), &key);
        report.push(format!("stage.{}.output_sha256", stage.name()), &output.hash);
        let summary = std::fs::read_to_string(output.dir.join("summary.txt"))?;
        for line in summary.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::runtime(format!("bad summary line `{line}`")))?;
            report.push(k, v);
        }
        report.stages.push(StageRecord {
            stage,
            key: key.clone(),
            output_hash: output.hash.clone(),
            cached: output.cached,
            seconds: start.elapsed().as_secs_f64(),
        });
        match stage {
            Stage::Synth => synth_out = Some((output.dir, output.hash)),
            Stage::Pretrain => pretrain_out = Some((output.dir, output.hash)),
            Stage::Finetune => finetune_out = Some((output.dir, output.hash)),
            Stage::Eval => {}
        }
    }
    Ok(report)
}

/// Canonical TOML of one config section.
fn section<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config sections serialize")
}

/// Content hashes of the scene files, so an edited file is re-rendered.
fn scene_file_digests(cfg: &PipelineConfig) -> String {
    if cfg.scenes.family != SceneFamily::Files {
        return String::new();
    }
    cfg.scenes
        .files
        .iter()
        .map(|f| match std::fs::read(f) {
            Ok(bytes) => sha256_hex(&bytes),
            // The synth stage reports the unreadable file itself.
            Err(_) => "unreadable".to_string(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn stage_key(stage: Stage, parts: &[String], inputs: &[String]) -> String {
    let mut all: Vec<&[u8]> = vec![stage.name().as_bytes()];
    all.extend(parts.iter().map(|p| p.as_bytes()));
    all.extend(inputs.iter().map(|p| p.as_bytes()));
    hash_parts(&all)
}

fn split_ids<'a>(cfg: &'a PipelineConfig, split: &str) -> &'a SceneIds {
    match split {
        "train" => &cfg.split.train,
        "val" => &cfg.split.val,
        _ => &cfg.split.test,
    }
}

fn write_summary(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let s: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(dir.join("summary.txt"), s)?;
    Ok(())
}

fn run_synth(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let mut summary = Vec::new();
    for split in SPLITS {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub)?;
        let mut jobs = Vec::new();
        for &id in &split_ids(cfg, split).0 {
            for (view, pose) in room_viewpoints(id, cfg.scenes.views_per_scene).into_iter().enumerate() {
                jobs.push((id, view, pose));
            }
        }
        let stems: Vec<(String, usize, usize)> = jobs
            .par_iter()
            .map(|&(id, view, pose)| {
                let scene = load_scene(cfg, id)?;
                let sf = synth_frame(&scene, &pose, &cfg.sensor, view as u64)?;
                let stem = format!("{id:06}-{view:02}");
                write_frame(&sub.join(format!("{stem}.fwl")), &sf.frame)?;
                write_labels(&sub.join(format!("{stem}.fwll")), &sf.labels)?;
                write_peaks_csv(&sub.join(format!("{stem}.csv")), &sf.peaks)?;
                let ghosts = sf.peaks.iter().filter(|p| p.label == PeakClass::Ghost).count();
                Ok((stem, sf.peaks.len(), ghosts))
            })
            .collect::<Result<_>>()?;
        let index: String = stems.iter().map(|(s, _, _)| format!("{s}\n")).collect();
        std::fs::write(sub.join("index.txt"), index)?;
        summary.push((format!("frames.{split}"), stems.len().to_string()));
        summary.push((format!("gt_peaks.{split}"), stems.iter().map(|s| s.1).sum::<usize>().to_string()));
        summary.push((format!("gt_ghost_peaks.{split}"), stems.iter().map(|s| s.2).sum::<usize>().to_string()));
    }
    write_summary(dir, &summary)
}

/// One synthesized frame read back from a synth stage.
pub struct Sample {
    pub stem: String,
    pub frame: FwlFrame,
    pub labels: LabelVolume,
    pub peaks: Vec<Peak>,
}

pub fn load_split(synth_dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let sub = synth_dir.join(split);
    let index = std::fs::read_to_string(sub.join("index.txt"))?;
    index
        .lines()
        .filter(|l| !l.is_empty())
        .map(|stem| {
            Ok(Sample {
                stem: stem.to_string(),
                frame: read_frame(&sub.join(format!("{stem}.fwl")))?,
                labels: read_labels(&sub.join(format!("{stem}.fwll")))?,
                peaks: read_peaks_csv(&sub.join(format!("{stem}.csv")))?,
            })
        })
        .collect()
}

/// Preprocessed model-sized tiles of a raw frame.
pub fn frame_tiles(frame: &FwlFrame, plan: &PreprocessPlan, tile_hw: usize) -> Result<Vec<FwlFrame>> {
    Ok(tile(&apply_plan(frame, plan)?, tile_hw)?.0)
}

pub fn label_tiles(labels: &LabelVolume, plan: &PreprocessPlan, tile_hw: usize) -> Result<Vec<LabelVolume>> {
    Ok(tile_labels(&select_label_bins(labels, plan)?, tile_hw)?)
}

fn sensor_dims(s: &SensorConfig) -> Dims {
    Dims::new(s.rows, s.cols, s.bins)
}

fn loss_summary(stage: &str, csv: &str) -> Vec<(String, String)> {
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut out = vec![(format!("{stage}.epochs"), rows.len().to_string())];
    if let Some(last) = rows.last() {
        out.push((format!("{stage}.final_loss"), last[1].to_string()));
        if let (Some(first), Some(f)) = (rows.first().and_then(|r| r.get(6)), last.get(6)) {
            if !f.is_empty() {
                out.push((format!("{stage}.fixed_mask_loss.first"), first.to_string()));
                out.push((format!("{stage}.fixed_mask_loss.last"), f.to_string()));
            }
        }
    }
    out
}

fn run_pretrain(cfg: &PipelineConfig, synth_dir: &Path, dir: &Path) -> Result<()> {
    let plan = PreprocessPlan::new(sensor_dims(&cfg.sensor), &cfg.preprocess)?;
    let mut tiles = Vec::new();
    for s in load_split(synth_dir, "train")? {
        tiles.extend(frame_tiles(&s.frame, &plan, cfg.preprocess.tile_hw)?);
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let logs = pretrain(&mut model, &tiles, &cfg.pretrain)?;
    save_model(&dir.join("model.fwlm"), &model)?;
    let csv = format_loss_csv(&logs);
    std::fs::write(dir.join("loss.csv"), &csv)?;
    let mut summary = vec![("pretrain.tiles".to_string(), tiles.len().to_string())];
    summary.extend(loss_summary("pretrain", &csv));
    write_summary(dir, &summary)
}

fn run_finetune(cfg: &PipelineConfig, synth_dir: &Path, pretrain_dir: &Path, dir: &Path) -> Result<()> {
    let plan = PreprocessPlan::new(sensor_dims(&cfg.sensor), &cfg.preprocess)?;
    let mut data = Vec::new();
    for s in load_split(synth_dir, "train")? {
        let ft = frame_tiles(&s.frame, &plan, cfg.preprocess.tile_hw)?;
        let lt = label_tiles(&s.labels, &plan, cfg.preprocess.tile_hw)?;
        data.extend(ft.into_iter().zip(lt));
    }
    let mut model = load_model(&pretrain_dir.join("model.fwlm"))?;
    let logs = finetune(&mut model, &data, &cfg.finetune)?;
    save_model(&dir.join("model.fwlm"), &model)?;
    let csv = format_loss_csv(&logs);
    std::fs::write(dir.join("loss.csv"), &csv)?;
    write_summary(dir, &loss_summary("finetune", &csv))
}

/// Ground-truth ghost peaks that recall is measured on: at or above the
/// detection threshold, with some Ghost voxel left inside their FWHM support
/// after label expansion (a nearer overlapping peak can paint over all of it).
pub fn recall_set(peaks: &[Peak], labels: &LabelVolume, threshold: f64) -> Vec<Peak> {
    let t = labels.dims().t;
    peaks
        .iter()
        .filter(|p| p.label == PeakClass::Ghost && p.amplitude >= threshold)
        .filter(|p| {
            let (lo, hi) = support(p, t);
            labels.column(p.row, p.col)[lo..=hi].contains(&PeakClass::Ghost)
        })
        .copied()
        .collect()
}

/// Points of detected peaks that the ground-truth labels call Ghost.
pub fn gt_ghost_points(frame: &FwlFrame, gt: &LabelVolume, threshold: f64, cfg: &SensorConfig) -> Result<PointCloud> {
    let d = frame.dims();
    let mut pts = Vec::new();
    for row in 0..d.h {
        for col in 0..d.w {
            for mut p in detect_peaks(frame.waveform(row, col), threshold) {
                if gt.label_at(row, col, p.position) != PeakClass::Ghost {
                    continue;
                }
                p.row = row;
                p.col = col;
                p.label = PeakClass::Ghost;
                p.position = frame.original_bin(p.position);
                pts.push(peak_to_point(&p, &frame.pose, cfg)?);
            }
        }
    }
    Ok(PointCloud::new(pts))
}

/// Peak-level Ghost confusion over detected peaks, judged against the GT label volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeakConfusion {
    pub ghost_tp: usize,
    pub ghost_fp: usize,
    pub ghost_fn: usize,
    /// The subset of `ghost_fp` that the ground truth calls Object.
    pub objects_removed: usize,
}

impl PeakConfusion {
    pub fn add(&mut self, o: PeakConfusion) {
        self.ghost_tp += o.ghost_tp;
        self.ghost_fp += o.ghost_fp;
        self.ghost_fn += o.ghost_fn;
        self.objects_removed += o.objects_removed;
    }

    pub fn precision(&self) -> Option<f64> {
        let called = self.ghost_tp + self.ghost_fp;
        (called > 0).then(|| self.ghost_tp as f64 / called as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.ghost_tp + self.ghost_fp + self.ghost_fn;
        (d > 0).then(|| 2.0 * self.ghost_tp as f64 / d as f64)
    }
}

pub fn peak_confusion(frame: &FwlFrame, gt: &LabelVolume, pred: &LabelVolume, threshold: f64) -> PeakConfusion {
    let d = frame.dims();
    let mut c = PeakConfusion::default();
    for row in 0..d.h {
        for col in 0..d.w {
            for p in detect_peaks(frame.waveform(row, col), threshold) {
                let truth = gt.label_at(row, col, p.position);
                let said = pred.label_at(row, col, p.position) == PeakClass::Ghost;
                match (truth == PeakClass::Ghost, said) {
                    (true, true) => c.ghost_tp += 1,
                    (true, false) => c.ghost_fn += 1,
                    (false, true) => {
                        c.ghost_fp += 1;
                        c.objects_removed += usize::from(truth == PeakClass::Object);
                    }
                    (false, false) => {}
                }
            }
        }
    }
    c
}

/// Pooled counts behind the recall and removal ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Tally {
    detected: usize,
    ghosts: usize,
    removed: usize,
    ghost_points: usize,
    peaks: PeakConfusion,
}

impl Tally {
    fn add(&mut self, o: Tally) {
        self.detected += o.detected;
        self.ghosts += o.ghosts;
        self.removed += o.removed;
        self.ghost_points += o.ghost_points;
        self.peaks.add(o.peaks);
    }

    fn recall(&self) -> Option<f64> {
        (self.ghosts > 0).then(|| self.detected as f64 / self.ghosts as f64)
    }

    fn removal(&self) -> Option<f64> {
        (self.ghost_points > 0).then(|| self.removed as f64 / self.ghost_points as f64)
    }
}

fn score(cfg: &PipelineConfig, s: &Sample, pred: &LabelVolume) -> Result<Tally> {
    let thr = cfg.eval.peak_threshold_counts;
    let set = recall_set(&s.peaks, &s.labels, thr);
    let detected = match ghost_recall(pred, &set)? {
        Some(r) => (r * set.len() as f64).round() as usize,
        None => 0,
    };
    let gt_points = gt_ghost_points(&s.frame, &s.labels, thr, &cfg.sensor)?;
    let denoised = remove_ghosts(&s.frame, pred, thr, &cfg.sensor)?;
    let removed = ghost_removal_rate(&gt_points, &denoised, cfg.eval.removal_radius_m)
        .map_or(0, |r| (r * gt_points.len() as f64).round() as usize);
    Ok(Tally {
        detected,
        ghosts: set.len(),
        removed,
        ghost_points: gt_points.len(),
        peaks: peak_confusion(&s.frame, &s.labels, pred, thr),
    })
}

fn run_eval(
    cfg: &PipelineConfig,
    synth_dir: &Path,
    pretrain_dir: Option<&Path>,
    finetune_dir: Option<&Path>,
    dir: &Path,
) -> Result<()> {
    let model = finetune_dir.map(|d| load_model(&d.join("model.fwlm"))).transpose()?;
    let untrained_head = pretrain_dir.map(|d| load_model(&d.join("model.fwlm"))).transpose()?;
    let e = &cfg.eval;
    let mut summary = vec![("eval.predictor".to_string(), format!("{:?}", e.predictor).to_lowercase())];
    let mut per_frame = String::from("split,frame,ghosts,detected,ghost_points,removed,objects_removed\n");
    for split in ["val", "test"] {
        let samples = load_split(synth_dir, split)?;
        if samples.is_empty() {
            continue;
        }
        let rows: Vec<(Tally, Tally, Option<Tally>)> = samples
            .par_iter()
            .map(|s| {
                let pred = match e.predictor {
                    Predictor::Oracle => s.labels.clone(),
                    Predictor::Model => infer(
                        &s.frame,
                        model.as_ref().expect("validated: model predictor has a model"),
                        &cfg.preprocess,
                        e.class_threshold,
                    )?,
                };
                let ours = score(cfg, s, &pred)?;
                let heur = heuristic_waveform_classifier(&s.frame, e.heuristic_glass_amp_ratio, e.peak_threshold_counts).1;
                let heur = score(cfg, s, &heur)?;
                let head = match &untrained_head {
                    Some(m) => Some(score(cfg, s, &infer(&s.frame, m, &cfg.preprocess, e.class_threshold)?)?),
                    None => None,
                };
                Ok((ours, heur, head))
            })
            .collect::<Result<_>>()?;
        let (mut ours, mut heur, mut head) = (Tally::default(), Tally::default(), Tally::default());
        for (s, (o, h, u)) in samples.iter().zip(&rows) {
            ours.add(*o);
            heur.add(*h);
            if let Some(u) = u {
                head.add(*u);
            }
            per_frame.push_str(&format!(
                "{split},{},{},{},{},{},{}\n",
                s.stem, o.ghosts, o.detected, o.ghost_points, o.removed, o.peaks.objects_removed
            ));
        }
        let m = |k: &str| format!("metric.{split}.{k}");
        summary.push((m("ghost_peaks"), ours.ghosts.to_string()));
        summary.push((m("recall"), fmt_ratio(ours.recall())));
        summary.push((m("removal_rate"), fmt_ratio(ours.removal())));
        summary.push((m("object_peaks_removed"), ours.peaks.objects_removed.to_string()));
        summary.push((m("peak_precision"), fmt_ratio(ours.peaks.precision())));
        summary.push((m("peak_f1"), fmt_ratio(ours.peaks.f1())));
        summary.push((m("heuristic_recall"), fmt_ratio(heur.recall())));
        summary.push((m("heuristic_removal_rate"), fmt_ratio(heur.removal())));
        summary.push((m("heuristic_peak_precision"), fmt_ratio(heur.peaks.precision())));
        summary.push((m("heuristic_peak_f1"), fmt_ratio(heur.peaks.f1())));
        if untrained_head.is_some() {
            summary.push((m("untrained_head_recall"), fmt_ratio(head.recall())));
        }
    }
    std::fs::write(dir.join("frames.csv"), per_frame)?;
    write_summary(dir, &summary)
}
