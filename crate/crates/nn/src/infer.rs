//! Full-frame inference and ghost removal.

use fwl_core::frame::peak_to_point;
use fwl_core::signal::{detect_peaks, merge_and_upsample, tile, uncrop_rows, PreprocessPlan, PreprocessSpec};
use fwl_core::{FwlFrame, LabelVolume, PeakClass, PointCloud, SensorConfig};

use crate::error::{NnError, Result};
use crate::model::Model;
use crate::targets::{input_tensor, probs_to_labels};

/// Probability a class needs before it is assigned.
pub const DEFAULT_CLASS_THRESHOLD: f64 = 0.5;

/// Labels of one model-sized tile.
pub fn classify_tile(model: &Model, tile: &FwlFrame, threshold: f64) -> Result<LabelVolume> {
    let x = input_tensor(tile, &model.cfg)?;
    let probs = model.predict_probs(&model.features(&x)?)?;
    probs_to_labels(&probs, &model.cfg, threshold)
}

/// Preprocess, tile, classify, merge and restore a raw frame to full resolution.
///
/// Bins that were not sampled and cropped rows come back as Noise; the
/// result records which original bins carry predictions.
pub fn infer(frame: &FwlFrame, model: &Model, spec: &PreprocessSpec, threshold: f64) -> Result<LabelVolume> {
    let [h, w, t] = model.cfg.input;
    if h != spec.tile_hw || w != spec.tile_hw || t != spec.target_t {
        return Err(NnError::Config(format!(
            "model input {h}x{w}x{t} does not match tiles of {0}x{0}x{1}",
            spec.tile_hw, spec.target_t
        )));
    }
    if frame.t_index_map().is_some() {
        return Err(NnError::Config("inference expects a raw frame without an index map".into()));
    }
    let plan = PreprocessPlan::new(frame.dims(), spec)?;
    let pre = fwl_core::signal::apply_plan(frame, &plan)?;
    let (tiles, layout) = tile(&pre, spec.tile_hw)?;
    let labels = tiles
        .iter()
        .map(|tl| classify_tile(model, tl, threshold))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_and_upsample(&labels, &layout, &plan.index_map, frame.dims().t)?;
    Ok(uncrop_rows(&merged, plan.row_crop))
}

/// Converts every detected peak not labelled Ghost into a point.
///
/// Labels are read at the peak's position through the volume's sampled bins;
/// Undefined peaks are kept.
pub fn remove_ghosts(frame: &FwlFrame, labels: &LabelVolume, threshold: f64, cfg: &SensorConfig) -> Result<PointCloud> {
    let d = frame.dims();
    if labels.dims() != d {
        return Err(NnError::Shape(format!("labels {} vs frame {d}", labels.dims())));
    }
    let mut pts = Vec::new();
    for row in 0..d.h {
        for col in 0..d.w {
            for mut p in detect_peaks(frame.waveform(row, col), threshold) {
                let label = labels.label_at(row, col, p.position);
                if label == PeakClass::Ghost {
                    continue;
                }
                p.row = row;
                p.col = col;
                p.label = label;
                p.position = frame.original_bin(p.position);
                pts.push(peak_to_point(&p, &frame.pose, cfg)?);
            }
        }
    }
    Ok(PointCloud::new(pts))
}
