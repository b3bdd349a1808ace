//! Masking, peak targets and the pretraining / fine-tuning objectives.

use rand::seq::index::sample;
use rand::Rng;

use fwl_core::signal::detect_peaks;
use fwl_core::{FwlFrame, LabelVolume, PeakClass};

use crate::error::{NnError, Result};
use crate::graph::{patch_index, Graph, Var};
use crate::model::{MaeConfig, Model};
use crate::tensor::Tensor;

/// Class weights for (Object, Glass, Ghost, Noise), in [`PeakClass::TRAINABLE`] order.
pub const FOCAL_ALPHA: [f64; 4] = [0.05, 0.25, 0.7, 0.0001];
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
}

/// Masks `floor(ratio * n_spatial)` spatial patches uniformly without
/// replacement, together with all their temporal tokens.
///
/// Token `i` belongs to spatial patch `i / n_temporal`.
pub fn mask_spatial(n_spatial: usize, n_temporal: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(NnError::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = (ratio * n_spatial as f64).floor() as usize;
    let mut chosen = vec![false; n_spatial];
    for i in sample(rng, n_spatial, count) {
        chosen[i] = true;
    }
    let mut split = MaskSplit {
        visible: Vec::new(),
        masked: Vec::new(),
    };
    for s in 0..n_spatial {
        let dst = if chosen[s] { &mut split.masked } else { &mut split.visible };
        dst.extend(s * n_temporal..(s + 1) * n_temporal);
    }
    Ok(split)
}

/// Model-ready input: scaled voxel values as an `[H, W, T]` tensor.
pub fn input_tensor(frame: &FwlFrame, cfg: &MaeConfig) -> Result<Tensor> {
    let d = frame.dims();
    if [d.h, d.w, d.t] != cfg.input {
        return Err(NnError::Shape(format!("frame {d} does not match model input {:?}", cfg.input)));
    }
    Ok(Tensor {
        shape: cfg.input.to_vec(),
        data: frame.values().iter().map(|&v| v as f64 * cfg.input_scale).collect(),
    })
}

/// Per-patch peak targets, each `[N, K]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTargets {
    pub positions: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub widths: Vec<f64>,
    /// 1 where at least one pixel of the patch has a peak in that slot.
    pub valid: Vec<f64>,
}

/// Slot-wise patch averages of the `K` nearest peaks of every pixel.
///
/// Each pixel contributes its first `K` peaks in range order; missing slots
/// count as zeros in the average. Positions are relative to the patch's
/// first bin.
pub fn peak_targets(volume: &Tensor, cfg: &MaeConfig) -> Result<PeakTargets> {
    let [h, w, t] = cfg.input;
    if volume.shape != [h, w, t] {
        return Err(NnError::Shape(format!("volume {:?} vs input {:?}", volume.shape, cfg.input)));
    }
    let [ph, pw, pt] = cfg.patch;
    let [gh, gw, gt] = cfg.grid();
    let k = cfg.k_peaks;
    let n = gh * gw * gt;
    let mut out = PeakTargets {
        positions: vec![0.0; n * k],
        amplitudes: vec![0.0; n * k],
        widths: vec![0.0; n * k],
        valid: vec![0.0; n * k],
    };
    let pixels = (ph * pw) as f64;
    for a in 0..gh {
        for b in 0..gw {
            for c in 0..gt {
                let tok = (a * gw + b) * gt + c;
                for i in 0..ph {
                    for j in 0..pw {
                        let base = ((a * ph + i) * w + b * pw + j) * t + c * pt;
                        let peaks = detect_peaks(&volume.data[base..base + pt], cfg.peak_threshold);
                        for (s, p) in peaks.iter().take(k).enumerate() {
                            out.positions[tok * k + s] += p.position / pixels;
                            out.amplitudes[tok * k + s] += p.amplitude / pixels;
                            out.widths[tok * k + s] += p.width / pixels;
                            out.valid[tok * k + s] = 1.0;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scalar terms of the pretraining loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeTerms {
    pub total: f64,
    pub recon: f64,
    pub pos: f64,
    pub amp: f64,
    pub width: f64,
}

/// Builds the full pretraining loss for one sample; returns the loss node and its terms.
pub fn mae_loss(model: &Model, g: &mut Graph, volume: &Tensor, split: &MaskSplit) -> Result<(Var, MaeTerms)> {
    let cfg = &model.cfg;
    let targets = peak_targets(volume, cfg)?;
    let index = patch_index(cfg.input, cfg.patch)?;
    let p = cfg.patch_voxels();
    let mut recon_target = Vec::with_capacity(split.masked.len() * p);
    for &m in &split.masked {
        recon_target.extend(index[m * p..(m + 1) * p].iter().map(|&i| volume.data[i]));
    }
    let v = g.input(volume.clone(), false);
    let tokens = model.embed(g, v)?;
    let vis = g.gather_rows(tokens, &split.visible)?;
    let feats = model.encode(g, vis, &split.visible)?;
    let dec_in = model.assemble_decoder_tokens(g, feats, &split.visible, &split.masked)?;
    let (pp, pa, pw) = model.peak_heads(g, dec_in)?;
    let recon = model.decode_reconstruct(g, dec_in, &split.masked)?;
    let l_rec = g.mse(recon, recon_target)?;
    let l_pos = g.l1(pp, targets.positions, targets.valid.clone())?;
    let l_amp = g.l1(pa, targets.amplitudes, targets.valid.clone())?;
    let l_w = g.l1(pw, targets.widths, targets.valid)?;
    let total = g.weighted_sum(&[(l_rec, 1.0), (l_pos, cfg.lambda_pos), (l_amp, cfg.lambda_amp), (l_w, cfg.lambda_width)])?;
    let s = |v: Var, g: &Graph| g.value(v).data[0];
    let terms = MaeTerms {
        total: s(total, g),
        recon: s(l_rec, g),
        pos: s(l_pos, g),
        amp: s(l_amp, g),
        width: s(l_w, g),
    };
    Ok((total, terms))
}

/// Class index per model-output voxel, in `[N, P]` token order; Undefined is unlabelled.
pub fn voxel_labels(labels: &LabelVolume, cfg: &MaeConfig) -> Result<Vec<Option<usize>>> {
    let d = labels.dims();
    if [d.h, d.w, d.t] != cfg.input {
        return Err(NnError::Shape(format!("labels {d} do not match model input {:?}", cfg.input)));
    }
    let index = patch_index(cfg.input, cfg.patch)?;
    Ok(index.iter().map(|&i| labels.labels()[i].index()).collect())
}

/// Inverse of [`voxel_labels`]: per-voxel classes back to an `[H, W, T]` volume.
pub fn probs_to_labels(probs: &Tensor, cfg: &MaeConfig, threshold: f64) -> Result<LabelVolume> {
    let index = patch_index(cfg.input, cfg.patch)?;
    let c = cfg.classes;
    if probs.len() != index.len() * c {
        return Err(NnError::Shape(format!("{} probabilities for {} voxels", probs.len(), index.len())));
    }
    let mut labels = vec![PeakClass::Undefined; index.len()];
    for (v, &dst) in index.iter().enumerate() {
        labels[dst] = decide(&probs.data[v * c..(v + 1) * c], threshold);
    }
    let [h, w, t] = cfg.input;
    Ok(LabelVolume::from_labels(fwl_core::Dims::new(h, w, t), labels)?)
}

/// Most probable class if its probability exceeds `threshold`, else Undefined.
pub fn decide(probs: &[f64], threshold: f64) -> PeakClass {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    if probs[best] > threshold && best < PeakClass::TRAINABLE.len() {
        PeakClass::TRAINABLE[best]
    } else {
        PeakClass::Undefined
    }
}
