//! Training loops. Each sample gets its own tape; per-sample gradients are
//! summed in batch order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fwl_core::{FwlFrame, LabelVolume};

use crate::error::{NnError, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{AdamW, AdamWConfig};
use crate::targets::{input_tensor, mae_loss, mask_spatial, voxel_labels, MaeTerms, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config("epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Pretraining only: reconstruction and peak terms.
    pub terms: Option<MaeTerms>,
    /// Pretraining only: mean loss after the epoch under masks that stay fixed
    /// across epochs, free of mask-sampling noise.
    pub fixed_mask_loss: Option<f64>,
}

/// Independent RNG stream for `(seed, a, b)`.
pub fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    let x: u64 = s.random();
    ChaCha8Rng::seed_from_u64(x ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17))
}

type SampleGrads = Vec<Option<Tensor>>;

fn sum_grads(parts: Vec<SampleGrads>, scale: f64) -> SampleGrads {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(&y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }
    for t in acc.iter_mut().flatten() {
        t.scale(scale);
    }
    acc
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, epoch as u64, u64::MAX));
    order
}

/// FWL-MAE pretraining on frames already cut to the model input size.
pub fn pretrain(model: &mut Model, frames: &[FwlFrame], tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    if frames.is_empty() {
        return Err(NnError::Config("no pretraining frames".into()));
    }
    let inputs: Vec<Tensor> = frames.iter().map(|f| input_tensor(f, &model.cfg)).collect::<Result<_>>()?;
    let [gh, gw, gt] = model.cfg.grid();
    let mut opt = AdamW::new(tc.optimizer, &model.params);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let order = epoch_order(inputs.len(), tc.seed, epoch);
        let mut sum = MaeTerms { total: 0.0, recon: 0.0, pos: 0.0, amp: 0.0, width: 0.0 };
        for batch in order.chunks(tc.batch_size) {
            let m: &Model = model;
            let results: Vec<Result<(SampleGrads, MaeTerms)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(tc.seed, epoch as u64, i as u64);
                    let split = mask_spatial(gh * gw, gt, m.cfg.mask_ratio, &mut rng)?;
                    let mut g = m.graph();
                    let (loss, terms) = mae_loss(m, &mut g, &inputs[i], &split)?;
                    if !terms.total.is_finite() {
                        return Err(NnError::Diverged(format!("epoch {epoch}, frame {i}: loss {:?}", terms)));
                    }
                    Ok((g.backward(loss).into_params(), terms))
                })
                .collect();
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (gr, t) = r?;
                sum.total += t.total;
                sum.recon += t.recon;
                sum.pos += t.pos;
                sum.amp += t.amp;
                sum.width += t.width;
                parts.push(gr);
            }
            let grads = sum_grads(parts, 1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grads)?;
        }
        let n = inputs.len() as f64;
        let terms = MaeTerms {
            total: sum.total / n,
            recon: sum.recon / n,
            pos: sum.pos / n,
            amp: sum.amp / n,
            width: sum.width / n,
        };
        let fixed = fixed_mask_loss(model, &inputs, tc.seed)?;
        logs.push(EpochLog {
            epoch,
            loss: terms.total,
            terms: Some(terms),
            fixed_mask_loss: Some(fixed),
        });
    }
    Ok(logs)
}

/// Mean pretraining loss with one fixed mask per frame derived from `seed`.
pub fn fixed_mask_loss(model: &Model, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let [gh, gw, gt] = model.cfg.grid();
    let losses: Vec<Result<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let split = mask_spatial(gh * gw, gt, model.cfg.mask_ratio, &mut stream(seed, u64::MAX, i as u64))?;
            let mut g = model.graph();
            Ok(mae_loss(model, &mut g, x, &split)?.1.total)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / inputs.len() as f64)
}

/// Encoder features of many frames, computed once.
pub fn frame_features(model: &Model, frames: &[&FwlFrame]) -> Result<Vec<Tensor>> {
    frames
        .par_iter()
        .map(|f| model.features(&input_tensor(f, &model.cfg)?))
        .collect()
}

/// Inverted-dropout mask with keep probability `1 - rate`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - rate;
    (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
}

/// Trains the classification head on top of the frozen encoder.
///
/// Every other parameter is frozen for the duration and stays bit-identical.
pub fn finetune(model: &mut Model, data: &[(FwlFrame, LabelVolume)], tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(NnError::Config("no fine-tuning frames".into()));
    }
    let frames: Vec<&FwlFrame> = data.iter().map(|(f, _)| f).collect();
    let feats = frame_features(model, &frames)?;
    let labels: Vec<Vec<Option<usize>>> = data.iter().map(|(_, l)| voxel_labels(l, &model.cfg)).collect::<Result<_>>()?;
    let frozen_before: Vec<bool> = (0..model.params.len()).map(|i| model.params.is_frozen(i)).collect();
    model.freeze_all_but_head();
    let result = finetune_head(model, &feats, &labels, tc);
    for (i, f) in frozen_before.into_iter().enumerate() {
        model.params.set_frozen(i, f);
    }
    result
}

/// Head-only training on precomputed encoder features.
pub fn finetune_head(model: &mut Model, feats: &[Tensor], labels: &[Vec<Option<usize>>], tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    let hidden = model.cfg.d_enc / 2;
    let mut opt = AdamW::new(tc.optimizer, &model.params);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let order = epoch_order(feats.len(), tc.seed ^ 0xF1E7, epoch);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let m: &Model = model;
            let results: Vec<Result<(SampleGrads, f64)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(tc.seed ^ 0xF1E7, epoch as u64, i as u64);
                    let n = feats[i].dims2().0;
                    let mask = dropout_mask(n * hidden, m.cfg.dropout, &mut rng);
                    let mut g: Graph = m.graph();
                    let f = g.input(feats[i].clone(), false);
                    let probs = m.classify_head(&mut g, f, Some(mask))?;
                    let loss = g.focal(probs, labels[i].clone(), FOCAL_ALPHA.to_vec(), FOCAL_GAMMA)?;
                    let l = g.value(loss).data[0];
                    if !l.is_finite() {
                        return Err(NnError::Diverged(format!("epoch {epoch}, frame {i}: focal loss {l}")));
                    }
                    Ok((g.backward(loss).into_params(), l))
                })
                .collect();
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (gr, l) = r?;
                total += l;
                parts.push(gr);
            }
            let grads = sum_grads(parts, 1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grads)?;
        }
        logs.push(EpochLog {
            epoch,
            loss: total / feats.len() as f64,
            terms: None,
            fixed_mask_loss: None,
        });
    }
    Ok(logs)
}

/// Loss curve as CSV.
pub fn format_loss_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,recon,pos,amp,width,fixed_mask_loss\n");
    for l in logs {
        let fixed = l.fixed_mask_loss.map_or(String::new(), |v| v.to_string());
        match l.terms {
            Some(t) => s.push_str(&format!("{},{},{},{},{},{},{fixed}\n", l.epoch, l.loss, t.recon, t.pos, t.amp, t.width)),
            None => s.push_str(&format!("{},{},,,,,{fixed}\n", l.epoch, l.loss)),
        }
    }
    s
}
