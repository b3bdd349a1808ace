//! Classical waveform processing: peak extraction, accumulation, and the
//! crop / downsample / tile / upsample bookkeeping that feeds the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};
use crate::frame::{Dims, FwlFrame, LabelVolume, Peak, PeakClass};

/// Finds the peaks of one histogram.
///
/// A peak is a local maximum whose sample exceeds `threshold`. Flat tops are
/// treated as one maximum centred on the plateau, provided the signal falls on
/// both sides; the first and last bins are never peaks. The apex is refined by
/// fitting a parabola to the logarithm of the three samples around the maximum
/// (exact for Gaussian pulses), falling back to a linear-domain parabola when
/// a neighbour is not positive. Width is the FWHM measured between linearly
/// interpolated half-maximum crossings; a crossing that is not reached before a
/// valley or the histogram edge is taken at that valley or edge.
///
/// Peaks come back sorted by position, labelled [`PeakClass::Noise`].
pub fn detect_peaks<V: Copy + Into<f64>>(waveform: &[V], threshold: f64) -> Vec<Peak> {
    let n = waveform.len();
    let y = |i: usize| -> f64 { waveform[i].into() };
    let mut peaks = Vec::new();
    if n < 3 {
        return peaks;
    }
    let mut i = 1;
    while i < n - 1 {
        if !(y(i) > y(i - 1)) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && y(j + 1) == y(i) {
            j += 1;
        }
        if j + 1 >= n || y(j + 1) > y(i) {
            i = j + 1;
            continue;
        }
        // Local maximum spanning [i, j].
        if y(i) > threshold {
            peaks.push(refine_peak(waveform, i, j));
        }
        i = j + 1;
    }
    peaks
}

fn refine_peak<V: Copy + Into<f64>>(waveform: &[V], first: usize, last: usize) -> Peak {
    let y = |i: usize| -> f64 { waveform[i].into() };
    let (position, amplitude) = if first == last {
        let (y0, y1, y2) = (y(first - 1), y(first), y(first + 1));
        let (delta, apex) = interpolate_apex(y0, y1, y2);
        (first as f64 + delta, apex)
    } else if last == first + 1 {
        // Two-sample plateau: same three-point fit about the left sample,
        // using the falling edge on the right.
        let (y0, y1, y2) = (y(first - 1), y(first), y(last));
        let (delta, apex) = interpolate_apex(y0, y1, y2);
        (first as f64 + delta, apex)
    } else {
        ((first + last) as f64 / 2.0, y(first))
    };
    let half = amplitude / 2.0;
    let n = waveform.len();

    let mut k = first;
    let left = loop {
        if k == 0 {
            break 0.0;
        }
        let (a, b) = (y(k - 1), y(k));
        if a < half {
            break (k - 1) as f64 + (half - a) / (b - a);
        }
        if a > b {
            break k as f64;
        }
        k -= 1;
    };
    let mut right = (n - 1) as f64;
    let mut k = last;
    while k + 1 < n {
        let (a, b) = (y(k), y(k + 1));
        if b < half {
            right = k as f64 + (a - half) / (a - b);
            break;
        }
        if b > a {
            right = k as f64;
            break;
        }
        k += 1;
    }
    let width = (right - left).max(f64::EPSILON);
    Peak {
        row: 0,
        col: 0,
        position: position.clamp(0.0, (n - 1) as f64),
        amplitude,
        width,
        label: PeakClass::Noise,
    }
}

/// Sub-bin offset and apex value of the maximum through three samples.
fn interpolate_apex(y0: f64, y1: f64, y2: f64) -> (f64, f64) {
    if y0 > 0.0 && y2 > 0.0 {
        let (l0, l1, l2) = (y0.ln(), y1.ln(), y2.ln());
        let denom = l0 - 2.0 * l1 + l2;
        if denom < 0.0 {
            let delta = 0.5 * (l0 - l2) / denom;
            return (delta, (l1 - 0.25 * (l0 - l2) * delta).exp());
        }
    }
    let denom = y0 - 2.0 * y1 + y2;
    if denom < 0.0 {
        let delta = 0.5 * (y0 - y2) / denom;
        (delta, y1 - 0.25 * (y0 - y2) * delta)
    } else {
        (0.0, y1)
    }
}

/// Peaks of every pixel of a frame, positions in the frame's own bins.
pub fn detect_frame_peaks(frame: &FwlFrame, threshold: f64) -> Vec<Peak> {
    let dims = frame.dims();
    let mut out = Vec::new();
    for h in 0..dims.h {
        for w in 0..dims.w {
            out.extend(detect_peaks(frame.waveform(h, w), threshold).into_iter().map(|mut p| {
                p.row = h;
                p.col = w;
                p
            }));
        }
    }
    out
}

/// The `k` strongest peaks of a histogram, returned in position order.
///
/// `k = 2` is the dual-return mode of commercial sensors, `k = 3` multi-return.
pub fn select_strongest<V: Copy + Into<f64>>(waveform: &[V], k: usize, threshold: f64) -> Vec<Peak> {
    assert!(k >= 1, "k must be >= 1");
    let mut peaks = detect_peaks(waveform, threshold);
    if peaks.len() > k {
        let mut order: Vec<usize> = (0..peaks.len()).collect();
        // Stable: equal amplitudes keep the nearer peak.
        order.sort_by(|&a, &b| peaks[b].amplitude.total_cmp(&peaks[a].amplitude));
        let mut keep: Vec<usize> = order[..k].to_vec();
        keep.sort_unstable();
        peaks = keep.into_iter().map(|i| peaks[i]).collect();
    }
    peaks
}

/// Element-wise mean of frames captured from one viewpoint.
pub fn accumulate(frames: &[FwlFrame]) -> Result<FwlFrame> {
    let first = frames
        .first()
        .ok_or_else(|| FwlError::Empty("accumulate needs at least one frame".into()))?;
    let dims = first.dims();
    for f in &frames[1..] {
        if f.dims() != dims {
            return Err(FwlError::DimMismatch(format!(
                "frame {} is {} but {} was expected",
                f.frame_id,
                f.dims(),
                dims
            )));
        }
        if !f.pose.approx_eq(&first.pose, 1e-9) {
            return Err(FwlError::DimMismatch(format!(
                "frame {} was captured from a different pose",
                f.frame_id
            )));
        }
        if f.t_index_map() != first.t_index_map() {
            return Err(FwlError::DimMismatch("frames use different bin index maps".into()));
        }
    }
    let n = frames.len() as f64;
    let mut sum = vec![0.0f64; dims.len()];
    for f in frames {
        for (s, &v) in sum.iter_mut().zip(f.values()) {
            *s += v as f64;
        }
    }
    let values = sum.into_iter().map(|s| (s / n) as f32).collect();
    let mut out = FwlFrame::from_values(dims, values)?
        .with_pose(first.pose)
        .with_id(first.frame_id.clone());
    out.set_index_map_unchecked(first.t_index_map().map(<[usize]>::to_vec));
    Ok(out)
}

/// Crop / downsample / tiling parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Rows removed at the top and again at the bottom.
    pub row_crop: usize,
    /// Leading bins removed (internal reflections).
    pub front_bin_crop: usize,
    /// Bins kept after uniform index selection.
    pub target_t: usize,
    /// Spatial tile edge for inference.
    pub tile_hw: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            row_crop: 90,
            front_bin_crop: 25,
            target_t: 256,
            tile_hw: 128,
        }
    }
}

/// Output geometry of [`preprocess`] for a given input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessPlan {
    pub input: Dims,
    pub output: Dims,
    pub row_crop: usize,
    /// Original bin of every retained bin.
    pub index_map: Vec<usize>,
}

impl PreprocessPlan {
    pub fn new(input: Dims, spec: &PreprocessSpec) -> Result<Self> {
        if 2 * spec.row_crop >= input.h {
            return Err(FwlError::config(
                "row_crop",
                format!("2 x {} rows cannot be removed from {} rows", spec.row_crop, input.h),
            ));
        }
        if spec.front_bin_crop >= input.t {
            return Err(FwlError::config("front_bin_crop", "removes every bin"));
        }
        let t_eff = input.t - spec.front_bin_crop;
        if spec.target_t == 0 || spec.target_t > t_eff {
            return Err(FwlError::config(
                "target_t",
                format!("must lie in [1, {t_eff}] (bins after the front crop)"),
            ));
        }
        if spec.tile_hw == 0 {
            return Err(FwlError::config("tile_hw", "must be >= 1"));
        }
        let index_map = uniform_index_map(spec.front_bin_crop, t_eff, spec.target_t);
        Ok(Self {
            input,
            output: Dims::new(input.h - 2 * spec.row_crop, input.w, spec.target_t),
            row_crop: spec.row_crop,
            index_map,
        })
    }
}

/// `offset + round(k (t_eff - 1) / (target - 1))` for `k in 0..target`,
/// rounding halves up, in exact integer arithmetic.
pub fn uniform_index_map(offset: usize, t_eff: usize, target: usize) -> Vec<usize> {
    if target == 1 {
        return vec![offset];
    }
    let num = (t_eff - 1) as u64;
    let den = (target - 1) as u64;
    (0..target as u64)
        .map(|k| offset + ((2 * k * num + den) / (2 * den)) as usize)
        .collect()
}

/// Crops rows and leading bins, then keeps `target_t` uniformly spaced bins.
///
/// The returned frame's index map points into the input's original bins,
/// composing with any map the input already carries.
pub fn preprocess(frame: &FwlFrame, spec: &PreprocessSpec) -> Result<FwlFrame> {
    let plan = PreprocessPlan::new(frame.dims(), spec)?;
    apply_plan(frame, &plan)
}

pub fn apply_plan(frame: &FwlFrame, plan: &PreprocessPlan) -> Result<FwlFrame> {
    if frame.dims() != plan.input {
        return Err(FwlError::DimMismatch(format!(
            "plan built for {} applied to {}",
            plan.input,
            frame.dims()
        )));
    }
    let out_dims = plan.output;
    let mut values = Vec::with_capacity(out_dims.len());
    for h in 0..out_dims.h {
        for w in 0..out_dims.w {
            let src = frame.waveform(h + plan.row_crop, w);
            values.extend(plan.index_map.iter().map(|&t| src[t]));
        }
    }
    let map = match frame.t_index_map() {
        None => plan.index_map.clone(),
        Some(prev) => plan.index_map.iter().map(|&t| prev[t]).collect(),
    };
    FwlFrame::from_values(out_dims, values)?
        .with_pose(frame.pose)
        .with_id(frame.frame_id.clone())
        .with_index_map(map)
}

/// Placement of non-overlapping square tiles over a zero-padded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub tile_hw: usize,
    /// Row-major `(h0, w0)` of every tile.
    pub origins: Vec<(usize, usize)>,
    pub padded_h: usize,
    pub padded_w: usize,
    pub original_h: usize,
    pub original_w: usize,
}

impl TileLayout {
    pub fn new(h: usize, w: usize, tile_hw: usize) -> Result<Self> {
        if tile_hw == 0 {
            return Err(FwlError::config("tile_hw", "must be >= 1"));
        }
        let padded_h = h.div_ceil(tile_hw) * tile_hw;
        let padded_w = w.div_ceil(tile_hw) * tile_hw;
        let origins = (0..padded_h / tile_hw)
            .flat_map(|i| (0..padded_w / tile_hw).map(move |j| (i * tile_hw, j * tile_hw)))
            .collect();
        Ok(Self {
            tile_hw,
            origins,
            padded_h,
            padded_w,
            original_h: h,
            original_w: w,
        })
    }
}

/// Splits a frame into `tile_hw x tile_hw` tiles starting at `(0, 0)`;
/// pixels beyond the frame are zero.
pub fn tile(frame: &FwlFrame, tile_hw: usize) -> Result<(Vec<FwlFrame>, TileLayout)> {
    let dims = frame.dims();
    let layout = TileLayout::new(dims.h, dims.w, tile_hw)?;
    let tdims = Dims::new(tile_hw, tile_hw, dims.t);
    let mut tiles = Vec::with_capacity(layout.origins.len());
    for &(h0, w0) in &layout.origins {
        let mut values = vec![0.0f32; tdims.len()];
        for dh in 0..tile_hw.min(dims.h.saturating_sub(h0)) {
            for dw in 0..tile_hw.min(dims.w.saturating_sub(w0)) {
                let o = tdims.offset(dh, dw, 0);
                values[o..o + dims.t].copy_from_slice(frame.waveform(h0 + dh, w0 + dw));
            }
        }
        let mut t = FwlFrame::from_values(tdims, values)?
            .with_pose(frame.pose)
            .with_id(format!("{}@{h0},{w0}", frame.frame_id));
        t.set_index_map_unchecked(frame.t_index_map().map(<[usize]>::to_vec));
        tiles.push(t);
    }
    Ok((tiles, layout))
}

/// Splits a label volume on the same layout as [`tile`]; padding is Noise.
pub fn tile_labels(labels: &LabelVolume, tile_hw: usize) -> Result<Vec<LabelVolume>> {
    let dims = labels.dims();
    let layout = TileLayout::new(dims.h, dims.w, tile_hw)?;
    let tdims = Dims::new(tile_hw, tile_hw, dims.t);
    let mut out = Vec::with_capacity(layout.origins.len());
    for &(h0, w0) in &layout.origins {
        let mut t = LabelVolume::noise(tdims);
        for dh in 0..tile_hw.min(dims.h.saturating_sub(h0)) {
            for dw in 0..tile_hw.min(dims.w.saturating_sub(w0)) {
                for (k, &c) in labels.column(h0 + dh, w0 + dw).iter().enumerate() {
                    t.set(dh, dw, k, c);
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Reassembles tiles into the unpadded frame.
pub fn untile(tiles: &[FwlFrame], layout: &TileLayout) -> Result<FwlFrame> {
    check_tiles(tiles.iter().map(FwlFrame::dims), layout)?;
    let t = tiles.first().map_or(0, |f| f.dims().t);
    let dims = Dims::new(layout.original_h, layout.original_w, t);
    let mut out = FwlFrame::zeros(dims);
    for (tile, &(h0, w0)) in tiles.iter().zip(&layout.origins) {
        for dh in 0..layout.tile_hw.min(dims.h.saturating_sub(h0)) {
            for dw in 0..layout.tile_hw.min(dims.w.saturating_sub(w0)) {
                for (k, &v) in tile.waveform(dh, dw).iter().enumerate() {
                    out.set(h0 + dh, w0 + dw, k, v);
                }
            }
        }
    }
    out.pose = tiles[0].pose;
    out.set_index_map_unchecked(tiles[0].t_index_map().map(<[usize]>::to_vec));
    Ok(out)
}

fn check_tiles(dims: impl Iterator<Item = Dims>, layout: &TileLayout) -> Result<()> {
    let dims: Vec<Dims> = dims.collect();
    if dims.len() != layout.origins.len() {
        return Err(FwlError::DimMismatch(format!(
            "{} tiles for a layout of {}",
            dims.len(),
            layout.origins.len()
        )));
    }
    if let Some(d) = dims
        .iter()
        .find(|d| d.h != layout.tile_hw || d.w != layout.tile_hw || d.t != dims[0].t)
    {
        return Err(FwlError::DimMismatch(format!(
            "tile {d} does not match {}x{} tiles",
            layout.tile_hw, layout.tile_hw
        )));
    }
    Ok(())
}

/// Reassembles per-tile labels and spreads them back over the original bins.
///
/// The label of downsampled bin `k` lands on original bin `t_index_map[k]`;
/// every other bin is [`PeakClass::Noise`], so the upsampled volume never holds
/// more predicted voxels than the downsampled one.
pub fn merge_and_upsample(
    tile_labels: &[LabelVolume],
    layout: &TileLayout,
    t_index_map: &[usize],
    original_t: usize,
) -> Result<LabelVolume> {
    check_tiles(tile_labels.iter().map(LabelVolume::dims), layout)?;
    let small_t = tile_labels.first().map_or(0, |l| l.dims().t);
    if t_index_map.len() != small_t {
        return Err(FwlError::DimMismatch(format!(
            "index map has {} entries for {small_t} bins",
            t_index_map.len()
        )));
    }
    if t_index_map.windows(2).any(|w| w[1] <= w[0]) || t_index_map.last().is_some_and(|&t| t >= original_t) {
        return Err(FwlError::Domain(format!(
            "index map must be strictly increasing and below {original_t}"
        )));
    }
    let dims = Dims::new(layout.original_h, layout.original_w, original_t);
    let mut out = LabelVolume::noise(dims);
    for (tile, &(h0, w0)) in tile_labels.iter().zip(&layout.origins) {
        for dh in 0..layout.tile_hw.min(dims.h.saturating_sub(h0)) {
            for dw in 0..layout.tile_hw.min(dims.w.saturating_sub(w0)) {
                for (k, &c) in tile.column(dh, dw).iter().enumerate() {
                    out.set(h0 + dh, w0 + dw, t_index_map[k], c);
                }
            }
        }
    }
    out.sampled_bins = Some(t_index_map.to_vec());
    Ok(out)
}

/// Restores rows removed by the row crop, filling them with Noise.
pub fn uncrop_rows(labels: &LabelVolume, row_crop: usize) -> LabelVolume {
    let d = labels.dims();
    let dims = Dims::new(d.h + 2 * row_crop, d.w, d.t);
    let mut out = LabelVolume::noise(dims);
    for h in 0..d.h {
        for w in 0..d.w {
            for (t, &c) in labels.column(h, w).iter().enumerate() {
                out.set(h + row_crop, w, t, c);
            }
        }
    }
    out.t_index_map = labels.t_index_map.clone();
    out.sampled_bins = labels.sampled_bins.clone();
    out
}

/// Downsamples a label volume along T by index selection.
pub fn select_label_bins(labels: &LabelVolume, plan: &PreprocessPlan) -> Result<LabelVolume> {
    if labels.dims() != plan.input {
        return Err(FwlError::DimMismatch(format!(
            "labels {} do not match plan input {}",
            labels.dims(),
            plan.input
        )));
    }
    let out = plan.output;
    let mut v = Vec::with_capacity(out.len());
    for h in 0..out.h {
        for w in 0..out.w {
            let col = labels.column(h + plan.row_crop, w);
            v.extend(plan.index_map.iter().map(|&t| col[t]));
        }
    }
    let mut lv = LabelVolume::from_labels(out, v)?;
    lv.t_index_map = Some(plan.index_map.clone());
    Ok(lv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, comps: &[(f64, f64, f64)]) -> Vec<f64> {
        (0..n)
            .map(|t| {
                comps
                    .iter()
                    .map(|&(a, t0, s)| a * (-((t as f64 - t0).powi(2)) / (2.0 * s * s)).exp())
                    .sum()
            })
            .collect()
    }

    /// Half-maximum crossings of the continuous pulse found by dense scanning.
    fn scanned_fwhm(a: f64, t0: f64, sigma: f64) -> f64 {
        let step = 1e-4;
        let f = |t: f64| a * (-(t - t0).powi(2) / (2.0 * sigma * sigma)).exp();
        let mut t = t0;
        while f(t) >= a / 2.0 {
            t += step;
        }
        2.0 * (t - t0)
    }

    #[test]
    fn zero_and_flat_waveforms_have_no_peaks() {
        assert!(detect_peaks(&[0.0f64; 64], 0.1).is_empty());
        assert!(detect_peaks(&[3.0f64; 64], 0.1).is_empty());
        assert!(detect_peaks::<f64>(&[], 0.1).is_empty());
    }

    #[test]
    fn single_gaussian_recovered() {
        let w = gaussian(700, &[(50.0, 100.0, 2.0)]);
        let peaks = detect_peaks(&w, 1.0);
        assert_eq!(peaks.len(), 1);
        let p = peaks[0];
        let oracle = scanned_fwhm(50.0, 100.0, 2.0);
        assert!((oracle - 2.0 * (2.0 * 2f64.ln()).sqrt() * 2.0).abs() < 1e-3);
        assert!((p.position - 100.0).abs() < 0.05);
        assert!((p.amplitude - 50.0).abs() < 0.5);
        assert!((p.width - 4.71).abs() < 0.3, "{}", p.width);
    }

    #[test]
    fn two_gaussians_in_order() {
        let w = gaussian(256, &[(20.0, 120.0, 2.0), (30.0, 60.0, 2.0)]);
        let peaks = detect_peaks(&w, 1.0);
        // Brute-force local maximum scan.
        let maxima: Vec<usize> = (1..255).filter(|&i| w[i] > w[i - 1] && w[i] > w[i + 1] && w[i] > 1.0).collect();
        assert_eq!(maxima, vec![60, 120]);
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].position - 60.0).abs() < 0.05);
        assert!((peaks[1].position - 120.0).abs() < 0.05);
    }

    #[test]
    fn plateau_is_one_peak() {
        let w = [0.0, 1.0, 3.0, 3.0, 3.0, 1.0, 0.0];
        let p = detect_peaks(&w, 0.5);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].position, 3.0);
        // Rising plateau is not a maximum.
        assert!(detect_peaks(&[0.0, 2.0, 2.0, 3.0, 1.0], 0.5).len() == 1);
    }

    #[test]
    fn threshold_is_strict() {
        let w = gaussian(64, &[(5.0, 30.0, 2.0)]);
        assert_eq!(detect_peaks(&w, 4.99).len(), 1);
        assert!(detect_peaks(&w, 5.0).is_empty());
    }

    #[test]
    fn select_strongest_examples() {
        let w = gaussian(200, &[(5.0, 40.0, 2.0), (9.0, 90.0, 2.0), (3.0, 150.0, 2.0)]);
        let one = gaussian(200, &[(5.0, 40.0, 2.0)]);
        assert_eq!(select_strongest(&one, 2, 0.5).len(), 1);
        let two = select_strongest(&w, 2, 0.5);
        assert_eq!(two.len(), 2);
        assert!((two[0].amplitude - 5.0).abs() < 0.05);
        assert!((two[1].amplitude - 9.0).abs() < 0.05);
    }

    #[test]
    fn select_strongest_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let comps: Vec<(f64, f64, f64)> = (0..20)
                .map(|i| (rng.random_range(1.0..50.0), 15.0 + 30.0 * i as f64, 2.0))
                .collect();
            let w = gaussian(640, &comps);
            let all = detect_peaks(&w, 0.5);
            assert_eq!(all.len(), 20);
            let mut amps: Vec<f64> = all.iter().map(|p| p.amplitude).collect();
            amps.sort_by(|a, b| b.total_cmp(a));
            let mut got: Vec<f64> = select_strongest(&w, 3, 0.5).iter().map(|p| p.amplitude).collect();
            got.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(got, amps[..3].to_vec());
        }
    }

    #[test]
    fn accumulate_examples() {
        let dims = Dims::new(2, 2, 3);
        let a = FwlFrame::from_values(dims, vec![2.0; 12]).unwrap();
        let b = FwlFrame::from_values(dims, vec![4.0; 12]).unwrap();
        assert_eq!(accumulate(std::slice::from_ref(&a)).unwrap(), a);
        assert!(accumulate(&[a.clone(), b.clone()]).unwrap().values().iter().all(|&v| v == 3.0));
        assert!(accumulate(&[]).is_err());
        let c = FwlFrame::zeros(Dims::new(2, 2, 4));
        assert!(accumulate(&[a.clone(), c]).is_err());
        let moved = b.with_pose(crate::geometry::Pose::from_translation(1.0, 0.0, 0.0));
        assert!(accumulate(&[a, moved]).is_err());
    }

    #[test]
    fn default_preprocess_dims() {
        let plan = PreprocessPlan::new(Dims::new(512, 400, 700), &PreprocessSpec::default()).unwrap();
        assert_eq!(plan.output, Dims::new(332, 400, 256));
        assert_eq!(plan.index_map[0], 25);
        assert_eq!(*plan.index_map.last().unwrap(), 699);
        assert!(plan.index_map.windows(2).all(|w| w[1] > w[0]));
        // Formula evaluation with floating-point rounding.
        for (k, &t) in plan.index_map.iter().enumerate() {
            assert_eq!(t, 25 + (k as f64 * 674.0 / 255.0).round() as usize);
        }
    }

    #[test]
    fn identity_preprocess() {
        let dims = Dims::new(3, 2, 6);
        let f = FwlFrame::from_values(dims, (0..36).map(|v| v as f32).collect()).unwrap();
        let spec = PreprocessSpec {
            row_crop: 0,
            front_bin_crop: 0,
            target_t: 6,
            tile_hw: 4,
        };
        let out = preprocess(&f, &spec).unwrap();
        assert_eq!(out.values(), f.values());
        assert_eq!(out.t_index_map().unwrap(), &[0, 1, 2, 3, 4, 5]);
        let bad = PreprocessSpec { target_t: 7, ..spec.clone() };
        assert!(preprocess(&f, &bad).is_err());
        let bad = PreprocessSpec { row_crop: 2, ..spec };
        assert!(preprocess(&f, &bad).is_err());
    }

    #[test]
    fn tiling_counts_and_round_trip() {
        let f = FwlFrame::zeros(Dims::new(128, 128, 2));
        let (tiles, layout) = tile(&f, 128).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((layout.padded_h, layout.padded_w), (128, 128));

        let layout = TileLayout::new(332, 400, 128).unwrap();
        assert_eq!(layout.origins.len(), 12);
        assert_eq!((layout.padded_h, layout.padded_w), (384, 512));

        let dims = Dims::new(7, 5, 3);
        let f = FwlFrame::from_values(dims, (0..dims.len()).map(|v| v as f32 + 1.0).collect()).unwrap();
        let (tiles, layout) = tile(&f, 3).unwrap();
        assert_eq!(tiles.len(), 3 * 2);
        // Padding is zero.
        assert_eq!(tiles[5].get(2, 2, 0), 0.0);
        assert_eq!(untile(&tiles, &layout).unwrap().values(), f.values());
    }

    #[test]
    fn label_tiles_follow_frame_tiles() {
        let dims = Dims::new(5, 4, 3);
        let classes = PeakClass::TRAINABLE;
        let lv = LabelVolume::from_labels(dims, (0..dims.len()).map(|i| classes[i % 4]).collect()).unwrap();
        let tiles = tile_labels(&lv, 3).unwrap();
        assert_eq!(tiles.len(), 2 * 2);
        let layout = TileLayout::new(5, 4, 3).unwrap();
        for (t, &(h0, w0)) in tiles.iter().zip(&layout.origins) {
            for dh in 0..3 {
                for dw in 0..3 {
                    let expect: Vec<PeakClass> = if h0 + dh < 5 && w0 + dw < 4 {
                        lv.column(h0 + dh, w0 + dw).to_vec()
                    } else {
                        vec![PeakClass::Noise; 3]
                    };
                    assert_eq!(t.column(dh, dw), &expect[..]);
                }
            }
        }
    }

    #[test]
    fn merge_single_tile_identity() {
        let dims = Dims::new(4, 4, 5);
        let mut lv = LabelVolume::noise(dims);
        lv.set(1, 2, 3, PeakClass::Ghost);
        let layout = TileLayout::new(4, 4, 4).unwrap();
        let out = merge_and_upsample(std::slice::from_ref(&lv), &layout, &[0, 1, 2, 3, 4], 5).unwrap();
        assert_eq!(out.labels(), lv.labels());
        assert!(merge_and_upsample(&[lv.clone(), lv.clone()], &layout, &[0, 1, 2, 3, 4], 5).is_err());
        assert!(merge_and_upsample(&[lv], &layout, &[0, 1, 2, 3], 5).is_err());
    }

    #[test]
    fn upsample_keeps_slot_count() {
        let plan = PreprocessPlan::new(Dims::new(512, 4, 700), &PreprocessSpec::default()).unwrap();
        let small = LabelVolume::filled(Dims::new(332, 4, 256), PeakClass::Ghost);
        let (_, layout) = tile(&FwlFrame::zeros(Dims::new(332, 4, 1)), 128).unwrap();
        let mut tiles = Vec::new();
        for _ in &layout.origins {
            tiles.push(LabelVolume::filled(Dims::new(128, 128, 256), PeakClass::Ghost));
        }
        let _ = small;
        let out = merge_and_upsample(&tiles, &layout, &plan.index_map, 700).unwrap();
        for h in 0..332 {
            for w in 0..4 {
                let n = out.column(h, w).iter().filter(|&&c| c != PeakClass::Noise).count();
                assert_eq!(n, 256);
            }
        }
        // Same count against the bins left after the front crop.
        let rel: Vec<usize> = plan.index_map.iter().map(|t| t - 25).collect();
        let out = merge_and_upsample(&tiles, &layout, &rel, 675).unwrap();
        assert_eq!(out.count(PeakClass::Ghost), 332 * 4 * 256);
    }

    proptest! {
        #[test]
        fn noiseless_gaussians_recovered(sigma in 1.5f64..=6.0, t0 in 40.0f64..200.0, a in 1.0f64..100.0) {
            let w = gaussian(256, &[(a, t0, sigma)]);
            let peaks = detect_peaks(&w, a * 0.1);
            prop_assert_eq!(peaks.len(), 1);
            let p = peaks[0];
            let fwhm = 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma;
            prop_assert!((p.position - t0).abs() < 0.05);
            prop_assert!((p.amplitude - a).abs() < 0.01 * a);
            prop_assert!((p.width - fwhm).abs() < 0.3, "w={} fwhm={}", p.width, fwhm);
        }

        #[test]
        fn accumulate_is_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(0.0f32..1000.0, 8), 1..6),
            seed in 0u64..1000,
        ) {
            let dims = Dims::new(2, 2, 2);
            let frames: Vec<FwlFrame> = vals.iter().map(|v| FwlFrame::from_values(dims, v.clone()).unwrap()).collect();
            let mut shuffled = frames.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let (a, b) = (accumulate(&frames).unwrap(), accumulate(&shuffled).unwrap());
            prop_assert_eq!(a.values(), b.values());
        }

        #[test]
        fn index_maps_strictly_increase(front in 0usize..50, t_eff in 1usize..800, frac in 0.0f64..=1.0) {
            let target = ((t_eff as f64 * frac).floor() as usize).clamp(1, t_eff);
            let map = uniform_index_map(front, t_eff, target);
            prop_assert_eq!(map.len(), target);
            prop_assert_eq!(map[0], front);
            if target > 1 {
                prop_assert_eq!(*map.last().unwrap(), front + t_eff - 1);
            }
            prop_assert!(map.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
