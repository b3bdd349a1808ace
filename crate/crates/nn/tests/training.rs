use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fwl_core::frame::peak_to_point;
use fwl_core::metrics::{ghost_recall, ghost_removal_rate};
use fwl_core::signal::{apply_plan, detect_peaks, PreprocessPlan, PreprocessSpec};
use fwl_core::synth::{synth_frame, Material, Scene, Surface};
use fwl_core::{Dims, FwlFrame, LabelVolume, Peak, PeakClass, Pose, SensorConfig};

use fwl_nn::checkpoint::{decode_model, encode_model, load_model, save_model};
use fwl_nn::infer::{classify_tile, infer, remove_ghosts};
use fwl_nn::model::{MaeConfig, Model};
use fwl_nn::targets::{input_tensor, mae_loss, mask_spatial, probs_to_labels, voxel_labels};
use fwl_nn::train::{finetune, pretrain, TrainConfig};
use fwl_nn::{NnError, Tensor};

fn toy_cfg() -> MaeConfig {
    MaeConfig {
        input: [8, 8, 16],
        patch: [4, 4, 16],
        d_enc: 12,
        d_dec: 8,
        heads: 2,
        input_scale: 0.1,
        peak_threshold: 0.2,
        ..MaeConfig::default()
    }
}

/// Two sloped planes per frame: a near "object" and a far, weaker "ghost".
fn toy_frame(seed: u64) -> (FwlFrame, LabelVolume, Vec<Peak>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(8, 8, 16);
    let mut f = FwlFrame::zeros(dims);
    let mut peaks = Vec::new();
    let (c0, slope) = (rng.random_range(2.0..5.0), rng.random_range(-0.2..0.2));
    let g0 = rng.random_range(9.0..12.0);
    let ghost_cols = rng.random_range(2..6);
    for h in 0..8 {
        for w in 0..8 {
            let c = c0 + slope * (h + w) as f64;
            let mut wave: Vec<f64> = (0..16).map(|k| 20.0 * (-0.5 * ((k as f64 - c) / 1.0).powi(2)).exp()).collect();
            peaks.push(Peak { row: h, col: w, position: c, amplitude: 20.0, width: 2.3548, label: PeakClass::Object });
            if w < ghost_cols {
                wave.iter_mut()
                    .enumerate()
                    .for_each(|(k, v)| *v += 8.0 * (-0.5 * ((k as f64 - g0) / 1.0).powi(2)).exp());
                peaks.push(Peak { row: h, col: w, position: g0, amplitude: 8.0, width: 2.3548, label: PeakClass::Ghost });
            }
            for v in wave.iter_mut() {
                *v += rng.random_range(0.0..0.5);
            }
            f.set_waveform(h, w, &wave);
        }
    }
    let labels = fwl_core::annotate::expand_labels_fwhm(&peaks, dims);
    (f, labels, peaks)
}

fn tc(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_loss_decreases_and_is_reproducible() {
    let frames: Vec<FwlFrame> = (0..20).map(|s| toy_frame(s).0).collect();
    let mut a = Model::new(toy_cfg(), 1).unwrap();
    let la = pretrain(&mut a, &frames, &tc(10, 3)).unwrap();
    let fixed: Vec<f64> = la.iter().map(|l| l.fixed_mask_loss.unwrap()).collect();
    for w in fixed.windows(2) {
        assert!(w[1] < w[0], "{fixed:?}");
    }
    let mut b = Model::new(toy_cfg(), 1).unwrap();
    let lb = pretrain(&mut b, &frames, &tc(10, 3)).unwrap();
    assert_eq!(la, lb);
    for i in 0..a.params.len() {
        assert_eq!(a.params.get(i).data, b.params.get(i).data);
    }
}

#[test]
fn trained_reconstruction_beats_dataset_mean() {
    let cfg = toy_cfg();
    let frames: Vec<FwlFrame> = (0..20).map(|s| toy_frame(s).0).collect();
    let mut model = Model::new(cfg.clone(), 2).unwrap();
    pretrain(&mut model, &frames, &tc(40, 4)).unwrap();
    let inputs: Vec<Tensor> = frames.iter().map(|f| input_tensor(f, &cfg).unwrap()).collect();
    let mean = inputs.iter().flat_map(|t| t.data.iter()).sum::<f64>() / (inputs.len() * inputs[0].len()) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut model_mse, mut mean_mse) = (0.0, 0.0);
    for x in &inputs {
        let split = mask_spatial(4, 1, cfg.mask_ratio, &mut rng).unwrap();
        let mut g = model.graph();
        let (_, terms) = mae_loss(&model, &mut g, x, &split).unwrap();
        model_mse += terms.recon;
        let idx = fwl_nn::graph::patch_index(cfg.input, cfg.patch).unwrap();
        let p = cfg.patch_voxels();
        let e: f64 = split
            .masked
            .iter()
            .flat_map(|&m| idx[m * p..(m + 1) * p].iter())
            .map(|&i| (x.data[i] - mean).powi(2))
            .sum();
        mean_mse += e / (split.masked.len() * p) as f64;
    }
    assert!(model_mse < mean_mse, "model {model_mse} vs mean {mean_mse}");
}

#[test]
fn finetuning_touches_only_the_head_and_improves_recall() {
    let cfg = toy_cfg();
    let data: Vec<(FwlFrame, LabelVolume, Vec<Peak>)> = (0..24).map(toy_frame).collect();
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    let frames: Vec<FwlFrame> = data.iter().map(|d| d.0.clone()).collect();
    pretrain(&mut model, &frames, &tc(5, 1)).unwrap();
    let before = model.clone();

    // Head-only gradients are nonzero, encoder gradients absent.
    let mut probe = model.clone();
    probe.freeze_all_but_head();
    let mut g = probe.graph();
    let feats = probe.features(&input_tensor(&data[0].0, &cfg).unwrap()).unwrap();
    let f = g.input(feats, false);
    let p = probe.classify_head(&mut g, f, None).unwrap();
    let l = g.focal(p, voxel_labels(&data[0].1, &cfg).unwrap(), fwl_nn::targets::FOCAL_ALPHA.to_vec(), 2.0).unwrap();
    let grads = g.backward(l);
    for i in 0..probe.params.len() {
        let head = probe.params.name(i).starts_with("cls.");
        match grads.param(i) {
            Some(t) => assert!(head && t.norm() > 0.0, "{}", probe.params.name(i)),
            None => assert!(!head, "{}", probe.params.name(i)),
        }
    }

    let train: Vec<(FwlFrame, LabelVolume)> = data[..20].iter().map(|d| (d.0.clone(), d.1.clone())).collect();
    finetune(&mut model, &train, &tc(30, 2)).unwrap();
    for i in 0..model.params.len() {
        let same = model.params.get(i).data == before.params.get(i).data;
        assert_eq!(same, !model.params.name(i).starts_with("cls."), "{}", model.params.name(i));
        assert!(!model.params.is_frozen(i));
    }

    let recall = |m: &Model| {
        let (mut hit, mut n) = (0.0, 0.0);
        for (f, _, peaks) in &data[20..] {
            let pred = fwl_nn::infer::classify_tile(m, f, 0.5).unwrap();
            let g = peaks.iter().filter(|p| p.label == PeakClass::Ghost).count() as f64;
            hit += ghost_recall(&pred, peaks).unwrap().unwrap_or(0.0) * g;
            n += g;
        }
        hit / n
    };
    let (r0, r1) = (recall(&before), recall(&model));
    assert!(r1 > r0, "untrained head {r0}, fine-tuned {r1}");
}

#[test]
fn oracle_probabilities_reproduce_labels() {
    let cfg = toy_cfg();
    let (_, labels, _) = toy_frame(3);
    let vl = voxel_labels(&labels, &cfg).unwrap();
    let c = cfg.classes;
    let mut probs = vec![0.0; vl.len() * c];
    for (v, l) in vl.iter().enumerate() {
        match l {
            Some(k) => probs[v * c + k] = 1.0,
            None => probs[v * c..(v + 1) * c].iter_mut().for_each(|p| *p = 0.25),
        }
    }
    let t = Tensor::new(vec![cfg.n_patches(), cfg.patch_voxels() * c], probs).unwrap();
    assert_eq!(probs_to_labels(&t, &cfg, 0.5).unwrap().labels(), labels.labels());
    let flat = Tensor::filled(&[cfg.n_patches(), cfg.patch_voxels() * c], 0.25);
    assert_eq!(probs_to_labels(&flat, &cfg, 0.5).unwrap().count(PeakClass::Undefined), 8 * 8 * 16);
}

#[test]
fn tiled_inference_matches_single_tile_classification() {
    let cfg = toy_cfg();
    let model = Model::new(cfg.clone(), 7).unwrap();
    let spec = PreprocessSpec {
        row_crop: 1,
        front_bin_crop: 2,
        target_t: 16,
        tile_hw: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = Dims::new(10, 8, 40);
    let raw = FwlFrame::from_values(dims, (0..dims.len()).map(|_| rng.random_range(0.0..30.0)).collect()).unwrap();
    let out = infer(&raw, &model, &spec, 0.3).unwrap();
    assert_eq!(out.dims(), dims);

    let plan = PreprocessPlan::new(dims, &spec).unwrap();
    let pre = apply_plan(&raw, &plan).unwrap();
    let direct = classify_tile(&model, &pre, 0.3).unwrap();
    for h in 0..dims.h {
        for w in 0..dims.w {
            for t in 0..dims.t {
                let want = match plan.index_map.iter().position(|&b| b == t) {
                    Some(k) if (1..9).contains(&h) => direct.get(h - 1, w, k),
                    _ => PeakClass::Noise,
                };
                assert_eq!(out.get(h, w, t), want, "({h}, {w}, {t})");
            }
        }
    }
    // Model and tile geometry must agree.
    let bad = PreprocessSpec { tile_hw: 4, ..spec };
    assert!(matches!(infer(&raw, &model, &bad, 0.5), Err(NnError::Config(_))));
}

fn glass_scene() -> (Scene, SensorConfig) {
    let post = Surface::new(
        "wall",
        nalgebra::Vector3::new(-2.0, 0.0, 0.0),
        nalgebra::Vector3::x(),
        [6.0, 4.0],
        Material::Opaque { reflectance: 0.9 },
    )
    .unwrap();
    let pane = Surface::new(
        "pane",
        nalgebra::Vector3::new(4.0, 0.0, 0.0),
        -nalgebra::Vector3::x(),
        [2.0, 2.0],
        Material::glass(0.4, 0.5),
    )
    .unwrap();
    let back = Surface::new(
        "back",
        nalgebra::Vector3::new(8.0, 0.0, 0.0),
        -nalgebra::Vector3::x(),
        [10.0, 6.0],
        Material::Opaque { reflectance: 0.5 },
    )
    .unwrap();
    let mut cfg = SensorConfig::with_raster(12, 16, 128);
    cfg.h_fov_deg = 90.0;
    cfg.v_fov_deg = 60.0;
    (Scene::new(vec![post, pane, back]), cfg)
}

#[test]
fn ghost_removal_with_extreme_and_oracle_labels() {
    let (scene, cfg) = glass_scene();
    let sf = synth_frame(&scene, &Pose::identity(), &cfg, 0).unwrap();
    let dims = sf.frame.dims();
    let thr = 0.5;
    assert!(remove_ghosts(&sf.frame, &LabelVolume::filled(dims, PeakClass::Ghost), thr, &cfg).unwrap().is_empty());

    let mut unfiltered = Vec::new();
    for h in 0..dims.h {
        for w in 0..dims.w {
            for mut p in detect_peaks(sf.frame.waveform(h, w), thr) {
                p.row = h;
                p.col = w;
                p.label = PeakClass::Object;
                unfiltered.push(peak_to_point(&p, &sf.frame.pose, &cfg).unwrap());
            }
        }
    }
    let kept = remove_ghosts(&sf.frame, &LabelVolume::filled(dims, PeakClass::Object), thr, &cfg).unwrap();
    assert_eq!(kept.points, unfiltered);
    let undefined = remove_ghosts(&sf.frame, &LabelVolume::filled(dims, PeakClass::Undefined), thr, &cfg).unwrap();
    assert_eq!(undefined.len(), unfiltered.len());

    let gt_ghosts: Vec<_> = sf
        .planted
        .iter()
        .filter(|p| p.peak.label == PeakClass::Ghost)
        .map(|p| peak_to_point(&p.peak, &sf.frame.pose, &cfg).unwrap())
        .collect();
    assert!(gt_ghosts.len() > 10);
    let cleaned = remove_ghosts(&sf.frame, &sf.labels, thr, &cfg).unwrap();
    assert!(cleaned.points.iter().all(|p| p.label != PeakClass::Ghost));
    let gt = fwl_core::PointCloud::new(gt_ghosts);
    assert_eq!(ghost_removal_rate(&gt, &cleaned, 0.05), Some(1.0));
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Model::new(toy_cfg(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fwlm");
    save_model(&path, &model).unwrap();
    let back = load_model(&path).unwrap();
    model.params.round_to_f32();
    assert_eq!(back.cfg, model.cfg);
    for i in 0..model.params.len() {
        assert_eq!(back.params.name(i), model.params.name(i));
        assert_eq!(back.params.get(i), model.params.get(i));
    }
    // Saving the rounded model again is byte-identical.
    assert_eq!(encode_model(&back), std::fs::read(&path).unwrap());

    let bytes = encode_model(&model);
    let p = std::path::Path::new("x.fwlm");
    assert!(matches!(decode_model(&bytes[..bytes.len() - 3], p), Err(NnError::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_model(&bad, p), Err(NnError::Format { .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_model(&extra, p).is_err());
}
