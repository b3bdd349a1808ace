//! The `fwl` binary driven as a user would drive it.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fwl_core::geometry::{Pose, Trajectory};
use fwl_core::io::write_tum;
use fwl_core::scenes::glass_room;
use fwl_core::synth::format_scene;
use nalgebra::Vector3;

fn fwl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwl")).args(args).output().expect("run fwl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = fwl(args);
    assert!(o.status.success(), "fwl {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{out}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Short training so the workflow finishes in seconds.
fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.toml");
    std::fs::write(&p, "seed = 5\n\n[pretrain]\nepochs = 1\n\n[finetune]\nepochs = 1\n").unwrap();
    p
}

#[test]
fn validate_accepts_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    assert_eq!(ok(&["validate", s(&cfg)]).trim(), "ok");
}

#[test]
fn bad_mask_ratio_names_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\n\n[model]\nd_enc = 96\nmask_ratio = 1.2\n").unwrap();
    let o = fwl(&["validate", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("model.mask_ratio"), "{err}");
    assert!(err.contains("bad.toml:5"), "{err}");
}

#[test]
fn overlapping_test_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("leak.toml");
    std::fs::write(&p, "[split]\ntrain = \"0..10\"\nval = [20]\ntest = [3, 40]\n").unwrap();
    let o = fwl(&["validate", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("split.test") && err.contains("unseen"), "{err}");
}

#[test]
fn malformed_toml_reports_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.toml");
    std::fs::write(&p, "seed = 1\n[model\n").unwrap();
    let o = fwl(&["validate", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.toml:2"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_3() {
    assert_eq!(fwl(&["eval", "--task", "nonsense"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fwl");
    let o = fwl(&["peaks", "--frame", s(&missing), "--out", s(&dir.path().join("p.csv"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn synth_train_infer_remove_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick_config(d);
    let c = s(&cfg);
    let data = d.join("data");
    let out = ok(&["--config", c, "synth", "--room", "3", "--views", "2", "--out", s(&data)]);
    assert_eq!(value(&out, "frames"), "2");
    assert!(value(&out, "ghost_peaks").parse::<usize>().unwrap() > 0);
    let f0 = data.join("00000.fwl");
    let f1 = data.join("00001.fwl");
    let l0 = data.join("00000.fwll");
    let l1 = data.join("00001.fwll");

    let pre = d.join("pre.fwlm");
    let loss = d.join("pre.csv");
    let out = ok(&["--config", c, "pretrain", "--frames", s(&f0), s(&f1), "--out", s(&pre), "--loss-csv", s(&loss)]);
    assert_eq!(value(&out, "epochs"), "1");
    assert!(std::fs::read_to_string(&loss).unwrap().lines().count() >= 2);

    let fine = d.join("fine.fwlm");
    let out = ok(&[
        "--config", c, "finetune", "--model", s(&pre), "--frames", s(&f0), s(&f1), "--labels", s(&l0), s(&l1), "--out",
        s(&fine),
    ]);
    assert_eq!(value(&out, "tiles"), "2");

    let pred = d.join("pred.fwll");
    let out = ok(&["--config", c, "infer", "--model", s(&fine), "--frame", s(&f0), "--out", s(&pred)]);
    assert_eq!(value(&out, "dims"), "32x32x128");

    let den = d.join("den.ply");
    let out = ok(&["--config", c, "remove-ghosts", "--frame", s(&f0), "--labels", s(&pred), "--out", s(&den)]);
    assert!(value(&out, "points").parse::<usize>().unwrap() > 0);

    let out = ok(&[
        "eval", "--task", "recall", "--pred", s(&pred), "--gt-peaks", s(&data.join("00000.csv")), "--gt-labels", s(&l0),
        "--min-amplitude-counts", "3",
    ]);
    assert_eq!(value(&out, "task"), "recall");
    let r = value(&out, "recall");
    assert!(r == "NA" || (0.0..=1.0).contains(&r.parse::<f64>().unwrap()), "{r}");

    // A cloud scored against itself has nothing removed.
    let oracle = d.join("oracle.ply");
    ok(&["--config", c, "remove-ghosts", "--frame", s(&f0), "--labels", s(&l0), "--out", s(&oracle)]);
    let out = ok(&["--config", c, "peaks", "--frame", s(&f0), "--out", s(&d.join("p.csv")), "--cloud-out", s(&d.join("all.ply"))]);
    assert!(value(&out, "peaks").parse::<usize>().unwrap() > 0);
    let out = ok(&["eval", "--task", "removal", "--gt-cloud", s(&oracle), "--denoised", s(&oracle), "--format", "csv"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "task,gt_points,removal_rate");
    assert!(lines[1].ends_with(",0.000000"), "{out}");
}

#[test]
fn accumulate_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["synth", "--room", "1", "--views", "0", "--out", s(&data)]);
    let f = data.join("00000.fwl");
    let acc = d.join("acc.fwl");
    let out = ok(&["accumulate", "--out", s(&acc), s(&f), s(&f), s(&f)]);
    assert_eq!(value(&out, "frames"), "3");

    let dual = d.join("dual.ply");
    let n2: usize = value(&ok(&["baseline", "--method", "dual", "--frame", s(&f), "--out", s(&dual)]), "points")
        .parse()
        .unwrap();
    let n3: usize = value(&ok(&["baseline", "--method", "multi", "--frame", s(&f), "--out", s(&d.join("m.ply"))]), "points")
        .parse()
        .unwrap();
    assert!(n2 > 0 && n3 >= n2);

    let out = ok(&[
        "baseline", "--method", "sof", "--cloud", s(&dual), "--neighbors", "8", "--out", s(&d.join("sof.ply")),
    ]);
    assert!(value(&out, "kept").parse::<usize>().unwrap() <= n2);
    let out = ok(&[
        "baseline", "--method", "rof", "--cloud", s(&dual), "--min-points", "3", "--radius-m", "0.5", "--voxel-size-m",
        "0.05", "--out", s(&d.join("rof.ply")),
    ]);
    assert!(value(&out, "input").parse::<usize>().unwrap() <= n2);

    let planes = d.join("planes.txt");
    std::fs::write(&planes, "4 0 0 -1 0 0\n").unwrap();
    let out = ok(&["baseline", "--method", "mirror", "--cloud", s(&dual), "--planes", s(&planes), "--out", s(&d.join("mir.ply"))]);
    assert_eq!(
        value(&out, "input").parse::<usize>().unwrap(),
        value(&out, "flagged").parse::<usize>().unwrap() + value(&out, "kept").parse::<usize>().unwrap()
    );
    let out = ok(&["baseline", "--method", "heuristic", "--frame", s(&f), "--out", s(&d.join("h.fwll"))]);
    assert!(value(&out, "peaks").parse::<usize>().unwrap() > 0);

    // A bad plane file is a configuration problem.
    std::fs::write(&planes, "4 0 0 -1 0\n").unwrap();
    let o = fwl(&["baseline", "--method", "mirror", "--cloud", s(&dual), "--planes", s(&planes), "--out", s(&d.join("x.ply"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn annotate_against_scene_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = d.join("room.scene");
    let mut room = glass_room(2, &Default::default()).unwrap();
    room.ambient_rate = 0.0;
    std::fs::write(&scene, format_scene(&room)).unwrap();
    let data = d.join("data");
    ok(&["synth", "--scene", s(&scene), "--out", s(&data)]);
    let out = ok(&[
        "annotate", "--frame", s(&data.join("00000.fwl")), "--scene", s(&scene), "--out", s(&d.join("a.fwll")),
        "--peaks-out", s(&d.join("a.csv")),
    ]);
    let total: usize = value(&out, "peaks").parse().unwrap();
    let by_class: usize = ["object", "glass", "ghost", "noise"]
        .iter()
        .map(|k| value(&out, k).parse::<usize>().unwrap())
        .sum();
    assert!(total > 0);
    assert_eq!(total, by_class);
    // --scene and --map are exclusive.
    let o = fwl(&[
        "annotate", "--frame", s(&data.join("00000.fwl")), "--scene", s(&scene), "--map", "m.ply", "--regions", "r.txt",
        "--out", s(&d.join("b.fwll")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trajectory_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traj = |dx: f64| {
        Trajectory::new(
            (0..20)
                .map(|i| Pose::from_yaw(0.0, Vector3::new((1.0 + dx) * i as f64, 0.0, 0.0), i as f64))
                .collect(),
        )
        .unwrap()
    };
    let gt = d.join("gt.tum");
    let est = d.join("est.tum");
    write_tum(&gt, &traj(0.0)).unwrap();
    write_tum(&est, &traj(0.01)).unwrap();
    let out = ok(&["eval", "--task", "rte", "--est", s(&est), "--gt", s(&gt), "--window", "5"]);
    assert_eq!(value(&out, "mean_m"), "0.050000");
    assert_eq!(value(&out, "std_m"), "0.000000");
    // ATE needs a path that is not a straight line.
    let curve = d.join("curve.tum");
    let bend = Trajectory::new(
        (0..20)
            .map(|i| Pose::from_yaw(0.1 * i as f64, Vector3::new(i as f64, (0.3 * i as f64).sin(), 0.0), i as f64))
            .collect(),
    )
    .unwrap();
    write_tum(&curve, &bend).unwrap();
    let out = ok(&["eval", "--task", "ate", "--est", s(&curve), "--gt", s(&curve), "--format", "csv"]);
    assert_eq!(out.lines().nth(1), Some("ate,0.000000,0.000000"));
    // Too short for the window.
    let o = fwl(&["eval", "--task", "rte", "--est", s(&est), "--gt", s(&gt), "--window", "50"]);
    assert_eq!(o.status.code(), Some(3));
}
