use std::path::Path;
use std::process::{Command, Output};

use cvdensity::io;

fn cvdensity(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvdensity"))
        .args(args)
        .output()
        .expect("spawn cvdensity")
}

fn ok(args: &[&str]) {
    let out = cvdensity(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_empty(dir: &Path) {
    ok(&[
        "synth", "--scene", "empty", "--out", s(dir), "--resolution", "32,32,9",
        "--height", "16", "--width", "64", "--pose", "0,0,2,0", "--pose=-3,4,1.5,1",
    ]);
}

#[test]
fn synth_sky_mask_is_exactly_the_upper_half() {
    let dir = tempfile::tempdir().unwrap();
    synth_empty(dir.path());
    for view in ["view_00", "view_01"] {
        let mask = io::read_map(&dir.path().join(format!("{view}_sky.s2dm"))).unwrap();
        for y in 0..16 {
            for x in 0..64 {
                assert_eq!(mask.get(y, x, 0), if y < 8 { 1.0 } else { 0.0 }, "{view} row {y}");
            }
        }
        let hist = io::read_histogram(&dir.path().join(format!("{view}_sky.s2dh"))).unwrap();
        assert!((hist.values().iter().sum::<f64>() - 3.0).abs() < 1e-6);
        let copy = io::read_map(&dir.path().join(format!("{view}_copy_paste_color.s2dm"))).unwrap();
        for x in 0..64 {
            assert_eq!(copy.get(0, x, 0), 0.0, "{view} sky renders black");
            assert!(copy.get(15, x, 1) > 0.0, "{view} ground carries satellite color");
        }
        assert!(dir.path().join(format!("{view}_hit_color.png")).is_file());
    }
    let vol = io::read_volume(&dir.path().join("volume.s2dv")).unwrap();
    assert_eq!(vol.resolution().nz, 9);
    assert!(dir.path().join("satellite.png").is_file());
}

#[test]
fn one_pose_trajectory_equals_render() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok(&["synth", "--scene", "plane-box", "--out", s(&scene), "--resolution", "32,32,9", "--height", "8", "--width", "32"]);
    let path = dir.path().join("path.csv");
    std::fs::write(&path, "frame,e,n,u,heading_rad\n0,-1.5,2,2,0.25\n").unwrap();
    let (vol, sat) = (scene.join("volume.s2dv"), scene.join("satellite.png"));
    let (traj, single) = (dir.path().join("traj"), dir.path().join("single"));
    let common = ["--height", "16", "--width", "64", "--samples", "32"];
    let mut args = vec!["trajectory", "--volume", s(&vol), "--sat", s(&sat), "--path", s(&path), "--out", s(&traj)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["render", "--volume", s(&vol), "--sat", s(&sat), "--pose=-1.5,2,2,0.25", "--out", s(&single)];
    args.extend(common);
    ok(&args);
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(traj.join("frame_0000.png")), read(single.join("color.png")));
    assert_eq!(read(traj.join("frame_0000_depth.s2dm")), read(single.join("depth.s2dm")));
}

#[test]
fn fit_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{ "scene": "plane-box", "seed": 5, "output_dir": "default-out",
             "panorama": { "height_px": 12, "width_px": 32 },
             "fit": { "steps": 6, "samples_per_ray": 8, "rays_per_step": 300,
                      "resolution": { "nx": 8, "ny": 8, "nz": 5 } },
             "train_views": [{ "e": -5, "n": 0 }, { "e": 5, "n": 0 }],
             "heldout_views": [{ "e": 2, "n": -2 }] }"#,
    )
    .unwrap();
    ok(&["fit", "--config", s(&config)]);
    let first = dir.path().join("default-out");
    let second = dir.path().join("again");
    ok(&["fit", "--config", s(&config), "--out", s(&second), "--threads", "3"]);
    for f in ["volume.s2dv", "loss.csv", "report.json", "train_01_color.png", "heldout_00_depth.s2dm"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
    let trace = io::read_trace(&first.join("loss.csv")).unwrap();
    assert_eq!(trace.len(), 6);
    let other = dir.path().join("seeded");
    ok(&["fit", "--config", s(&config), "--out", s(&other), "--seed", "6"]);
    assert_ne!(
        std::fs::read(first.join("volume.s2dv")).unwrap(),
        std::fs::read(other.join("volume.s2dv")).unwrap()
    );
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth_empty(dir.path());
    let report = dir.path().join("eval.json");
    ok(&["eval", "--pred", s(dir.path()), "--truth", s(dir.path()), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["images"]["psnr"], 99.0);
    assert_eq!(v["images"]["ssim"], 1.0);
    assert_eq!(v["files"]["view_00_depth.s2dm"]["rmse"], 0.0);
    assert_eq!(v["files"]["view_00_depth.s2dm"]["kind"], "map");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    synth_empty(dir.path());
    let d = dir.path();
    let not_volume = d.join("satellite.png");
    let out = cvdensity(&["render", "--volume", s(&not_volume), "--sat", s(&not_volume), "--pose", "0,0,2,0", "--out", s(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("satellite.png"));

    let vol = d.join("volume.s2dv");
    let out = cvdensity(&["render", "--volume", s(&vol), "--sat", s(&not_volume), "--pose", "0,0,2,0", "--out", s(&d.join("r")), "--samples", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let config = d.join("bad.json");
    std::fs::write(&config, r#"{ "scene": "empty", "train_views": [{ "e": 0, "n": 0 }], "extra": 1 }"#).unwrap();
    let out = cvdensity(&["fit", "--config", s(&config), "--out", s(&d.join("f"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let out = cvdensity(&["render", "--volume", s(&d.join("missing.s2dv")), "--sat", s(&not_volume), "--pose", "0,0,2,0", "--out", s(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = cvdensity(&["eval", "--pred", s(&d.join("r")), "--truth", s(d), "--report", s(&d.join("e.json"))]);
    assert_ne!(out.status.code(), Some(0));
}
