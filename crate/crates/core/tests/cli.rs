use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gesture_video::imaging::load_rgb;
use gesture_video::skeleton::{write_camera, write_joint_sequence, CameraIntrinsics, JointSet3D, NUM_JOINTS};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gesture-video"));
    c.env_remove("GESTURE_VIDEO_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One visible joint at `xyz`; everything else invalid.
fn single_joint(dir: &Path, xyz: [f64; 3]) -> std::path::PathBuf {
    let mut positions = vec![[0.0; 3]; NUM_JOINTS];
    let mut valid = vec![false; NUM_JOINTS];
    positions[0] = xyz;
    valid[0] = true;
    let path = dir.join("joints.txt");
    write_joint_sequence(&path, &[JointSet3D::new(positions, valid, 0).unwrap()]).unwrap();
    path
}

fn centroid(path: &Path) -> (f64, f64) {
    let img = load_rgb(path).unwrap();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (x, y, px) in img.enumerate_pixels() {
        if px.0 != [0, 0, 0] {
            sx += x as f64;
            sy += y as f64;
            n += 1.0;
        }
    }
    assert!(n > 0.0, "{} is blank", path.display());
    (sx / n, sy / n)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_override_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--set", "train.lr=1", "synth", "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
}

#[test]
fn focal_scale_enlarges_about_the_principal_point() {
    let dir = tempfile::tempdir().unwrap();
    let cam = CameraIntrinsics::new(40.0, 40.0, 32.0, 30.0, 64, 64).unwrap();
    write_camera(&dir.path().join("camera.txt"), &cam).unwrap();
    let joints = single_joint(dir.path(), [0.3, -0.2, 2.0]);
    let cam_path = dir.path().join("camera.txt");
    let mut centers = Vec::new();
    for s in ["1", "2"] {
        let out = dir.path().join(format!("s{s}"));
        let o = run(&[
            "project", "--joints", p(&joints), "--camera", p(&cam_path), "--focal-scale", s, "--out", p(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(out.join("run.json").is_file());
        centers.push(centroid(&out.join("000000.png")));
    }
    // pinhole: (38, 26) at s = 1, (44, 22) at s = 2
    assert!((centers[0].0 - 38.0).abs() < 0.5 && (centers[0].1 - 26.0).abs() < 0.5, "{:?}", centers[0]);
    assert!((centers[1].0 - 32.0 - 2.0 * (centers[0].0 - 32.0)).abs() < 0.5);
    assert!((centers[1].1 - 30.0 - 2.0 * (centers[0].1 - 30.0)).abs() < 0.5);
}

#[test]
fn bad_camera_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cam = dir.path().join("broken_camera.txt");
    fs::write(&cam, "fx = 10\nfy = -3\n").unwrap();
    let joints = single_joint(dir.path(), [0.0, 0.0, 2.0]);
    let o = run(&["project", "--joints", p(&joints), "--camera", p(&cam), "--out", p(&dir.path().join("o"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("broken_camera.txt"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["synth", "--out", p(&data), "--frames", "2", "--size", "32"]).status.code(), Some(0));
    let ghost = dir.path().join("ghost.bin");
    let o = run(&["generate", "--checkpoint", p(&ghost), "--data", p(&data), "--out", p(&dir.path().join("g"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ghost.bin"), "{}", stderr(&o));
}

#[test]
fn self_evaluation_reports_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["synth", "--out", p(&data), "--frames", "3", "--size", "32"]).status.code(), Some(0));
    let frames = data.join("frames");
    let out = dir.path().join("eval");
    let o = run(&[
        "eval", "--generated", p(&frames), "--reference", p(&frames), "--masks", p(&data.join("masks")), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("ssim 1.000000"), "{text}");
    assert!(text.contains("psnr identical"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["frame_count"], 3);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("GESTURE_VIDEO_OUT", dir.path())
        .args(["synth", "--frames", "1", "--size", "16"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("synth").join("frames").join("000000.png").is_file());
}
