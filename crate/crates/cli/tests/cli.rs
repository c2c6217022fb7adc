use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_panocal");

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).display().to_string()
}

fn panocal(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = panocal(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn synth_into(dir: &Path, threads: &str) -> PathBuf {
    let out = dir.join(format!("synth-{threads}"));
    ok(&[
        "--out-dir",
        out.to_str().unwrap(),
        "--threads",
        threads,
        "synth",
        "--scene",
        &data("room4x4.json"),
        "--poses",
        &data("poses.json"),
        "--width",
        "128",
        "--height",
        "64",
    ]);
    out
}

#[test]
fn synth_writes_one_set_per_pose_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth_into(tmp.path(), "2");
    let f = files(&out);
    for i in 0..3 {
        for ext in ["png", "pdr", "pose.json"] {
            assert!(f.contains_key(&format!("view_{i:03}.{ext}")), "missing view_{i:03}.{ext}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(&f["manifest.json"]).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 12);
    assert!(manifest["versions"]["panocal_core"].is_string());
}

#[test]
fn eval_depth_of_identical_files_is_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth_into(tmp.path(), "1");
    let d = s.join("view_001.pdr");
    let d = d.to_str().unwrap();
    let text = ok(&["--out-dir", tmp.path().join("e").to_str().unwrap(), "eval-depth", "--pred", d, "--gt", d]);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "name,mae,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,count,excluded");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "view_001");
    assert_eq!(&row[1..9], ["0", "0", "0", "0", "0", "1", "1", "1"]);
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(panocal(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(panocal(&["eval-depth", "--pred", "a.pdr"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = panocal(&["--out-dir", tmp.path().to_str().unwrap(), "eval-depth", "--pred", "missing.pdr", "--gt", "missing.pdr"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.pdr"));
    let bad = panocal(&["--out-dir", tmp.path().to_str().unwrap(), "losses", "--image", "x.png", "--predictor", "oracle"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn subprocess_predictor_round_trips_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth_into(tmp.path(), "1");
    let exec = format!("exec:{BIN} serve --constant 2.0");
    let text = ok(&[
        "--out-dir",
        tmp.path().join("l").to_str().unwrap(),
        "losses",
        "--image",
        s.join("view_000.png").to_str().unwrap(),
        "--predictor",
        &exec,
        "--chamfer-samples",
        "512",
    ]);
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    // A constant 2 m prediction sits between the stretch thresholds.
    assert_eq!(row[0], 0.0);
    assert!(row[3].is_finite());
}

/// Runs each recipe into `root/<name>` and returns the directories.
fn recipes(root: &Path, threads: &str) -> Vec<PathBuf> {
    let s = synth_into(root, threads);
    let img = s.join("view_000.png");
    let img = img.to_str().unwrap();
    let scene = data("room4x4.json");
    let dir = |n: &str| root.join(format!("{n}-{threads}"));
    let run = |name: &str, args: &[&str]| {
        let out = dir(name);
        let mut full = vec!["--out-dir", out.to_str().unwrap(), "--threads", threads, "--seed", "7"];
        full.extend_from_slice(args);
        ok(&full);
        out
    };
    let pdr0 = s.join("view_000.pdr");
    let pdr1 = s.join("view_001.pdr");
    let q1 = s.join("view_001.png");
    let q2 = s.join("view_002.png");
    vec![
        s.clone(),
        run("eval", &["eval-depth", "--pred", pdr0.to_str().unwrap(), "--gt", pdr1.to_str().unwrap()]),
        run("losses", &["losses", "--scene", &scene, "--image", img, "--predictor", "corrupt:scale=1.3,noise=0.01", "--chamfer-samples", "512"]),
        run("augment", &["augment", "--scene", &scene, "--image", img, "--n", "3"]),
        run("domains", &["domains", "--scene", &scene, "--images", img]),
        run("map", &["map", "--scene", &scene, "--trajectory", &data("loop.json"), "--start=-0.5,-1.2,0", "--odom-noise", "0.01,0.002", "--width", "64", "--height", "32"]),
        run(
            "calibrate",
            &["calibrate", "--scene", &scene, "--images", img, "--predictor", "corrupt:scale=1.3", "--steps", "2", "--n-aug", "2", "--chamfer-samples", "256", "--downsample", "2"],
        ),
        run("localize", &["localize", "--scene", &scene, "--reference", img, "--queries", q1.to_str().unwrap(), q2.to_str().unwrap(), "--n-t", "6", "--n-r", "4"]),
    ]
}

#[test]
fn every_recipe_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = recipes(a.path(), "2");
    let rb = recipes(b.path(), "2");
    for (x, y) in ra.iter().zip(&rb) {
        let (fx, fy) = (files(x), files(y));
        assert!(fx.len() > 1, "{} is empty", x.display());
        assert_eq!(fx.keys().collect::<Vec<_>>(), fy.keys().collect::<Vec<_>>());
        for (name, bytes) in &fx {
            let other = &fy[name];
            // Manifests embed the input paths, which differ between the two roots.
            if name == "manifest.json" {
                let mx: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                let my: serde_json::Value = serde_json::from_slice(other).unwrap();
                assert_eq!(mx["outputs"], my["outputs"], "{}", x.display());
            } else {
                assert!(bytes == other, "{} differs between runs in {}", name, x.display());
            }
        }
    }
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let one = synth_into(tmp.path(), "1");
    let four = synth_into(tmp.path(), "4");
    let (a, b) = (files(&one), files(&four));
    for (name, bytes) in &a {
        if name != "manifest.json" {
            assert!(bytes == &b[name], "{name} depends on --threads");
        }
    }
}

#[test]
fn replay_reproduces_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth_into(tmp.path(), "1");
    let again = tmp.path().join("again");
    ok(&["--out-dir", again.to_str().unwrap(), "replay", "--check", s.join("manifest.json").to_str().unwrap()]);
    assert_eq!(files(&s), files(&again));
}
