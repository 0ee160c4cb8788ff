use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn run(out: &Path, args: &[&str]) -> Value {
    let output = Command::new(env!("CARGO_BIN_EXE_trackbench"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    serde_json::from_slice(&output.stdout).unwrap()
}

fn table(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn horizon_sweep_reproduces_deterministic_limits() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(dir.path(), &["horizon", "--probs", "0,1", "--max", "30"]);
    let finals = s["results"]["final"].as_array().unwrap();
    assert_eq!((finals[0]["optimal"].as_f64(), finals[0]["greedy"].as_f64()), (Some(10.0), Some(20.0)));
    assert_eq!((finals[1]["optimal"].as_f64(), finals[1]["greedy"].as_f64()), (Some(1.0), Some(29.0)));
    let rows = table(dir.path().join("horizon/horizon.csv"));
    assert_eq!(rows.len(), 60);
    // one period: only the initial stage cost is paid
    for r in rows.iter().filter(|r| r[1] == "1") {
        assert_eq!((num(&r[2]), num(&r[3])), (1.0, 0.0));
    }
    assert_eq!(s["tool"], "trackbench");
    assert_eq!(s["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn census_csv_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(dir.path(), &["census", "--radius", "3", "--horizon", "25", "--p", "0.4"]);
    let rows = table(dir.path().join("census/census.csv"));
    assert_eq!(rows.len(), 147);
    let flagged = rows.iter().filter(|r| r[6] == "true").count();
    assert_eq!(flagged as u64, s["results"]["greedy_suboptimal"].as_u64().unwrap());
    let diffs: Vec<f64> = rows.iter().filter(|r| r[6] == "true").map(|r| num(&r[5])).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert_eq!(mean, s["results"]["mean_difference"].as_f64().unwrap());
    for r in &rows {
        assert!(num(&r[3]) <= num(&r[4]));
    }
    let kde = table(dir.path().join("census/kde.csv"));
    assert_eq!(kde.len(), 512);
    let h = 3.47;
    let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    assert!((num(&kde[0][0]) - lo).abs() < 1e-9);
}

#[test]
fn runs_are_reproducible_across_output_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "capacity",
        "--radius",
        "2",
        "--horizon",
        "8",
        "--patch-side",
        "4",
        "--image-side",
        "64",
        "--counts",
        "8,16,20",
        "--trials",
        "2",
        "--seed",
        "5",
    ];
    run(a.path(), &args);
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "1"]);
    run(b.path(), &threaded);
    for f in ["capacity.csv", "summary.json"] {
        assert_eq!(
            fs::read(a.path().join("capacity").join(f)).unwrap(),
            fs::read(b.path().join("capacity").join(f)).unwrap(),
            "{f}"
        );
    }
    let rows = table(a.path().join("capacity/capacity.csv"));
    let raw: Vec<_> = rows.iter().filter(|r| r[0] == "raw").map(|r| (r[1].clone(), num(&r[4]))).collect();
    assert_eq!(raw, [("8".into(), 1.0), ("16".into(), 1.0), ("20".into(), 0.0)]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "version = 1\nname = \"named\"\n[benchmark]\nradius = 2\nhorizon = 5\n").unwrap();
    let s = run(dir.path(), &["--config", cfg.to_str().unwrap(), "solve", "--radius", "1"]);
    assert_eq!(s["results"]["states"], 27);
    assert_eq!(s["experiment"], "named");
    let snap = fs::read_to_string(dir.path().join("named/config.snapshot")).unwrap();
    assert!(snap.contains("radius = 1") && snap.contains("horizon = 5"));
    let snapshot_cfg = dir.path().join("named/config.snapshot");
    let again = run(dir.path(), &["--config", snapshot_cfg.to_str().unwrap(), "--name", "again", "solve"]);
    assert_eq!(again["config_sha256"], s["config_sha256"]);
}

#[test]
fn unsupported_config_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "version = 7\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_trackbench"))
        .args(["--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .arg("solve")
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
}

#[test]
fn single_state_benchmark_is_solved_by_every_representation() {
    let dir = tempfile::tempdir().unwrap();
    for rep in ["raw", "whitened", "sparse:4", "upscaled:4", "onehot"] {
        let name = rep.replace(':', "-");
        run(
            dir.path(),
            &[
                "state-sweep", "--states", "3", "--horizon", "6", "--representation", rep, "--patch-side", "4",
                "--image-side", "32", "--name", &name,
            ],
        );
        let rows = table(dir.path().join(&name).join("state_sweep.csv"));
        assert_eq!(rows[0][6], "3", "{rep}");
        assert_eq!(num(&rows[0][4]), num(&rows[0][2]), "{rep}");
    }
}

#[test]
fn partition_with_every_state_matches_full_training() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(
        dir.path(),
        &["partition", "--radius", "2", "--horizon", "12", "--representation", "onehot", "--rule", "all"],
    );
    assert_eq!(s["results"]["training_fraction"], 1.0);
    for r in table(dir.path().join("partition/partition.csv")) {
        assert_eq!(r[5], r[6]);
        assert_eq!(num(&r[5]), num(&r[3]));
    }
    let s = run(dir.path(), &["partition", "--radius", "10", "--horizon", "1", "--representation", "onehot"]);
    assert_eq!(s["results"]["training_states"], 1023);
}

#[test]
fn codec_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["images", "synth", "--count", "1", "--side", "24", "--seed", "9"]);
    let s = run(d, &["codec", "dict", "--patch-side", "6", "--factor", "4"]);
    assert_eq!(s["results"]["atoms"], 144);
    let image = d.join("images/image_000.f64");
    let dict = d.join("codec-dict/dictionary.bin");
    let s = run(
        d,
        &["codec", "encode", "--dictionary", dict.to_str().unwrap(), "--image", image.to_str().unwrap(), "--tol", "1e-10"],
    );
    assert_eq!(s["results"]["patches"], 16);
    assert!(s["results"]["max_relative_residual"].as_f64().unwrap() <= 1e-10);
    let codes = d.join("codec-encode/codes.f64");
    let s = run(d, &["codec", "decode", "--dictionary", dict.to_str().unwrap(), "--codes", codes.to_str().unwrap()]);
    assert_eq!(s["results"]["tiled"], true);
    let read = |p: PathBuf| -> Vec<f64> {
        fs::read(p).unwrap().chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let before = read(image);
    let after = read(d.join("codec-decode/decoded.f64"));
    assert_eq!(before.len(), after.len());
    let norm = before.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() <= 1e-8 * norm);
    }
}
