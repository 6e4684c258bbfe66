//! End-to-end subcommand tests: artifacts, exit codes, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cryojoint"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn cryojoint");
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("spawn cryojoint");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Small reproducible dataset shared by several tests. `p` and `snr`
/// override the fixture defaults; `perturb` adds an initial pose table.
fn simulate_dataset(dir: &Path, p: &str, snr: &str, perturb: Option<&str>) -> PathBuf {
    let out = dir.join("sim");
    let out_s = path_str(&out);
    let mut args = vec![
        "simulate", "--out-dir", &out_s, "--n", "12", "--p", p, "--seed", "1", "--snr-db", snr,
        "--m-t", "1.0",
    ];
    if let Some(e) = perturb {
        args.extend_from_slice(&["--perturb", e]);
    }
    run_ok(&args);
    out
}

fn simulate_fixture(dir: &Path) -> PathBuf {
    simulate_dataset(dir, "8", "10", None)
}

#[test]
fn simulate_matches_the_golden_checksums_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_fixture(dir.path());
    // Golden values recorded from the first blessed run of this fixture.
    assert_eq!(
        sha256_file(&sim.join("stack.mrc")),
        "6364b518defaa7520b99d1bf66863d6bd95dce7b9315469b49e9dbb7420cd8a1"
    );
    assert_eq!(
        sha256_file(&sim.join("poses_true.csv")),
        "b6ede888902e221f2188b4889ba06b783b2009298cde11dc936e9ce978ace212"
    );
    assert_eq!(
        sha256_file(&sim.join("volume_true.mrc")),
        "a50feff2ada086e2b85f59558206b1e8ec9fbbcd58f45d4fbdce52b3f419b92f"
    );
    // Re-running with the same seed overwrites with identical bytes.
    let again = simulate_fixture(dir.path());
    assert_eq!(
        sha256_file(&again.join("stack.mrc")),
        "6364b518defaa7520b99d1bf66863d6bd95dce7b9315469b49e9dbb7420cd8a1"
    );
}

#[test]
fn simulate_rejects_zero_projections() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(&dir.path().join("sim"));
    let (code, err) = run_code(&["simulate", "--out-dir", &out, "--p", "0"]);
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn infinite_snr_means_noiseless() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_dataset(dir.path(), "8", "+inf", None);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sim.join("metadata.json")).unwrap())
            .unwrap();
    assert_eq!(meta["sigma"], 0.0);
    assert_eq!(meta["noise"], "noiseless");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"sim": {"p": 4}, "turbo": true}"#).unwrap();
    let out = path_str(&dir.path().join("sim"));
    let (code, err) = run_code(&["simulate", "--config", &path_str(&cfg), "--out-dir", &out]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("turbo"), "stderr: {err}");
}

#[test]
fn missing_input_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(&dir.path().join("rec"));
    let (code, _) = run_code(&[
        "reconstruct",
        "--stack",
        "/nonexistent/stack.mrc",
        "--poses",
        "/nonexistent/poses.csv",
        "--out-dir",
        &out,
    ]);
    assert_eq!(code, 3);
}

#[test]
fn joint_without_pose_refinement_equals_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_fixture(dir.path());
    let stack = path_str(&sim.join("stack.mrc"));
    let poses = path_str(&sim.join("poses_true.csv"));
    let rec = path_str(&dir.path().join("rec"));
    let jnt = path_str(&dir.path().join("jnt"));
    let common = ["--max-outer-iters", "3", "--lambda", "2.0", "--rho", "20"];
    let mut args = vec![
        "reconstruct",
        "--stack",
        &stack,
        "--poses",
        &poses,
        "--out-dir",
        &rec,
    ];
    args.extend_from_slice(&common);
    run_ok(&args);
    let mut args = vec![
        "joint", "--stack", &stack, "--poses", &poses, "--out-dir", &jnt, "--k-gd", "0",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);
    assert_eq!(
        std::fs::read(Path::new(&rec).join("volume.mrc")).unwrap(),
        std::fs::read(Path::new(&jnt).join("volume.mrc")).unwrap()
    );
    assert_eq!(
        std::fs::read(Path::new(&rec).join("trace.jsonl")).unwrap(),
        std::fs::read(Path::new(&jnt).join("trace.jsonl")).unwrap()
    );
}

#[test]
fn reconstruction_quality_in_the_trace_never_degrades_early_on() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_dataset(dir.path(), "16", "+inf", None);
    let out = dir.path().join("rec");
    run_ok(&[
        "reconstruct",
        "--stack",
        &path_str(&sim.join("stack.mrc")),
        "--poses",
        &path_str(&sim.join("poses_true.csv")),
        "--out-dir",
        &path_str(&out),
        "--max-outer-iters",
        "5",
    ]);
    // Re-run with the truth volume attached so the trace carries r_c.
    let out2 = dir.path().join("rec_rc");
    run_ok(&[
        "joint",
        "--stack",
        &path_str(&sim.join("stack.mrc")),
        "--poses",
        &path_str(&sim.join("poses_true.csv")),
        "--truth-volume",
        &path_str(&sim.join("volume_true.mrc")),
        "--out-dir",
        &path_str(&out2),
        "--k-gd",
        "0",
        "--max-outer-iters",
        "5",
    ]);
    let trace = std::fs::read_to_string(out2.join("trace.jsonl")).unwrap();
    let rcs: Vec<f64> = trace
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["r_c"].as_f64().expect("r_c present")
        })
        .collect();
    assert_eq!(rcs.len(), 5);
    for w in rcs.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "r_c degraded: {rcs:?}");
    }
    assert!(rcs[4] > 0.0, "r_c stayed at zero: {rcs:?}");
}

#[test]
fn thread_count_does_not_change_the_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_fixture(dir.path());
    let stack = path_str(&sim.join("stack.mrc"));
    let poses = path_str(&sim.join("poses_true.csv"));
    let mut volumes = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("jnt{threads}"));
        run_ok(&[
            "--threads",
            threads,
            "joint",
            "--stack",
            &stack,
            "--poses",
            &poses,
            "--out-dir",
            &path_str(&out),
            "--k-gd",
            "1",
            "--max-outer-iters",
            "2",
        ]);
        volumes.push(std::fs::read(out.join("volume.mrc")).unwrap());
    }
    assert_eq!(volumes[0], volumes[1]);
    // CRYOJOINT_THREADS is the fallback for the flag.
    let out = dir.path().join("jnt_env");
    let run = bin()
        .env("CRYOJOINT_THREADS", "2")
        .args([
            "joint",
            "--stack",
            &stack,
            "--poses",
            &poses,
            "--out-dir",
            &path_str(&out),
            "--k-gd",
            "1",
            "--max-outer-iters",
            "2",
        ])
        .output()
        .unwrap();
    assert!(run.status.success());
    assert_eq!(volumes[0], std::fs::read(out.join("volume.mrc")).unwrap());
}

#[test]
fn half_split_needs_at_least_two_projections() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_dataset(dir.path(), "1", "10", None);
    let out = path_str(&dir.path().join("hs"));
    let (code, err) = run_code(&[
        "joint",
        "--stack",
        &path_str(&sim.join("stack.mrc")),
        "--poses",
        &path_str(&sim.join("poses_true.csv")),
        "--out-dir",
        &out,
        "--half-split",
        "--k-gd",
        "0",
    ]);
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn half_split_writes_both_halves_and_their_fsc() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_dataset(dir.path(), "6", "10", None);
    let out = dir.path().join("hs");
    run_ok(&[
        "joint",
        "--stack",
        &path_str(&sim.join("stack.mrc")),
        "--poses",
        &path_str(&sim.join("poses_true.csv")),
        "--out-dir",
        &path_str(&out),
        "--half-split",
        "--k-gd",
        "0",
        "--max-outer-iters",
        "3",
        "--lambda",
        "2.0",
        "--rho",
        "20",
    ]);
    for name in [
        "half_a.mrc",
        "half_b.mrc",
        "volume.mrc",
        "poses.csv",
        "fsc_halfmaps.csv",
        "trace_a.jsonl",
        "trace_b.jsonl",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
    // Postprocess consumes the half maps directly.
    run_ok(&[
        "postprocess",
        "--half-a",
        &path_str(&out.join("half_a.mrc")),
        "--half-b",
        &path_str(&out.join("half_b.mrc")),
        "--out",
        &path_str(&dir.path().join("filtered.mrc")),
    ]);
    assert!(dir.path().join("filtered.mrc").exists());
}

#[test]
fn fsc_of_a_volume_with_itself_is_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_fixture(dir.path());
    let vol = path_str(&sim.join("volume_true.mrc"));
    let out = dir.path().join("fsc.csv");
    run_ok(&["fsc", "--a", &vol, "--b", &vol, "--out", &path_str(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frequency_per_voxel,fsc"));
    let mut rows = 0;
    for line in lines {
        let y: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((y - 1.0).abs() < 1e-12, "row {line}");
        rows += 1;
    }
    assert_eq!(rows, 6); // n/2 shells at n = 12
}

#[test]
fn pose_error_of_a_table_with_itself_is_a_single_spike() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_fixture(dir.path());
    let poses = path_str(&sim.join("poses_true.csv"));
    let out = dir.path().join("pe.csv");
    run_ok(&[
        "pose-error",
        "--truth",
        &poses,
        "--est",
        &poses,
        "--out",
        &path_str(&out),
        "--component",
        "theta2",
        "--bins",
        "11",
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let nonzero = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() > 0.0)
        .count();
    assert_eq!(nonzero, 1);
}

#[test]
fn angle_errors_are_reported_in_degrees() {
    let dir = tempfile::tempdir().unwrap();
    // 0.7 rad uniform perturbation = +/- 40.107 degrees of support.
    let sim = simulate_dataset(dir.path(), "200", "10", Some("0.7"));
    let out = dir.path().join("pe.csv");
    run_ok(&[
        "pose-error",
        "--truth",
        &path_str(&sim.join("poses_true.csv")),
        "--est",
        &path_str(&sim.join("poses_init.csv")),
        "--out",
        &path_str(&out),
        "--component",
        "theta2",
        "--bins",
        "40",
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let centers: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    let max_abs = centers.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    assert!(max_abs < 40.2, "support {max_abs} exceeds the 0.7 rad bound");
    assert!(max_abs > 30.0, "support {max_abs} implausibly narrow");
    // The histogram integrates to one on the degree axis.
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect();
    let width = rows[1].0 - rows[0].0;
    let mass: f64 = rows.iter().map(|(_, d)| d * width).sum();
    assert!((mass - 1.0).abs() < 1e-9, "total mass {mass}");
}

#[test]
fn refine_poses_writes_a_reingestable_table() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_dataset(dir.path(), "8", "10", Some("0.2"));
    let out = dir.path().join("refined.csv");
    run_ok(&[
        "refine-poses",
        "--stack",
        &path_str(&sim.join("stack.mrc")),
        "--volume",
        &path_str(&sim.join("volume_true.mrc")),
        "--poses",
        &path_str(&sim.join("poses_init.csv")),
        "--out",
        &path_str(&out),
        "--k-gd",
        "2",
    ]);
    // The output table feeds straight back into pose-error.
    run_ok(&[
        "pose-error",
        "--truth",
        &path_str(&sim.join("poses_true.csv")),
        "--est",
        &path_str(&out),
        "--out",
        &path_str(&dir.path().join("pe.csv")),
    ]);
}
