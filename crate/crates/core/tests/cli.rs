use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use noisecouple::container;
use serde_json::Value;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisecouple"))
        .args(args)
        .current_dir(dir)
        .env("NOISECOUPLE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn sample_repulsive_rows_sum_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sample",
            "--coupling",
            "repulsive",
            "--k",
            "3",
            "--dim",
            "16",
            "--seed",
            "7",
            "--out",
            "n.npy",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta = stdout_json(&out);
    assert_eq!(meta["shape"], serde_json::json!([3, 16]));
    let loaded = container::load_container(&dir.path().join("n.npy")).unwrap();
    // float32 export: the sum of three rounded values is within a few ulps of zero.
    for s in loaded.batch.row_sum() {
        assert!(s.abs() < 1e-5, "{s}");
    }
    assert_eq!(loaded.sidecar.dtype, container::Dtype::F32);
}

#[test]
fn sample_infeasible_equicorrelation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sample",
            "--coupling",
            "equicorr",
            "--k",
            "3",
            "--c",
            "-0.6",
            "--dim",
            "4",
            "--seed",
            "1",
            "--out",
            "x.npy",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[-0.5, 1]"), "{err}");
    let parsed: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(parsed["error"], "config");
    assert!(out.stdout.is_empty());
    assert!(!dir.path().join("x.npy").exists());
}

#[test]
fn sample_identical_and_latent_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sample",
            "--coupling",
            "identical",
            "--k",
            "2",
            "--dim",
            "6",
            "--seed",
            "3",
            "--out",
            "i.npy",
            "--dtype",
            "f64",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let b = container::load_container(&dir.path().join("i.npy"))
        .unwrap()
        .batch;
    assert_eq!(b.vectors.row(0), b.vectors.row(1));

    let out = run(
        &[
            "sample",
            "--coupling",
            "repulsive",
            "--k",
            "3",
            "--shape",
            "4x8x8",
            "--seed",
            "3",
            "--out",
            "l.npy",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let loaded = container::load_container(&dir.path().join("l.npy")).unwrap();
    assert_eq!(loaded.sidecar.shape, vec![3, 4, 8, 8]);
    assert_eq!(loaded.batch.d(), 256);
}

#[test]
fn sample_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sample",
            "--coupling",
            "independent",
            "--k",
            "2",
            "--dim",
            "2",
            "--seed",
            "1",
            "--out",
            "missing/dir/x.npy",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn validate_repulsive_k4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "validate",
            "--coupling",
            "repulsive",
            "--k",
            "4",
            "--dim",
            "8",
            "--n",
            "200000",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
    let pairs: Vec<f64> = report["cross_covariance"]["statistics"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["name"] == "pair_correlation")
        .map(|s| s["value"].as_f64().unwrap())
        .collect();
    assert_eq!(pairs.len(), 6);
    for p in pairs {
        assert!((p + 1.0 / 3.0).abs() < 0.005, "{p}");
    }
}

#[test]
fn validate_independent_and_container() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "validate",
            "--coupling",
            "independent",
            "--k",
            "3",
            "--dim",
            "4",
            "--n",
            "20000",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["pass"], true);

    run(
        &[
            "sample",
            "--coupling",
            "repulsive",
            "--k",
            "3",
            "--dim",
            "4",
            "--seed",
            "2",
            "--out",
            "r.npy",
        ],
        dir.path(),
    );
    let out = run(&["validate", "--in", "r.npy", "--n", "5000"], dir.path());
    assert!(out.status.success());
    let report = stdout_json(&out);
    assert_eq!(report["replay_matches"], true);

    let mut bytes = fs::read(dir.path().join("r.npy")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(dir.path().join("r.npy"), bytes).unwrap();
    let out = run(&["validate", "--in", "r.npy"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "integrity");
}

#[test]
fn feasibility_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["feasibility", "--k", "5", "--c", "-0.25"], dir.path());
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["feasible"], true);
    assert_eq!(v["interval"], serde_json::json!([-0.25, 1.0]));

    let out = run(&["feasibility", "--k", "5", "--c", "-0.3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["feasible"], false);
}

#[test]
fn analyze_separation_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "analyze",
            "--task",
            "separation",
            "--coupling",
            "repulsive",
            "--k",
            "2",
            "--linear-J",
            "identity",
            "--m",
            "2",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    let est = v["estimate"].as_f64().unwrap();
    let se = v["stderr"].as_f64().unwrap();
    assert!((est - 8.0).abs() < 4.0 * se, "{est} ± {se}");
    assert_eq!(v["bound"], 8.0);

    let out = run(
        &[
            "analyze", "--task", "sweep", "--k", "3", "--m", "2", "--n", "4000",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "c,k,metric,estimate,stderr,prediction");
    assert_eq!(lines.len(), 6);
    let cs: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(cs, vec![0.0, -0.125, -0.25, -0.375, -0.5]);
}

#[test]
fn analyze_rbf_and_effect() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "analyze",
            "--task",
            "rbf",
            "--coupling",
            "repulsive",
            "--k",
            "2",
            "--m",
            "1",
            "--tau",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert!((v["exact"].as_f64().unwrap() - 5f64.powf(-0.5)).abs() < 1e-12);

    let out = run(
        &[
            "analyze",
            "--task",
            "effect",
            "--coupling",
            "repulsive",
            "--k",
            "3",
            "--dim",
            "2",
            "--n",
            "2000",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert!((v["report"]["first_order"]["mean"].as_f64().unwrap() - 6.0).abs() < 1e-9);
}

#[test]
fn optimize_amortized_pairwise_k4() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "objective": {"type": "pairwise_l2", "k": 4},
        "generator": {"type": "linear_identity", "d": 16},
        "seed": 1,
        "init": "random_rows"
    });
    fs::write(dir.path().join("pairwise_k4.json"), config.to_string()).unwrap();
    let out = run(
        &[
            "optimize",
            "--task",
            "amortized",
            "--config",
            "pairwise_k4.json",
            "--out",
            "traj.jsonl",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = stdout_json(&out);
    let r = summary["correlation"]["rows"].as_array().unwrap();
    for (i, row) in r.iter().enumerate() {
        for (j, cell) in row.as_array().unwrap().iter().enumerate() {
            if i != j {
                let v = cell.as_f64().unwrap();
                assert!((v + 1.0 / 3.0).abs() < 0.05, "{v}");
            }
        }
    }
    let traj = fs::read_to_string(dir.path().join("traj.jsonl")).unwrap();
    let lines: Vec<Value> = traj
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), summary["steps"].as_u64().unwrap() as usize + 1);
    assert_eq!(lines[0]["a"].as_array().unwrap().len(), 16);
}

#[test]
fn optimize_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"objective": {"type": "pairwise_l2", "k": 4}, "generator": {"type": "linear_identity", "d": 4}, "step_size": -1}"#).unwrap();
    let out = run(
        &["optimize", "--task", "amortized", "--config", "bad.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn optimize_refine_from_container() {
    let dir = tempfile::tempdir().unwrap();
    run(
        &[
            "sample",
            "--coupling",
            "repulsive",
            "--k",
            "3",
            "--dim",
            "6",
            "--seed",
            "5",
            "--out",
            "z.npy",
            "--dtype",
            "f64",
        ],
        dir.path(),
    );
    let config = serde_json::json!({
        "generator": {"type": "linear_identity", "d": 6},
        "optimized": [0, 1],
        "target": [0.5, -0.5, 0.0, 0.0, 0.0, 0.0],
        "region": [0, 1]
    });
    fs::write(dir.path().join("refine.json"), config.to_string()).unwrap();
    let out = run(
        &[
            "optimize",
            "--task",
            "refine",
            "--config",
            "refine.json",
            "--in",
            "z.npy",
            "--out",
            "zr.npy",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout_json(&out)["masked_residual"].as_f64().unwrap() <= 1e-6);
    let before = container::load_container(&dir.path().join("z.npy"))
        .unwrap()
        .batch;
    let after = container::load_container(&dir.path().join("zr.npy"))
        .unwrap()
        .batch;
    for i in 0..3 {
        for l in 2..6 {
            assert_eq!(
                before.vectors[(i, l)].to_bits(),
                after.vectors[(i, l)].to_bits()
            );
        }
    }
}

#[test]
fn export_matrix_reproduces_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "export-matrix",
            "--coupling",
            "equicorr",
            "--k",
            "3",
            "--c",
            "-0.25",
            "--out",
            "a.json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = serde_json::from_value(doc["rows"].clone()).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|l| rows[i][l] * rows[j][l]).sum();
            let expected = if i == j { 1.0 } else { -0.25 };
            assert!((dot - expected).abs() < 1e-9);
        }
    }

    let out = run(
        &[
            "sample",
            "--coupling",
            "matrix",
            "--matrix",
            "a.json",
            "--k",
            "3",
            "--dim",
            "4",
            "--seed",
            "1",
            "--out",
            "m.npy",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_flags_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "sample",
            "--coupling",
            "repulsive",
            "--dim",
            "4",
            "--seed",
            "1",
            "--out",
            "x.npy",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        &[
            "sample",
            "--coupling",
            "bogus",
            "--k",
            "2",
            "--seed",
            "1",
            "--out",
            "x.npy",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
