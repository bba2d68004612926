//! End-to-end checks of the command-line contract: exit codes, output files,
//! and byte-reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smoothlab"))
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn train_writes_outputs_and_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "synth_dim": 10, "synth_n": 128, "width": 16, "depth": 1,
            "step_size": 0.5, "max_iters": 30, "seed": 4
        }),
    );
    let mut outputs = Vec::new();
    for rep in 0..2 {
        let out_dir = dir.path().join(format!("run{rep}"));
        let out = run(bin().args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]));
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("metrics.csv").exists());
        assert!(out_dir.join("final.snet").exists());
        assert!(out_dir.join("bounds.json").exists());
        outputs.push((
            std::fs::read(out_dir.join("metrics.csv")).unwrap(),
            std::fs::read(out_dir.join("final.snet")).unwrap(),
            std::fs::read(out_dir.join("bounds.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1], "identical config + seed must be byte-reproducible");
}

#[test]
fn train_with_zero_iterations_logs_only_the_initialization_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "synth_dim": 6, "synth_n": 32, "width": 8, "depth": 1,
            "step_size": 0.1, "max_iters": 0, "seed": 1
        }),
    );
    let out_dir = dir.path().join("run");
    let out = run(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(out.status.success());
    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2, "header plus one row:\n{text}");
}

#[test]
fn missing_data_file_exits_3_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "data_images": "no-such-images-idx3-ubyte",
            "data_labels": "no-such-labels-idx1-ubyte"
        }),
    );
    let out = run(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no-such-images-idx3-ubyte"), "stderr: {err}");
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // unknown key
    let cfg = write_json(dir.path(), "bad.json", serde_json::json!({"wdith": 3}));
    let out = run(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(1));

    // invalid xor dimension
    let cfg = write_json(dir.path(), "xor.json", serde_json::json!({"dim": 1}));
    let out = run(bin().args([
        "xor",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergent_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "synth_dim": 8, "synth_n": 64, "width": 16, "depth": 2,
            "step_size": 1e12, "max_iters": 200, "seed": 2
        }),
    );
    let out_dir = dir.path().join("run");
    let out = run(bin().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // diagnostics still land on disk
    assert!(out_dir.join("metrics.csv").exists());
}

#[test]
fn xor_exact_mode_reaches_perfect_accuracy_at_d4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "dim": 4, "width": 20, "enumeration_batches": true,
            "mc_samples": 500, "seed": 3
        }),
    );
    let out_dir = dir.path().join("run");
    let out = run(bin().args([
        "xor",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(out.status.success());
    let text = std::fs::read_to_string(out_dir.join("xor.csv")).unwrap();
    let last = text.lines().last().unwrap();
    let exact: f64 = last.split(',').nth(8).unwrap().parse().unwrap();
    assert_eq!(exact, 1.0, "last row: {last}");
}

#[test]
fn sweep_writes_rows_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        serde_json::json!({
            "sweep_dims": [4, 8], "sweep_replicates": 2,
            "mc_samples": 500, "seed": 5
        }),
    );
    let out_dir = dir.path().join("run");
    let out = run(bin().args([
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "2",
    ]));
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(sweep.lines().count() > 4);
    let agg = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3, "{agg}");
}

#[test]
fn bounds_recomputes_from_csv_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    // synthetic metrics: 101 rows of loss 0.5 -> accumulator exactly 50
    let mut csv = String::from(
        "iter,train_loss,test_loss,gen_gap,dist_from_init,grad_norm,cum_train_loss,eta,descent_violation\n",
    );
    let mut cum = 0.0;
    for t in 0..=100 {
        csv.push_str(&format!("{t},5e-1,NaN,NaN,0e0,1e-2,{cum:e},1e-1,0\n"));
        cum += 0.5;
    }
    let path = dir.path().join("m.csv");
    std::fs::write(&path, csv).unwrap();

    let mut outs = Vec::new();
    for _ in 0..2 {
        let out = run(bin().args([
            "bounds",
            "--metrics",
            path.to_str().unwrap(),
            "--n",
            "1000",
            "--g0",
            "1.0",
            "--rho",
            "2.0",
        ]));
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        outs.push(out.stdout);
    }
    assert_eq!(outs[0], outs[1], "bounds output must be byte-identical on rerun");
    let report: serde_json::Value = serde_json::from_slice(&outs[0]).unwrap();
    assert!((report["bound_eq12"].as_f64().unwrap() - 0.11).abs() < 1e-15);
    assert!((report["bound_eq9"].as_f64().unwrap() - 0.05625).abs() < 1e-15);
    assert!((report["bound_eq8"].as_f64().unwrap() - 0.0171875).abs() < 1e-15);
}

#[test]
fn check_command_passes() {
    let out = run(bin().arg("check"));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all 11 checks passed"), "{text}");
    assert!(!text.contains("FAIL"));
}
