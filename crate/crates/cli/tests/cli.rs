//! End-to-end checks of the command-line surface: exit codes, determinism,
//! file outputs and the documented CSV schema.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sparse-fuse")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sparse_fuse_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small decoder so every invocation stays fast.
fn tiny_overrides() -> Vec<String> {
    [
        "model.decoder.total_instances=8",
        "model.decoder.temporal_instances=5",
        "model.decoder.num_multi_frame_layers=2",
        "model.decoder.feature_dim=16",
        "model.decoder.heads=2",
        "model.decoder.k_learnable=2",
        "model.channels=8",
        "model.scales=2",
        "model.groups=2",
        "model.ffn_hidden=24",
        "scene.objects=3",
        "scene.frames=6",
        "scene.image_width=32",
        "scene.image_height=20",
        "scenes=2",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn run(args: &[&str], extra: &[String], out: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .args(extra)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn bench_csv_has_exact_call_ratios() {
    let out = tmpdir("bench");
    let mut extra = tiny_overrides();
    extra.extend(
        ["bench.t_list=[1,2,4]", "bench.frames=6", "bench.repeats=1"]
            .iter()
            .flat_map(|s| ["--set".to_string(), s.to_string()]),
    );
    let res = run(&["bench", "--seed", "5"], &extra, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,T,frame,wall_ns,agg_calls,peak_intermediate_bytes"
    );
    // steady-state multiframe rows: calls = layers * instances * T, ratios 1:2:4
    let mut steady = std::collections::BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "multiframe" && f[2] == "5" {
            steady.insert(f[1].parse::<u64>().unwrap(), f[4].parse::<u64>().unwrap());
        }
    }
    let base = steady[&1];
    assert_eq!(base, 3 * 8); // layers * instances
    assert_eq!(steady[&2], 2 * base);
    assert_eq!(steady[&4], 4 * base);
    assert!(out.join("bench_summary.json").exists());
}

#[test]
fn verify_is_deterministic_and_fault_sensitive() {
    let out1 = tmpdir("verify1");
    let res1 = run(&["verify", "--seed", "7"], &[], &out1);
    assert!(res1.status.success(), "{}", String::from_utf8_lossy(&res1.stderr));

    let out2 = tmpdir("verify2");
    let res2 = run(&["verify", "--seed", "7"], &[], &out2);
    assert!(res2.status.success());
    let r1 = std::fs::read_to_string(out1.join("verify_report.json")).unwrap();
    let r2 = std::fs::read_to_string(out2.join("verify_report.json")).unwrap();
    assert_eq!(r1, r2, "same seed must produce identical verify reports");
    assert_eq!(res1.stdout, res2.stdout);

    let out3 = tmpdir("verify3");
    let res3 = run(&["verify", "--seed", "7", "--inject-fault"], &[], &out3);
    assert_eq!(res3.status.code(), Some(1), "injected fault must fail the suite");
}

#[test]
fn train_zero_epochs_writes_initialization() {
    let out1 = tmpdir("train0a");
    let res = run(&["train", "--epochs", "0"], &tiny_overrides(), &out1);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let out2 = tmpdir("train0b");
    let res = run(&["train", "--epochs", "0"], &tiny_overrides(), &out2);
    assert!(res.status.success());
    let w1 = std::fs::read(out1.join("weights.bin")).unwrap();
    let w2 = std::fs::read(out2.join("weights.bin")).unwrap();
    assert_eq!(w1, w2, "zero-epoch weight files must equal the seeded initialization");
    // and a short real run changes them
    let out3 = tmpdir("train3");
    let res = run(&["train", "--steps", "2"], &tiny_overrides(), &out3);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let w3 = std::fs::read(out3.join("weights.bin")).unwrap();
    assert_ne!(w1, w3);
    assert!(out3.join("train_log.jsonl").exists());
}

#[test]
fn simulate_smoke_and_weight_loading() {
    let out = tmpdir("simtrain");
    let res = run(&["train", "--steps", "1"], &tiny_overrides(), &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let weights = out.join("weights.bin");

    let sim_out = tmpdir("sim");
    let mut args = vec!["simulate", "--weights-in"];
    let wpath = weights.to_str().unwrap();
    args.push(wpath);
    let res = run(&args, &tiny_overrides(), &sim_out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sim_out.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["schema_version"], 1);
    assert!(metrics["recall_mean"].as_f64().unwrap() >= 0.0);
}

#[test]
fn exit_codes_for_config_errors_and_divergence() {
    // malformed override -> config error (2)
    let out = tmpdir("cfgerr");
    let res = run(&["simulate", "--set", "nonsense"], &[], &out);
    assert_eq!(res.status.code(), Some(2));

    // invalid config value -> config error (2)
    let res = run(
        &["simulate", "--set", "model.decoder.temporal_instances=900"],
        &[],
        &out,
    );
    assert_eq!(res.status.code(), Some(2));

    // absurd learning rate -> divergence (3)
    let mut extra = tiny_overrides();
    extra.extend(["--set".to_string(), "train.learning_rate=1e18".to_string()]);
    let res = run(&["train", "--steps", "4"], &extra, &out);
    assert_eq!(
        res.status.code(),
        Some(3),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&res.stdout),
        String::from_utf8_lossy(&res.stderr)
    );
}
