//! End-to-end checks of the command-line surface: subcommands, exit codes,
//! determinism of generated artifacts and the shape of emitted files.

use std::path::Path;
use std::process::Command;

fn rvo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rvo"))
}

fn write_micro_run_config(path: &Path) {
    let cfg = serde_json::json!({
        "points_per_frame": 32,
        "image_width": 32,
        "image_height": 32,
        "levels": 2,
        "point_widths": [8, 8],
        "image_widths": [8, 8],
        "group_k": 4,
        "interp_k": 2,
        "fusion_samples": 2,
        "fusion_heads": 2,
        "cost_k1": 4,
        "cost_k2": 3,
        "embed_width": 8,
        "level_weights": [1.0, 2.0],
        "batch_size": 2,
        "seed": 7
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn write_micro_scene(path: &Path) {
    let scene = serde_json::json!({
        "static_points": 48,
        "image_width": 32,
        "image_height": 32,
        "focal": 32.0,
        "ego": {"type": "constant", "eula": [0.004, 0.0, 0.0], "t": [0.1, 0.01, 0.0]}
    });
    std::fs::write(path, serde_json::to_string_pretty(&scene).unwrap()).unwrap();
}

fn sha256_dir(dir: &Path) -> Vec<(String, u64, u32)> {
    // Cheap content fingerprint: path, length, crc-ish rolling sum.
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap()).collect();
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let mut acc: u32 = 0;
                for b in &bytes {
                    acc = acc.wrapping_mul(31).wrapping_add(*b as u32);
                }
                out.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    bytes.len() as u64,
                    acc,
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    write_micro_scene(&scene);
    for out in ["a", "b"] {
        let status = rvo()
            .args(["generate", "--out"])
            .arg(dir.path().join(out))
            .args(["--frames", "6", "--seed", "7", "--scene"])
            .arg(&scene)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        sha256_dir(&dir.path().join("a")),
        sha256_dir(&dir.path().join("b")),
        "same seed must produce byte-identical datasets"
    );
}

#[test]
fn generate_records_cluster_count_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let status = rvo()
        .args(["generate", "--out"])
        .arg(dir.path())
        .args(["--frames", "3", "--seed", "1", "--dynamic-clusters", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("sequences/000/config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["clusters"].as_array().unwrap().len(), 2);
}

#[test]
fn generate_rejects_negative_noise_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = rvo()
        .args(["generate", "--out"])
        .arg(dir.path())
        .args(["--frames", "3", "--noise=-0.25"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("noise_sigma"), "must name the field: {stderr}");
}

#[test]
fn train_infer_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    let cfg = dir.path().join("run.json");
    write_micro_scene(&scene);
    write_micro_run_config(&cfg);
    let data = dir.path().join("data");
    assert!(rvo()
        .args(["generate", "--out"])
        .arg(&data)
        .args(["--frames", "8", "--seed", "7", "--scene"])
        .arg(&scene)
        .status()
        .unwrap()
        .success());

    let run = dir.path().join("run");
    assert!(rvo()
        .args(["train", "--data"])
        .arg(&data)
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&run)
        .args(["--steps", "3", "--deterministic", "--seed", "7"])
        .status()
        .unwrap()
        .success());
    assert!(run.join("checkpoint.bin").exists());
    assert!(run.join("config.json").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,total_loss,L1,L2,s_e,s_t,lr"));

    // Default hyperparameters are recorded in the snapshot.
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["lr"], 0.001);
    assert_eq!(snapshot["epochs"], 40);
    assert_eq!(snapshot["lr_decay"], 0.1);
    assert_eq!(snapshot["s_e_init"], -2.5);
    assert_eq!(snapshot["s_t_init"], 0.0);
    assert_eq!(snapshot["level_weights"], serde_json::json!([1.0, 2.0]));

    // Resume continues to a later step.
    assert!(rvo()
        .args(["train", "--data"])
        .arg(&data)
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("run2"))
        .args(["--steps", "5", "--resume"])
        .arg(run.join("checkpoint.bin"))
        .status()
        .unwrap()
        .success());
    let log2 = std::fs::read_to_string(dir.path().join("run2/train_log.csv")).unwrap();
    assert!(log2.lines().any(|l| l.starts_with("5,")));

    let infer = dir.path().join("infer");
    assert!(rvo()
        .args(["infer", "--checkpoint"])
        .arg(run.join("checkpoint.bin"))
        .args(["--data"])
        .arg(&data)
        .args(["--sequence", "000", "--out"])
        .arg(&infer)
        .status()
        .unwrap()
        .success());
    let traj = infer.join("trajectory.txt");
    assert!(traj.exists());
    // Confidence dump rows: one per point per level per pair.
    let conf = std::fs::read_to_string(infer.join("confidence.csv")).unwrap();
    let pairs = 7;
    let per_pair = 16 + 8; // level sizes for 32 points over 2 levels
    assert_eq!(conf.trim().lines().count(), 1 + pairs * per_pair);

    let eval = dir.path().join("eval");
    assert!(rvo()
        .args(["eval", "--estimate"])
        .arg(&traj)
        .args(["--gt"])
        .arg(data.join("sequences/000/poses.txt"))
        .args(["--out"])
        .arg(&eval)
        .status()
        .unwrap()
        .success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap())
            .unwrap();
    let rows = metrics["segments"]["per_length"].as_array().unwrap();
    let lengths: Vec<f64> = rows.iter().map(|r| r["length_m"].as_f64().unwrap()).collect();
    assert_eq!(lengths, vec![20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0]);
    assert!(eval.join("per_length.csv").exists());

    let plots = dir.path().join("plots");
    assert!(rvo()
        .args(["plot", "--trajectory"])
        .arg(&traj)
        .args(["--gt"])
        .arg(data.join("sequences/000/poses.txt"))
        .args(["--confidence"])
        .arg(infer.join("confidence.csv"))
        .args(["--out"])
        .arg(&plots)
        .status()
        .unwrap()
        .success());
    for name in ["trajectory.png", "confidence.png"] {
        let bytes = std::fs::read(plots.join(name)).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n", "{name} must be a PNG");
    }
}

#[test]
fn eval_of_identical_trajectories_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    // A straight 30-frame path, 1 m per frame: long enough for the 20 m row.
    let mut lines = String::new();
    for i in 0..30 {
        lines.push_str(&format!("1 0 0 {} 0 1 0 0 0 0 1 0\n", i as f64));
    }
    let traj = dir.path().join("traj.txt");
    std::fs::write(&traj, lines).unwrap();
    let out = dir.path().join("eval");
    assert!(rvo()
        .args(["eval", "--estimate"])
        .arg(&traj)
        .args(["--gt"])
        .arg(&traj)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["segments"]["t_rel"], 0.0);
    assert_eq!(metrics["segments"]["r_rel"], 0.0);
    assert_eq!(metrics["rpe"]["translation_rmse_m"], 0.0);
}

#[test]
fn plot_handles_two_pose_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("tiny.txt");
    std::fs::write(
        &traj,
        "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 1 0 1 0 0 0 0 1 0\n",
    )
    .unwrap();
    let out = dir.path().join("plots");
    assert!(rvo()
        .args(["plot", "--trajectory"])
        .arg(&traj)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let bytes = std::fs::read(out.join("trajectory.png")).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let output = rvo()
        .args(["infer", "--checkpoint"])
        .arg(dir.path().join("missing.bin"))
        .args(["--data"])
        .arg(dir.path())
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn malformed_trajectory_exits_5_naming_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "1 0 0 0 0 1 0 0 0 0 1 0\nnot a number\n").unwrap();
    let output = rvo()
        .args(["eval", "--estimate"])
        .arg(&bad)
        .args(["--gt"])
        .arg(&bad)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 2"), "must name the line: {stderr}");
}

#[test]
fn missing_data_root_is_config_error() {
    let output = rvo()
        .args(["train", "--steps", "1"])
        .env_remove("RVO_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}
