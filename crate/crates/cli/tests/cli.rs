use std::path::Path;
use std::process::Command;

fn lassie(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lassie"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "lassie {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn every_subcommand_runs_on_a_tiny_synthetic_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("spec.json"),
        r#"{"n": 2, "image_size": 64, "feature_size": 32, "grid": [8, 6]}"#,
    )
    .unwrap();
    lassie(&["make-synth", "--config", "spec.json", "--seed", "3", "--out-dir", "synth"], dir);
    assert!(dir.join("synth/manifest.json").exists());
    assert!(dir.join("synth/ground_truth.json").exists());

    lassie(
        &["train-prior", "--testbed", "--samples", "20", "--epochs", "1", "--grid", "8", "6", "--out-dir", "prior"],
        dir,
    );
    lassie(
        &[
            "optimize", "--config", "synth/config.json", "--prior", "prior/prior.lsbn", "--phases", "2", "2", "2",
            "--out-dir", "fit",
        ],
        dir,
    );
    assert!(dir.join("fit/result.lsbn").exists());

    let out = lassie(&["eval", "--result", "fit", "--ensemble", "synth", "--out-dir", "eval"], dir);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pck = report["pck_01"]["pck"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&pck));
    assert!(report["recovery"]["mean_iou"].as_f64().is_some());

    lassie(
        &["export", "--result", "fit", "--ensemble", "synth", "--format", "obj,ply,overlays", "--out-dir", "mesh"],
        dir,
    );
    for name in ["instance_1.obj", "instance_1.ply", "instance_0_parts.png"] {
        assert!(dir.join("mesh").join(name).exists(), "{name}");
    }
    lassie(&["repose", "--result", "fit", "--instance", "0", "--blend-with", "1", "--out-dir", "pose"], dir);
    lassie(&["repose", "--result", "fit", "--rest", "--out-dir", "rest"], dir);
    lassie(
        &["transfer-texture", "--src", "fit", "--src-ensemble", "synth", "--dst", "fit", "--dst-instance", "1", "--out-dir", "tex"],
        dir,
    );
    assert!(dir.join("tex/transfer_1.ply").exists());
}

#[test]
fn missing_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lassie"))
        .args(["optimize", "--config", "nope.json"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}
