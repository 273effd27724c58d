//! CLI surface and phase-isolation tests against the compiled binary.

use std::path::Path;
use std::process::Command;

use subfit::numerics::read_matrix;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subfit"))
}

/// Minimal fast config for exercising the phase plumbing.
fn small_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "seed": 7,
  "dataset": {{
    "generator": {{
      "kind": "two-moons",
      "n_train": 64, "n_val": 32, "n_test": 64,
      "noise": 0.25,
      "pretrain_n_train": 64, "pretrain_n_val": 32,
      "ood_shifts": [[3.0, 3.0]],
      "ood_n": 64
    }}
  }},
  "model": {{ "hidden": [8, 8] }},
  "projection": {{ "kind": "svd", "rank": 2 }},
  "pretrain": {{ "epochs": 5, "batch_size": 16 }},
  "train": {{ "epochs": 8, "batch_size": 16 }},
  "swag": {{ "k": 3, "samples": 5, "epochs": 6 }},
  "laplace": {{ "structure": "kron", "samples": 5 }},
  "out_dir": {out:?}
}}"#,
        out = out_dir.to_string_lossy()
    )
}

fn run_phase(config: &Path, phase: &str, extra: &[&str]) -> std::process::Output {
    bin()
        .arg(phase)
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .expect("spawn subfit")
}

fn assert_code(out: &std::process::Output, want: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_and_phase_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(&out)).unwrap();

    for phase in [
        "gen-data",
        "pretrain",
        "project",
        "train-map",
        "fit-swag",
        "fit-laplace",
    ] {
        let res = run_phase(&config, phase, &[]);
        assert_code(&res, 0, phase);
    }
    for posterior in ["map", "swag", "laplace"] {
        let res = run_phase(&config, "evaluate", &["--posterior", posterior]);
        assert_code(&res, 0, "evaluate");
        let res = run_phase(&config, "ood", &["--posterior", posterior]);
        assert_code(&res, 0, "ood");
    }

    // Phase isolation: delete the SWAG artifacts and refit from the same MAP
    // checkpoint; the posterior files must come back byte-identical.
    let posterior_dir = out.join("fit-swag").join("posterior");
    let before: Vec<(String, Vec<u8>)> = ["mu.sbmx", "sigma2.sbmx", "D.sbmx", "meta.json"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(posterior_dir.join(f)).unwrap()))
        .collect();
    std::fs::remove_dir_all(out.join("fit-swag")).unwrap();
    assert_code(&run_phase(&config, "fit-swag", &[]), 0, "refit");
    for (name, bytes) in &before {
        assert_eq!(
            &std::fs::read(posterior_dir.join(name)).unwrap(),
            bytes,
            "{name} not reproduced exactly"
        );
    }

    // Every emitted matrix file round-trips through the SBMX reader.
    let mut checked = 0;
    let mut stack = vec![out.clone()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "sbmx") {
                read_matrix(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                checked += 1;
            }
        }
    }
    assert!(checked > 10, "expected many sbmx artifacts, found {checked}");
}

#[test]
fn missing_prerequisites_name_the_absent_phase() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(&out)).unwrap();

    let res = run_phase(&config, "train-map", &[]);
    assert_code(&res, 2, "train-map without pretrain");
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("pretrain"), "message should name the absent phase: {stderr}");

    let res = run_phase(&config, "fit-swag", &[]);
    assert_code(&res, 2, "fit-swag without train-map");
    assert!(String::from_utf8_lossy(&res.stderr).contains("train-map"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");

    // Unknown keys are rejected.
    std::fs::write(
        &config,
        r#"{ "seed": 1, "dataset": {"generator": {"kind": "two-moons"}},
             "model": {"hidden": [4]}, "projection": {"kind": "svd", "rank": 2},
             "out_dir": "/tmp/x", "mystery_knob": 3 }"#,
    )
    .unwrap();
    assert_code(&run_phase(&config, "gen-data", &[]), 2, "unknown key");

    // Invalid values are rejected.
    std::fs::write(
        &config,
        r#"{ "seed": 1, "dataset": {"generator": {"kind": "two-moons"}},
             "model": {"hidden": [4]}, "projection": {"kind": "svd", "rank": 0},
             "out_dir": "/tmp/x" }"#,
    )
    .unwrap();
    assert_code(&run_phase(&config, "gen-data", &[]), 2, "zero rank");

    // Missing output directory.
    std::fs::write(
        &config,
        r#"{ "seed": 1, "dataset": {"generator": {"kind": "two-moons"}},
             "model": {"hidden": [4]}, "projection": {"kind": "svd", "rank": 2} }"#,
    )
    .unwrap();
    assert_code(&run_phase(&config, "gen-data", &[]), 2, "no out dir");

    // Unreadable config path.
    assert_code(
        &run_phase(Path::new("/nonexistent/config.json"), "gen-data", &[]),
        2,
        "missing config",
    );
}

#[test]
fn train_fraction_override_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(&out)).unwrap();

    for phase in ["gen-data", "pretrain", "project"] {
        assert_code(&run_phase(&config, phase, &[]), 0, phase);
    }
    let res = run_phase(&config, "train-map", &["--train-fraction", "0.1"]);
    assert_code(&res, 0, "train-map with fraction");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let rows = manifest["phases"]["train-map"]["notes"]["train_rows"]
        .as_u64()
        .unwrap();
    assert_eq!(rows, 7, "ceil(0.1 * 64) training rows");
}

#[test]
fn evaluate_on_map_coerces_to_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(&out)).unwrap();
    for phase in ["gen-data", "pretrain", "project", "train-map"] {
        assert_code(&run_phase(&config, phase, &[]), 0, phase);
    }
    assert_code(&run_phase(&config, "evaluate", &[]), 0, "evaluate default");
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("evaluate").join("metrics-map.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["samples"], 1);
    assert_eq!(metrics["mean_epistemic"], 0.0);
    assert!(metrics["auroc"].is_null());
}
