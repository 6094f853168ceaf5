//! End-to-end tests of the command-line interface: every stage runs against
//! a miniature configuration, reruns are byte-identical, bad configs and
//! corrupted datasets are rejected, and the thread cap never changes results.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command as Process;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_difflid");

const STAGES: [&str; 9] = [
    "gen-data",
    "train-diffusion",
    "probe-hspace",
    "sweep-hspace",
    "replace-probe",
    "train-dehaze",
    "ablate",
    "eval",
    "export-plots",
];

fn mini_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "seed": 7,
            "data": {"n_train": 10, "n_test": 3, "size": 32},
            "diffusion": {"t_steps": 12, "widths": [8, 12, 16], "groups": 4,
                          "time_embed_dim": 16, "steps": 60, "batch_size": 2, "lr": 2e-3},
            "hspace": {"t_list": [0, 3, 6, 9, 12], "probe_ts": [0, 6], "n_pairs": 6,
                       "n_seeds": 2, "probe_width": 16, "probe_steps": 60, "probe_batch_size": 4},
            "dehaze": {"widths": [8, 8, 16, 16], "heads": 2, "epochs": 2,
                       "batch_size": 4, "eval_every": 1},
            "ablate": {"n_seeds": 1, "epochs": 1, "n_train": 6, "t2_grid": [2, 6, 10]}
        }"#,
    )
    .unwrap();
    path
}

/// Run one CLI stage; panic with its stderr if it fails.
fn run_stage(config: &Path, out: &Path, stage: &str, envs: &[(&str, &str)]) {
    let mut cmd = Process::new(BIN);
    cmd.arg(stage).arg("--config").arg(config).arg("--out").arg(out);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let res = cmd.output().unwrap();
    assert!(
        res.status.success(),
        "stage {stage} failed:\n{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

/// Map of rel-path -> file bytes for every file under `root`, excluding
/// run_records/ (whose records carry wall-clock timestamps).
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                if rel.starts_with("run_records") {
                    continue;
                }
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn record_content_hash(out: &Path, stage: &str) -> String {
    let text = std::fs::read_to_string(out.join("run_records").join(format!("{stage}.json"))).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["content_hash"].as_str().unwrap().to_string()
}

#[test]
fn all_stages_run_and_rerun_byte_identically() {
    let dir = TempDir::new().unwrap();
    let config = mini_config(dir.path());
    let out = dir.path().join("run");

    for stage in STAGES {
        run_stage(&config, &out, stage, &[]);
    }
    let first = tree_bytes(&out);
    let first_hashes: Vec<String> = STAGES.iter().map(|s| record_content_hash(&out, s)).collect();
    assert!(first.contains_key("dataset/manifest.json"));
    assert!(first.contains_key("diffusion/denoiser/manifest.json"));
    assert!(first.contains_key("hspace/sweep/median.csv"));
    assert!(first.contains_key("eval/report.json"));
    assert!(first.contains_key("ablate/ordering.csv"));
    assert!(first.contains_key("plots/separation_vs_t.csv"));

    // Re-run every stage with the identical config and seed.
    for stage in STAGES {
        run_stage(&config, &out, stage, &[]);
    }
    let second = tree_bytes(&out);
    assert_eq!(first.len(), second.len(), "rerun changed the file set");
    for (rel, bytes) in &first {
        let again = second.get(rel).unwrap_or_else(|| panic!("rerun dropped {rel}"));
        assert_eq!(bytes, again, "rerun changed bytes of {rel}");
    }
    let second_hashes: Vec<String> = STAGES.iter().map(|s| record_content_hash(&out, s)).collect();
    assert_eq!(first_hashes, second_hashes, "rerun changed a run-record content hash");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"seed": 1, "diffusion": {"t_steps": 10, "leraning_rate": 0.001}}"#,
    )
    .unwrap();
    let res = Process::new(BIN)
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!res.status.success(), "misspelled config key was accepted");
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("leraning_rate"), "error does not name the bad key: {stderr}");
}

#[test]
fn corrupted_dataset_is_rejected_naming_the_scene() {
    let dir = TempDir::new().unwrap();
    let config = mini_config(dir.path());
    let out = dir.path().join("run");
    run_stage(&config, &out, "gen-data", &[]);

    // Flip one byte in one stored tensor.
    let victim = out.join("dataset/train/scene_00002_hazy.dltf");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, &bytes).unwrap();

    let res = Process::new(BIN)
        .arg("train-diffusion")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!res.status.success(), "corrupted dataset was accepted");
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("train/00002"),
        "error does not name the corrupted scene: {stderr}"
    );
    // The failed stage must not leave a partial output directory or record.
    assert!(!out.join("diffusion").exists());
    assert!(!out.join("run_records/train-diffusion.json").exists());
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let config = mini_config(dir.path());
    let out = dir.path().join("run");
    run_stage(&config, &out, "gen-data", &[]);
    run_stage(&config, &out, "train-diffusion", &[]);

    run_stage(&config, &out, "sweep-hspace", &[("DIFFLID_THREADS", "1")]);
    let single = std::fs::read(out.join("hspace/sweep/sweep.csv")).unwrap();
    let single_median = std::fs::read(out.join("hspace/sweep/median.csv")).unwrap();

    run_stage(&config, &out, "sweep-hspace", &[("DIFFLID_THREADS", "3")]);
    let threaded = std::fs::read(out.join("hspace/sweep/sweep.csv")).unwrap();
    let threaded_median = std::fs::read(out.join("hspace/sweep/median.csv")).unwrap();

    assert_eq!(single, threaded, "thread cap changed per-seed sweep rows");
    assert_eq!(single_median, threaded_median, "thread cap changed medians");
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let config = mini_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_stage(&config, &out_a, "gen-data", &[]);

    let res = Process::new(BIN)
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .arg("--seed")
        .arg("99")
        .output()
        .unwrap();
    assert!(res.status.success());
    let a = std::fs::read(out_a.join("dataset/train/scene_00000_clean.dltf")).unwrap();
    let b = std::fs::read(out_b.join("dataset/train/scene_00000_clean.dltf")).unwrap();
    assert_ne!(a, b, "--seed 99 produced the same scenes as the config seed");
}
