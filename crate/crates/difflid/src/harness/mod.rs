//! Pipeline coordination: the command set exposed by the `difflid` binary,
//! stage dispatch with failure cleanup, and reproducibility records.
//!
//! Every stage owns one subdirectory of the run directory. A stage that
//! fails leaves nothing behind: its subdirectory is removed so a rerun
//! starts clean. A stage that succeeds gets a run record under
//! `run_records/` capturing the config, seed, artifact list, and a content
//! hash over the artifact bytes — two runs of the same stage with the same
//! config and seed produce identical content hashes.

mod parallel;
mod stages;

pub use parallel::{parallel_map, thread_cap};
pub use stages::{ProbeReportEntry, ProbeStageReport, ReplacementReport};

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// The nine pipeline stages, in their usual execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    GenData,
    TrainDiffusion,
    ProbeHspace,
    SweepHspace,
    ReplaceProbe,
    TrainDehaze,
    Ablate,
    Eval,
    ExportPlots,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::TrainDiffusion,
        Command::ProbeHspace,
        Command::SweepHspace,
        Command::ReplaceProbe,
        Command::TrainDehaze,
        Command::Ablate,
        Command::Eval,
        Command::ExportPlots,
    ];

    /// The name used on the command line and in run-record filenames.
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDiffusion => "train-diffusion",
            Command::ProbeHspace => "probe-hspace",
            Command::SweepHspace => "sweep-hspace",
            Command::ReplaceProbe => "replace-probe",
            Command::TrainDehaze => "train-dehaze",
            Command::Ablate => "ablate",
            Command::Eval => "eval",
            Command::ExportPlots => "export-plots",
        }
    }

    /// The run-directory subtree this stage writes; removed on failure.
    pub fn owned_subdir(&self) -> &'static str {
        match self {
            Command::GenData => "dataset",
            Command::TrainDiffusion => "diffusion",
            Command::ProbeHspace => "hspace/probes",
            Command::SweepHspace => "hspace/sweep",
            Command::ReplaceProbe => "hspace/replace",
            Command::TrainDehaze => "dehaze",
            Command::Ablate => "ablate",
            Command::Eval => "eval",
            Command::ExportPlots => "plots",
        }
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
                Error::Config(format!(
                    "unknown command {s:?}; expected one of {}",
                    names.join("|")
                ))
            })
    }
}

/// Written to `run_records/<command>.json` after a successful stage.
/// Timestamps are informational only: they are excluded from `content_hash`,
/// and the `run_records` directory is excluded from byte-for-byte
/// reproducibility comparisons between reruns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Relative paths (under the run directory) of every file the stage
    /// produced, sorted.
    pub artifacts: Vec<String>,
    /// SHA-256 over the command name, config hash, seed, and each
    /// artifact's path and file hash, in sorted path order.
    pub content_hash: String,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn content_hash(
    command: Command,
    config_hash: &str,
    seed: u64,
    out: &Path,
    artifacts: &[String],
) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(command.name().as_bytes());
    hasher.update(b"\n");
    hasher.update(config_hash.as_bytes());
    hasher.update(b"\n");
    hasher.update(seed.to_string().as_bytes());
    hasher.update(b"\n");
    for rel in artifacts {
        let path = out.join(rel);
        let bytes = fs::read(&path).map_err(|_| {
            Error::contract(
                "run_record",
                format!("stage {} listed missing artifact {rel}", command.name()),
            )
        })?;
        hasher.update(rel.as_bytes());
        hasher.update(b"\n");
        hasher.update(hex::encode(Sha256::digest(&bytes)).as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    match command {
        Command::GenData => stages::stage_gen_data(cfg, out),
        Command::TrainDiffusion => stages::stage_train_diffusion(cfg, out),
        Command::ProbeHspace => stages::stage_probe_hspace(cfg, out),
        Command::SweepHspace => stages::stage_sweep_hspace(cfg, out),
        Command::ReplaceProbe => stages::stage_replace_probe(cfg, out),
        Command::TrainDehaze => stages::stage_train_dehaze(cfg, out),
        Command::Ablate => stages::stage_ablate(cfg, out),
        Command::Eval => stages::stage_eval(cfg, out),
        Command::ExportPlots => stages::stage_export_plots(cfg, out),
    }
}

/// Run one stage against a run directory. On failure the stage's own
/// subdirectory is removed so partial output never masquerades as a result.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    fs::create_dir_all(out)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    let started = unix_ms();
    let mut artifacts = match dispatch(command, cfg, out) {
        Ok(a) => a,
        Err(e) => {
            let sub = out.join(command.owned_subdir());
            if sub.exists() {
                let _ = fs::remove_dir_all(&sub);
            }
            return Err(e);
        }
    };
    artifacts.sort();
    artifacts.dedup();
    let config_hash = cfg.config_hash();
    let content = content_hash(command, &config_hash, cfg.seed, out, &artifacts)?;
    let record = RunRecord {
        command: command.name().to_string(),
        config: serde_json::to_value(cfg)?,
        config_hash,
        seed: cfg.seed,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        artifacts,
        content_hash: content,
    };
    let rec_dir = out.join("run_records");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(rec_dir.display().to_string(), e))?;
    let rec_path = rec_dir.join(format!("{}.json", command.name()));
    let text = serde_json::to_string_pretty(&record)?;
    fs::write(&rec_path, text).map_err(|e| Error::io(rec_path.display().to_string(), e))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn command_names_round_trip() {
        for cmd in Command::ALL {
            assert_eq!(cmd.name().parse::<Command>().unwrap(), cmd);
        }
        let err = "probe".parse::<Command>().unwrap_err().to_string();
        assert!(err.contains("gen-data"), "error lists valid names: {err}");
    }

    #[test]
    fn owned_subdirs_are_distinct_and_rooted() {
        let mut dirs: Vec<&str> = Command::ALL.iter().map(|c| c.owned_subdir()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), Command::ALL.len());
        for d in dirs {
            assert!(!d.starts_with('/') && !d.contains(".."));
        }
    }

    fn tiny_cfg() -> ExperimentConfig {
        parse_config(
            r#"{
                "data": {"n_train": 3, "n_test": 2, "size": 32},
                "diffusion": {"t_steps": 10, "widths": [8, 12, 16], "groups": 4,
                               "time_embed_dim": 16, "steps": 6, "batch_size": 2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn gen_data_writes_record_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let rec1 = run(Command::GenData, &cfg, dir.path()).unwrap();
        assert_eq!(rec1.command, "gen-data");
        assert_eq!(rec1.config_hash, cfg.config_hash());
        assert!(!rec1.artifacts.is_empty());
        for rel in &rec1.artifacts {
            assert!(dir.path().join(rel).exists(), "missing artifact {rel}");
        }
        assert!(dir.path().join("run_records/gen-data.json").exists());
        let rec2 = run(Command::GenData, &cfg, dir.path()).unwrap();
        assert_eq!(rec1.content_hash, rec2.content_hash);
        assert_eq!(rec1.artifacts, rec2.artifacts);
    }

    #[test]
    fn failed_stage_cleans_its_subdirectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        // No dataset yet: training must fail and leave no diffusion/ dir.
        let err = run(Command::TrainDiffusion, &cfg, dir.path());
        assert!(err.is_err());
        assert!(!dir.path().join("diffusion").exists());
        assert!(!dir.path().join("run_records/train-diffusion.json").exists());
    }

    #[test]
    fn export_plots_with_empty_run_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let err = run(Command::ExportPlots, &cfg, dir.path()).unwrap_err();
        assert!(err.to_string().contains("nothing to export"), "{err}");
        assert!(!dir.path().join("plots").exists());
    }
}
