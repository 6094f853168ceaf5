//! Experiment configuration: one strict JSON document covering every stage.
//!
//! Unknown keys are fatal (a typoed hyperparameter must never silently fall
//! back to a default), missing keys take documented defaults, and the
//! canonical serialization is hashed so runs can be compared by config
//! identity. All randomness downstream fans out from the single `seed` via
//! labeled hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dehaze::{DehazeConfig, DehazeTrainConfig, FeatureSource};
use crate::diffusion::{DenoiserConfig, DiffusionTrainConfig};
use crate::error::{Error, Result};
use crate::hazegen::{DatasetConfig, HazeRanges};
use crate::hspace::{default_t_list, ProbeTrainConfig};
use crate::tensor::derive_seed;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
    /// Scene edge length; the generator supports 32 and 64.
    pub size: usize,
    pub airlight_min: Real,
    pub airlight_max: Real,
    pub beta_min: Real,
    pub beta_max: Real,
    pub export_png: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DataSection {
            n_train: d.n_train,
            n_test: d.n_test,
            size: d.size,
            airlight_min: d.ranges.airlight_min,
            airlight_max: d.ranges.airlight_max,
            beta_min: d.ranges.beta_min,
            beta_max: d.ranges.beta_max,
            export_png: d.export_png,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Number of diffusion steps T.
    pub t_steps: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub time_embed_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: Real,
    pub lr_decay_every: u64,
    pub lr_decay: Real,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let t = DiffusionTrainConfig::default();
        DiffusionSection {
            t_steps: 100,
            // Desk-scale widths; enough capacity for 32x32 scenes.
            widths: [16, 32, 64],
            groups: 8,
            time_embed_dim: 64,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay_every: t.lr_decay_every,
            lr_decay: t.lr_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HspaceSection {
    /// Timesteps swept for separation scores; null = a spread over [0, T].
    pub t_list: Option<Vec<usize>>,
    /// Timesteps that get decoder probes; null = [0, T/2].
    pub probe_ts: Option<Vec<usize>>,
    /// Scene pairs used for sweeps and the replacement experiment.
    pub n_pairs: usize,
    /// Independent noise seeds the sweep aggregates over (medians).
    pub n_seeds: usize,
    pub probe_width: usize,
    pub probe_steps: u64,
    pub probe_batch_size: usize,
    pub probe_lr: Real,
}

impl Default for HspaceSection {
    fn default() -> Self {
        let p = ProbeTrainConfig::default();
        HspaceSection {
            t_list: None,
            probe_ts: None,
            n_pairs: 32,
            n_seeds: 3,
            probe_width: p.width,
            probe_steps: p.steps,
            probe_batch_size: p.batch_size,
            probe_lr: p.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DehazeSection {
    pub widths: [usize; 4],
    pub heads: usize,
    /// Timestep of the content features (cross-attention side).
    pub t1: usize,
    /// Timestep of the haze features (modulation side); null = T/2.
    pub t2: Option<usize>,
    /// Which denoiser activation to consume.
    pub source: FeatureSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub eval_every: usize,
}

impl Default for DehazeSection {
    fn default() -> Self {
        let t = DehazeTrainConfig::default();
        DehazeSection {
            widths: DehazeConfig::default().widths,
            heads: DehazeConfig::default().heads,
            t1: t.t1,
            t2: None,
            source: FeatureSource::Bottleneck,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Seeds per variant; orderings are taken over their medians.
    pub n_seeds: usize,
    /// Training epochs for ablation runs; null = dehaze.epochs.
    pub epochs: Option<usize>,
    /// Training scenes per ablation run; null = the full train split.
    pub n_train: Option<usize>,
    /// t2 values swept; null = {0.1, 0.3, 0.5, 0.7, 0.9} x T, rounded.
    pub t2_grid: Option<Vec<usize>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { n_seeds: 3, epochs: None, n_train: None, t2_grid: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own stream from it by label.
    pub seed: u64,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub hspace: HspaceSection,
    pub dehaze: DehazeSection,
    pub ablate: AblateSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be positive".into()));
        }
        if self.data.size != 32 && self.data.size != 64 {
            return Err(Error::Config(format!(
                "data.size must be 32 or 64, got {}",
                self.data.size
            )));
        }
        self.haze_ranges().validate()?;
        let d = &self.diffusion;
        if d.t_steps == 0 {
            return Err(Error::Config("diffusion.t_steps must be at least 1".into()));
        }
        if d.steps == 0 || d.batch_size == 0 {
            return Err(Error::Config("diffusion.steps and batch_size must be positive".into()));
        }
        if d.widths.iter().any(|w| *w == 0 || w % d.groups != 0) {
            return Err(Error::Config(format!(
                "diffusion.widths {:?} must be positive multiples of groups = {}",
                d.widths, d.groups
            )));
        }
        let t = d.t_steps;
        let (t1, t2) = (self.dehaze.t1, self.t2());
        if t1 >= t2 || t2 > t {
            return Err(Error::Config(format!(
                "need 0 <= t1 < t2 <= T = {t}, got t1 = {t1}, t2 = {t2}"
            )));
        }
        for (label, list) in [("hspace.t_list", self.t_list()), ("hspace.probe_ts", self.probe_ts())]
        {
            if let Some(bad) = list.iter().find(|v| **v > t) {
                return Err(Error::Config(format!("{label} contains {bad} > T = {t}")));
            }
        }
        if self.hspace.n_pairs == 0 || self.hspace.n_seeds == 0 {
            return Err(Error::Config("hspace.n_pairs and n_seeds must be positive".into()));
        }
        if self.hspace.probe_steps == 0 || self.hspace.probe_batch_size == 0 {
            return Err(Error::Config("probe steps and batch size must be positive".into()));
        }
        // Reuses the net's own width/head divisibility rules.
        self.dehaze_config(1).validate()?;
        if self.dehaze.epochs == 0 || self.dehaze.batch_size == 0 {
            return Err(Error::Config("dehaze.epochs and batch_size must be positive".into()));
        }
        if self.ablate.n_seeds == 0 {
            return Err(Error::Config("ablate.n_seeds must be positive".into()));
        }
        for t2 in self.t2_grid() {
            if t2 <= t1 || t2 > t {
                return Err(Error::Config(format!(
                    "ablate.t2_grid value {t2} outside ({t1}, {t}]"
                )));
            }
        }
        Ok(())
    }

    pub fn haze_ranges(&self) -> HazeRanges {
        HazeRanges {
            airlight_min: self.data.airlight_min,
            airlight_max: self.data.airlight_max,
            beta_min: self.data.beta_min,
            beta_max: self.data.beta_max,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            size: self.data.size,
            ranges: self.haze_ranges(),
            export_png: self.data.export_png,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            widths: self.diffusion.widths,
            groups: self.diffusion.groups,
            time_embed_dim: self.diffusion.time_embed_dim,
        }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps: self.diffusion.steps,
            batch_size: self.diffusion.batch_size,
            lr: self.diffusion.lr,
            lr_decay_every: self.diffusion.lr_decay_every,
            lr_decay: self.diffusion.lr_decay,
        }
    }

    pub fn probe_train_config(&self) -> ProbeTrainConfig {
        ProbeTrainConfig {
            width: self.hspace.probe_width,
            steps: self.hspace.probe_steps,
            batch_size: self.hspace.probe_batch_size,
            lr: self.hspace.probe_lr,
        }
    }

    pub fn dehaze_config(&self, h_channels: usize) -> DehazeConfig {
        DehazeConfig {
            widths: self.dehaze.widths,
            heads: self.dehaze.heads,
            h_channels,
            in_channels: 3,
        }
    }

    pub fn dehaze_train_config(&self) -> DehazeTrainConfig {
        DehazeTrainConfig {
            epochs: self.dehaze.epochs,
            batch_size: self.dehaze.batch_size,
            lr: self.dehaze.lr,
            t1: self.dehaze.t1,
            t2: self.t2(),
            eval_every: self.dehaze.eval_every,
            eval_eps_seed: derive_seed(self.seed, "dehaze/eval-eps"),
        }
    }

    /// Resolved haze-feature timestep: configured value or T/2.
    pub fn t2(&self) -> usize {
        self.dehaze.t2.unwrap_or(self.diffusion.t_steps / 2)
    }

    /// Resolved sweep timesteps.
    pub fn t_list(&self) -> Vec<usize> {
        self.hspace
            .t_list
            .clone()
            .unwrap_or_else(|| default_t_list(self.diffusion.t_steps))
    }

    /// Resolved probe timesteps.
    pub fn probe_ts(&self) -> Vec<usize> {
        self.hspace.probe_ts.clone().unwrap_or_else(|| vec![0, self.diffusion.t_steps / 2])
    }

    /// Resolved t2 sweep grid: {0.1, 0.3, 0.5, 0.7, 0.9} x T by default.
    pub fn t2_grid(&self) -> Vec<usize> {
        self.ablate.t2_grid.clone().unwrap_or_else(|| {
            [0.1, 0.3, 0.5, 0.7, 0.9]
                .iter()
                .map(|f| ((self.diffusion.t_steps as Real * f).round() as usize).max(1))
                .collect()
        })
    }

    /// Canonical serialization (field order fixed by the struct).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Hash of the canonical serialization; identifies a run's settings.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Parse a strict JSON config. Unknown keys are rejected with the key named.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_the_default_config() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.diffusion.t_steps, 100);
        assert_eq!(cfg.t2(), 50);
        assert_eq!(cfg.t_list(), vec![0, 10, 25, 50, 75, 90, 100]);
        assert_eq!(cfg.probe_ts(), vec![0, 50]);
        assert_eq!(cfg.t2_grid(), vec![10, 30, 50, 70, 90]);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config(r#"{"diffusion": {"leraning_rate": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("leraning_rate"), "{err}");
        let err = parse_config(r#"{"sede": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn timestep_invariants_are_enforced() {
        assert!(parse_config(r#"{"dehaze": {"t1": 50, "t2": 50}}"#).is_err());
        assert!(parse_config(r#"{"dehaze": {"t2": 101}}"#).is_err());
        // t1 = 99 with the default t2 = T/2 = 50 violates t1 < t2.
        assert!(parse_config(r#"{"dehaze": {"t1": 99}}"#).is_err());
        // Large t1 needs both an explicit t2 and a compatible sweep grid.
        assert!(parse_config(
            r#"{"dehaze": {"t1": 99, "t2": 100}, "ablate": {"t2_grid": [100]}}"#
        )
        .is_ok());
        // The t2 sweep grid must stay inside (t1, T].
        assert!(parse_config(r#"{"ablate": {"t2_grid": [0]}}"#).is_err());
        assert!(parse_config(r#"{"ablate": {"t2_grid": [150]}}"#).is_err());
    }

    #[test]
    fn hash_is_stable_under_round_trip_and_sensitive_to_values() {
        let a = parse_config("{}").unwrap();
        let b = parse_config(&a.canonical_json()).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = parse_config(r#"{"seed": 1}"#).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn structural_validations_fire() {
        // Dehaze widths must be divisible by heads.
        assert!(parse_config(r#"{"dehaze": {"widths": [10, 16, 32, 64]}}"#).is_err());
        // Denoiser widths must be divisible by groups.
        assert!(parse_config(r#"{"diffusion": {"widths": [12, 32, 64]}}"#).is_err());
        // Scene size limited to the generator's sizes.
        assert!(parse_config(r#"{"data": {"size": 48}}"#).is_err());
        // Sweep timesteps beyond T.
        assert!(parse_config(r#"{"hspace": {"t_list": [0, 101]}}"#).is_err());
        // Out-of-range haze physics.
        assert!(parse_config(r#"{"data": {"airlight_max": 1.5}}"#).is_err());
    }
}
