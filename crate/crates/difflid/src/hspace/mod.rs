//! Bottleneck-feature study: extract the denoiser's innermost activation for
//! paired hazy/clean images across timesteps, train per-timestep decoder
//! probes, measure how image content and haze separate in that space, and
//! test how little the denoiser output reacts to bottleneck replacement.

mod extract;
mod probe;
mod projection;
mod replace;
mod separation;

pub use extract::{extract_batch, extract_h, extraction_noise, sample_noise};
pub use probe::{
    evaluate_probe, load_probe, probe_reconstruct, save_probe, train_probe, DecoderProbe,
    ProbeEvaluation, ProbeTrainConfig,
};
pub use projection::{project_features, projection_csv, Projection, ProjectionRow};
pub use replace::replacement_probe;
pub use separation::{
    default_t_list, separation_metrics, silhouette, sweep_csv, sweep_timesteps, SeparationReport,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Which side of a scene pair a feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Clean,
    Hazy,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Clean => write!(f, "clean"),
            Domain::Hazy => write!(f, "hazy"),
        }
    }
}

/// One bottleneck activation, tagged with where it came from.
#[derive(Clone, Debug)]
pub struct HFeature {
    /// Bottleneck activation, shape [channels, h, w].
    pub feature: Tensor,
    pub t: usize,
    pub image_id: u32,
    pub domain: Domain,
}
