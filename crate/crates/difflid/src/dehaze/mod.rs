//! Image restoration conditioned on frozen-denoiser features: content
//! cross-attention (CIM) and haze-aware modulation (HAE) blocks in a 4-level
//! encoder-decoder, ablation variants with matched parameter counts, the
//! choice of denoiser tap, and the training loop.

mod block;
mod cim;
mod hae;
mod net;
mod source;
mod train;

pub use block::{DiffLIDBlock, VariantKind};
pub use cim::{ContentIntegration, SelfAttention};
pub use hae::{ChannelAttention, HazeAwareEnhancement};
pub use net::{make_ablation_variant, DehazeConfig, DehazeNet};
pub use source::{FeatureSource, SourceExtractor};
pub use train::{
    evaluate_model, metric_rows_csv, train_dehaze, DehazeRunResult, DehazeTrainConfig,
    EpochMetricRow,
};
