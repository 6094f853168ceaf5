//! Choice of which frozen-denoiser activation feeds the restoration net:
//! the bottleneck (default), or the encoder / decoder taps at the middle
//! resolution, adapted to the bottleneck channel count by a fixed 1x1
//! projection so all three sources are drop-in compatible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{stack_images, DenoiserUnet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hspace::{extract_batch, sample_noise, Domain, HFeature};
use crate::tensor::{derive_seed, Conv2dLayer, Graph, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Encoder,
    Bottleneck,
    Decoder,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Encoder => "encoder",
            FeatureSource::Bottleneck => "bottleneck",
            FeatureSource::Decoder => "decoder",
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(FeatureSource::Encoder),
            "bottleneck" => Ok(FeatureSource::Bottleneck),
            "decoder" => Ok(FeatureSource::Decoder),
            other => Err(Error::Config(format!(
                "unknown feature source {other:?}; expected encoder|bottleneck|decoder"
            ))),
        }
    }
}

/// Extracts features for the restoration net from a chosen denoiser tap.
/// Non-bottleneck taps carry a fixed (frozen, seeded) 1x1 adapter to the
/// bottleneck channel count; it is part of the extraction, not trained, so
/// the comparison isolates where the features come from.
#[derive(Debug)]
pub struct SourceExtractor {
    source: FeatureSource,
    channels: usize,
    adapter: Option<Conv2dLayer>,
}

impl SourceExtractor {
    pub fn new(source: FeatureSource, net: &DenoiserUnet, seed: u64) -> Self {
        let channels = net.bottleneck_channels();
        let adapter = match source {
            FeatureSource::Bottleneck => None,
            _ => {
                let mut rng =
                    Rng::new(derive_seed(seed, &format!("source/adapter/{}", source.name())));
                let mut conv = Conv2dLayer::new(
                    &format!("source.{}.adapter", source.name()),
                    net.tap_channels(),
                    channels,
                    1,
                    1,
                    0,
                    &mut rng,
                );
                for p in conv.params_mut() {
                    p.frozen = true;
                }
                Some(conv)
            }
        };
        SourceExtractor { source, channels, adapter }
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    /// Channel count of every feature this extractor yields.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Same contract as the bottleneck extractor: one shared noise
    /// realization per (t, eps_seed), frozen denoiser, batch of [c,h,w]
    /// images tagged with ids and domains.
    pub fn extract(
        &self,
        net: &DenoiserUnet,
        sched: &NoiseSchedule,
        images: &[(&Tensor, u32, Domain)],
        t: usize,
        eps_seed: u64,
    ) -> Result<Vec<HFeature>> {
        let adapter = match &self.adapter {
            None => return extract_batch(net, sched, images, t, eps_seed),
            Some(a) => a,
        };
        if net.params().iter().any(|p| !p.frozen) {
            return Err(Error::contract(
                "source::extract",
                "denoiser must be frozen before feature extraction (call freeze())",
            ));
        }
        if images.is_empty() {
            return Err(Error::contract("source::extract", "empty image batch"));
        }
        if t > sched.t_steps() {
            return Err(Error::index(
                "source::extract",
                format!("t = {t} outside [0, {}]", sched.t_steps()),
            ));
        }
        let shape = images[0].0.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension(
                "source::extract",
                format!("images must be [c,h,w], got {shape:?}"),
            ));
        }
        let mut noised = Vec::with_capacity(images.len());
        for (x, image_id, domain) in images {
            if x.shape() != shape.as_slice() {
                return Err(Error::dimension(
                    "source::extract",
                    format!("mixed image shapes in batch: {:?} vs {:?}", x.shape(), shape),
                ));
            }
            let eps = sample_noise(&shape, t, *image_id, *domain, eps_seed);
            noised.push(sched.q_sample(x, t, &eps)?);
        }
        let stacked = stack_images(&noised.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let xv = g.constant(stacked);
        let out = net.forward(&mut g, xv, &vec![t; images.len()])?;
        let tap = match self.source {
            FeatureSource::Encoder => out.encoder_tap,
            FeatureSource::Decoder => out.decoder_tap,
            FeatureSource::Bottleneck => unreachable!("bottleneck handled above"),
        };
        let adapted = adapter.forward(&mut g, tap)?;
        let value = g.value(adapted)?;
        let fshape = &value.shape()[1..];
        let per = fshape.iter().product::<usize>();
        let mut features = Vec::with_capacity(images.len());
        for (i, (_, image_id, domain)) in images.iter().enumerate() {
            let slice = value.data()[i * per..(i + 1) * per].to_vec();
            features.push(HFeature {
                feature: Tensor::from_vec(fshape, slice)?,
                t,
                image_id: *image_id,
                domain: *domain,
            });
        }
        Ok(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, toy_beta_endpoints, DenoiserConfig};

    fn tiny_net() -> DenoiserUnet {
        let cfg = DenoiserConfig {
            widths: [8, 12, 16],
            groups: 4,
            time_embed_dim: 16,
            ..DenoiserConfig::default()
        };
        let mut net = DenoiserUnet::new(cfg, &mut Rng::new(3));
        net.freeze();
        net
    }

    #[test]
    fn bottleneck_source_matches_plain_extraction_bit_for_bit() {
        let net = tiny_net();
        let (b0, b1) = toy_beta_endpoints(10);
        let sched = make_schedule(10, b0, b1).unwrap();
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut Rng::new(5));
        let ex = SourceExtractor::new(FeatureSource::Bottleneck, &net, 7);
        let via_source = ex.extract(&net, &sched, &[(&x, 0, Domain::Hazy)], 4, 9).unwrap();
        let direct = extract_batch(&net, &sched, &[(&x, 0, Domain::Hazy)], 4, 9).unwrap();
        assert_eq!(via_source[0].feature, direct[0].feature);
    }

    #[test]
    fn all_sources_yield_the_same_channel_count() {
        let net = tiny_net();
        let (b0, b1) = toy_beta_endpoints(10);
        let sched = make_schedule(10, b0, b1).unwrap();
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut Rng::new(5));
        for source in [FeatureSource::Encoder, FeatureSource::Bottleneck, FeatureSource::Decoder] {
            let ex = SourceExtractor::new(source, &net, 7);
            let feats = ex.extract(&net, &sched, &[(&x, 0, Domain::Clean)], 2, 9).unwrap();
            assert_eq!(feats[0].feature.shape()[0], net.bottleneck_channels(), "{source}");
            assert_eq!(ex.channels(), net.bottleneck_channels());
        }
        // Taps live at the middle resolution, bottleneck one level deeper.
        let enc = SourceExtractor::new(FeatureSource::Encoder, &net, 7)
            .extract(&net, &sched, &[(&x, 0, Domain::Clean)], 2, 9)
            .unwrap();
        assert_eq!(enc[0].feature.shape(), &[16, 8, 8]);
    }

    #[test]
    fn adapter_is_deterministic_in_the_seed_and_frozen() {
        let net = tiny_net();
        let a = SourceExtractor::new(FeatureSource::Decoder, &net, 11);
        let b = SourceExtractor::new(FeatureSource::Decoder, &net, 11);
        let c = SourceExtractor::new(FeatureSource::Decoder, &net, 12);
        let (aw, bw, cw) = (
            &a.adapter.as_ref().unwrap().weight,
            &b.adapter.as_ref().unwrap().weight,
            &c.adapter.as_ref().unwrap().weight,
        );
        assert!(aw.frozen);
        assert_eq!(aw.value, bw.value);
        assert!(aw.value.max_abs_diff(&cw.value).unwrap() > 1e-9);
        // Encoder and decoder adapters differ even at the same seed.
        let d = SourceExtractor::new(FeatureSource::Encoder, &net, 11);
        assert!(aw.value.max_abs_diff(&d.adapter.as_ref().unwrap().weight.value).unwrap() > 1e-9);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["encoder", "bottleneck", "decoder"] {
            assert_eq!(FeatureSource::from_str(s).unwrap().to_string(), s);
        }
        assert!(FeatureSource::from_str("latent").is_err());
    }
}
