//! Noise-prediction U-Net. Three resolutions, residual blocks with group
//! norm and SiLU, sinusoidal timestep embeddings added as per-channel
//! biases. The innermost activation (the bottleneck) is exposed on every
//! forward pass, along with one encoder and one decoder tap at the middle
//! resolution, so downstream analysis can read features from fixed places.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dLayer, Graph, GroupNormLayer, Linear, Parameter, Rng, Tensor, Var};
use crate::Real;

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { in_channels: 3, widths: [32, 64, 128], groups: 8, time_embed_dim: 64 }
    }
}

struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv2dLayer,
    temb_proj: Linear,
    norm2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new(name: &str, c_in: usize, c_out: usize, temb_dim: usize, groups: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNormLayer::new(&format!("{name}.norm1"), c_in, groups),
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            temb_proj: Linear::new(&format!("{name}.temb"), temb_dim, c_out, rng),
            norm2: GroupNormLayer::new(&format!("{name}.norm2"), c_out, groups),
            conv2: Conv2dLayer::new_zero(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            skip: if c_in != c_out {
                Some(Conv2dLayer::new(&format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng))
            } else {
                None
            },
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let tb = self.temb_proj.forward(g, temb)?;
        let h = g.add_channel_map(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let sk = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(sk, h)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.norm1.params();
        p.extend(self.conv1.params());
        p.extend(self.temb_proj.params());
        p.extend(self.norm2.params());
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.norm1.params_mut();
        p.extend(self.conv1.params_mut());
        p.extend(self.temb_proj.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(s) = &mut self.skip {
            p.extend(s.params_mut());
        }
        p
    }
}

pub struct DenoiserUnet {
    pub cfg: DenoiserConfig,
    temb_fc1: Linear,
    temb_fc2: Linear,
    stem: Conv2dLayer,
    enc0: ResBlock,
    down0: Conv2dLayer,
    enc1: ResBlock,
    down1: Conv2dLayer,
    mid: ResBlock,
    up1: Conv2dLayer,
    merge1: Conv2dLayer,
    dec1: ResBlock,
    up0: Conv2dLayer,
    merge0: Conv2dLayer,
    dec0: ResBlock,
    head_norm: GroupNormLayer,
    head: Conv2dLayer,
}

/// Per-pass activations of interest beyond the prediction itself.
pub struct DenoiserOutput {
    pub eps_hat: Var,
    /// Innermost feature map, [n, widths[2], h/4, w/4].
    pub bottleneck: Var,
    /// Encoder feature at the middle resolution, [n, widths[1], h/2, w/2].
    pub encoder_tap: Var,
    /// Decoder feature at the middle resolution, same shape as encoder tap.
    pub decoder_tap: Var,
}

impl DenoiserUnet {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Self {
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.time_embed_dim;
        let td_out = td * 2;
        let gr = cfg.groups;
        DenoiserUnet {
            temb_fc1: Linear::new("denoiser.temb.fc1", td, td_out, rng),
            temb_fc2: Linear::new("denoiser.temb.fc2", td_out, td_out, rng),
            stem: Conv2dLayer::new("denoiser.stem", cfg.in_channels, w0, 3, 1, 1, rng),
            enc0: ResBlock::new("denoiser.enc0", w0, w0, td_out, gr, rng),
            down0: Conv2dLayer::new("denoiser.down0", w0, w1, 3, 2, 1, rng),
            enc1: ResBlock::new("denoiser.enc1", w1, w1, td_out, gr, rng),
            down1: Conv2dLayer::new("denoiser.down1", w1, w2, 3, 2, 1, rng),
            mid: ResBlock::new("denoiser.mid", w2, w2, td_out, gr, rng),
            up1: Conv2dLayer::new("denoiser.up1", w2, w1, 3, 1, 1, rng),
            merge1: Conv2dLayer::new("denoiser.merge1", 2 * w1, w1, 1, 1, 0, rng),
            dec1: ResBlock::new("denoiser.dec1", w1, w1, td_out, gr, rng),
            up0: Conv2dLayer::new("denoiser.up0", w1, w0, 3, 1, 1, rng),
            merge0: Conv2dLayer::new("denoiser.merge0", 2 * w0, w0, 1, 1, 0, rng),
            dec0: ResBlock::new("denoiser.dec0", w0, w0, td_out, gr, rng),
            head_norm: GroupNormLayer::new("denoiser.head_norm", w0, gr),
            head: Conv2dLayer::new_zero("denoiser.head", w0, cfg.in_channels, 3, 1, 1),
            cfg,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.cfg.widths[2]
    }

    /// Channel count of the encoder/decoder taps at the middle resolution.
    pub fn tap_channels(&self) -> usize {
        self.cfg.widths[1]
    }

    /// Sinusoidal embedding for a batch of timesteps.
    fn timestep_embedding(&self, ts: &[usize]) -> Tensor {
        let d = self.cfg.time_embed_dim;
        let half = d / 2;
        let mut data = vec![0.0; ts.len() * d];
        for (n, &t) in ts.iter().enumerate() {
            for k in 0..half {
                let denom = if half > 1 { (half - 1) as Real } else { 1.0 };
                let freq = (-(10000.0 as Real).ln() * k as Real / denom).exp();
                let angle = t as Real * freq;
                data[n * d + k] = angle.sin();
                data[n * d + half + k] = angle.cos();
            }
        }
        Tensor::from_vec(&[ts.len(), d], data).expect("embedding shape")
    }

    fn check_input(&self, g: &Graph, x: Var, ts: &[usize]) -> Result<()> {
        let s = g.value(x)?.shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::dimension(
                "denoiser::forward",
                format!("expected [n,{},h,w], got {:?}", self.cfg.in_channels, s),
            ));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::dimension(
                "denoiser::forward",
                format!("spatial axes must be divisible by 4, got {}x{}", s[2], s[3]),
            ));
        }
        if s[0] != ts.len() {
            return Err(Error::dimension(
                "denoiser::forward",
                format!("batch axis {} vs {} timesteps", s[0], ts.len()),
            ));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, ts: &[usize]) -> Result<Var> {
        let raw = g.constant(self.timestep_embedding(ts));
        let e = self.temb_fc1.forward(g, raw)?;
        let e = g.silu(e)?;
        self.temb_fc2.forward(g, e)
    }

    fn encode(&self, g: &mut Graph, x: Var, temb: Var) -> Result<(Var, Var, Var)> {
        let h = self.stem.forward(g, x)?;
        let e0 = self.enc0.forward(g, h, temb)?;
        let h = self.down0.forward(g, e0)?;
        let e1 = self.enc1.forward(g, h, temb)?;
        let h = self.down1.forward(g, e1)?;
        let mid = self.mid.forward(g, h, temb)?;
        Ok((e0, e1, mid))
    }

    /// Full forward pass; `override_bottleneck`, when given, replaces the
    /// bottleneck activation fed to the decoder (the reported `bottleneck`
    /// stays the genuine one).
    pub fn forward_full(
        &self,
        g: &mut Graph,
        x: Var,
        ts: &[usize],
        override_bottleneck: Option<Var>,
    ) -> Result<DenoiserOutput> {
        self.check_input(g, x, ts)?;
        let temb = self.embed(g, ts)?;
        let (e0, e1, mid) = self.encode(g, x, temb)?;
        let dec_in = match override_bottleneck {
            Some(h) => {
                let (want, got) = (g.value(mid)?.shape().to_vec(), g.value(h)?.shape().to_vec());
                if want != got {
                    return Err(Error::dimension(
                        "denoiser::forward",
                        format!("bottleneck override shape {:?}, expected {:?}", got, want),
                    ));
                }
                h
            }
            None => mid,
        };
        let h = g.upsample_nearest_2x(dec_in)?;
        let h = self.up1.forward(g, h)?;
        let h = g.concat_channels(h, e1)?;
        let h = self.merge1.forward(g, h)?;
        let d1 = self.dec1.forward(g, h, temb)?;
        let h = g.upsample_nearest_2x(d1)?;
        let h = self.up0.forward(g, h)?;
        let h = g.concat_channels(h, e0)?;
        let h = self.merge0.forward(g, h)?;
        let h = self.dec0.forward(g, h, temb)?;
        let h = self.head_norm.forward(g, h)?;
        let h = g.silu(h)?;
        let eps_hat = self.head.forward(g, h)?;
        Ok(DenoiserOutput { eps_hat, bottleneck: mid, encoder_tap: e1, decoder_tap: d1 })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ts: &[usize]) -> Result<DenoiserOutput> {
        self.forward_full(g, x, ts, None)
    }

    /// Encoder-plus-middle only; cheaper when just the bottleneck is needed.
    pub fn forward_bottleneck(&self, g: &mut Graph, x: Var, ts: &[usize]) -> Result<Var> {
        self.check_input(g, x, ts)?;
        let temb = self.embed(g, ts)?;
        let (_, _, mid) = self.encode(g, x, temb)?;
        Ok(mid)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.temb_fc1.params();
        p.extend(self.temb_fc2.params());
        p.extend(self.stem.params());
        p.extend(self.enc0.params());
        p.extend(self.down0.params());
        p.extend(self.enc1.params());
        p.extend(self.down1.params());
        p.extend(self.mid.params());
        p.extend(self.up1.params());
        p.extend(self.merge1.params());
        p.extend(self.dec1.params());
        p.extend(self.up0.params());
        p.extend(self.merge0.params());
        p.extend(self.dec0.params());
        p.extend(self.head_norm.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.temb_fc1.params_mut();
        p.extend(self.temb_fc2.params_mut());
        p.extend(self.stem.params_mut());
        p.extend(self.enc0.params_mut());
        p.extend(self.down0.params_mut());
        p.extend(self.enc1.params_mut());
        p.extend(self.down1.params_mut());
        p.extend(self.mid.params_mut());
        p.extend(self.up1.params_mut());
        p.extend(self.merge1.params_mut());
        p.extend(self.dec1.params_mut());
        p.extend(self.up0.params_mut());
        p.extend(self.merge0.params_mut());
        p.extend(self.dec0.params_mut());
        p.extend(self.head_norm.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.frozen = true;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::io::hash_params;

    fn small_net() -> DenoiserUnet {
        let cfg = DenoiserConfig { in_channels: 3, widths: [8, 16, 32], groups: 4, time_embed_dim: 16 };
        DenoiserUnet::new(cfg, &mut Rng::new(42))
    }

    #[test]
    fn output_and_tap_shapes() {
        let net = small_net();
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let x = g.constant(Tensor::randn(&[2, 3, 16, 16], &mut rng));
        let out = net.forward(&mut g, x, &[0, 5]).unwrap();
        assert_eq!(g.value(out.eps_hat).unwrap().shape(), &[2, 3, 16, 16]);
        assert_eq!(g.value(out.bottleneck).unwrap().shape(), &[2, 32, 4, 4]);
        assert_eq!(g.value(out.encoder_tap).unwrap().shape(), &[2, 16, 8, 8]);
        assert_eq!(g.value(out.decoder_tap).unwrap().shape(), &[2, 16, 8, 8]);
    }

    #[test]
    fn default_config_bottleneck_is_128_at_quarter_resolution() {
        let net = DenoiserUnet::new(DenoiserConfig::default(), &mut Rng::new(7));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let b = net.forward_bottleneck(&mut g, x, &[3]).unwrap();
        assert_eq!(g.value(b).unwrap().shape(), &[1, 128, 8, 8]);
    }

    #[test]
    fn bottleneck_fast_path_matches_full_forward_bitwise() {
        let net = small_net();
        let mut rng = Rng::new(2);
        let xt = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let mut g1 = Graph::new();
        let x1 = g1.constant(xt.clone());
        let full = net.forward(&mut g1, x1, &[4]).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(xt);
        let fast = net.forward_bottleneck(&mut g2, x2, &[4]).unwrap();
        assert_eq!(g1.value(full.bottleneck).unwrap(), g2.value(fast).unwrap());
    }

    #[test]
    fn forward_is_pure_with_respect_to_parameters() {
        let net = small_net();
        let before = hash_params(&net.params());
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let x = g.constant(Tensor::randn(&[1, 3, 16, 16], &mut rng));
        net.forward(&mut g, x, &[2]).unwrap();
        assert_eq!(hash_params(&net.params()), before);
    }

    #[test]
    fn bottleneck_override_changes_prediction_but_not_reported_feature() {
        let net = small_net();
        let mut rng = Rng::new(4);
        let xt = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let ht = Tensor::randn(&[1, 32, 4, 4], &mut rng);

        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let plain = net.forward(&mut g, x, &[3]).unwrap();
        // The prediction head starts zero-initialized, so compare at the
        // decoder tap, which sits downstream of the bottleneck.
        let plain_dec = g.value(plain.decoder_tap).unwrap().clone();
        let plain_mid = g.value(plain.bottleneck).unwrap().clone();

        let mut g2 = Graph::new();
        let x2 = g2.constant(xt);
        let h = g2.constant(ht);
        let swapped = net.forward_full(&mut g2, x2, &[3], Some(h)).unwrap();
        assert_eq!(g2.value(swapped.bottleneck).unwrap(), &plain_mid);
        let diff = g2.value(swapped.decoder_tap).unwrap().max_abs_diff(&plain_dec).unwrap();
        assert!(diff > 1e-6, "override must reach the decoder, diff {diff}");
    }

    #[test]
    fn override_with_the_genuine_bottleneck_reproduces_the_plain_pass() {
        let net = small_net();
        let mut rng = Rng::new(14);
        let xt = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let mut g1 = Graph::new();
        let x1 = g1.constant(xt.clone());
        let plain = net.forward(&mut g1, x1, &[6]).unwrap();
        let mid = g1.value(plain.bottleneck).unwrap().clone();

        let mut g2 = Graph::new();
        let x2 = g2.constant(xt);
        let h = g2.constant(mid);
        let same = net.forward_full(&mut g2, x2, &[6], Some(h)).unwrap();
        assert_eq!(g1.value(plain.decoder_tap).unwrap(), g2.value(same.decoder_tap).unwrap());
        assert_eq!(g1.value(plain.eps_hat).unwrap(), g2.value(same.eps_hat).unwrap());
    }

    #[test]
    fn wrong_input_shapes_are_dimension_errors() {
        let net = small_net();
        let mut g = Graph::new();
        let bad_c = g.constant(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(net.forward(&mut g, bad_c, &[0]).is_err());
        let bad_hw = g.constant(Tensor::zeros(&[1, 3, 18, 18]));
        assert!(net.forward(&mut g, bad_hw, &[0]).is_err());
        let ok = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
        assert!(net.forward(&mut g, ok, &[0]).is_err(), "timestep count mismatch");
    }
}
