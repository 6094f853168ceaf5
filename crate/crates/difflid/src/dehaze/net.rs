//! The restoration network: a 4-level encoder-decoder of restoration blocks
//! with skip connections, fed the denoiser's bottleneck features at two
//! timesteps, with a global residual to the input image.

use crate::dehaze::block::{DiffLIDBlock, VariantKind};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Conv2dLayer, Graph, Parameter, Rng, Var};
use crate::Real;

#[derive(Clone, Debug)]
pub struct DehazeConfig {
    /// Channel widths of the four resolution levels.
    pub widths: [usize; 4],
    /// Attention heads in every content-integration block.
    pub heads: usize,
    /// Channel count of the denoiser bottleneck features this net consumes.
    pub h_channels: usize,
    pub in_channels: usize,
}

impl Default for DehazeConfig {
    fn default() -> Self {
        DehazeConfig { widths: [16, 32, 64, 128], heads: 4, h_channels: 128, in_channels: 3 }
    }
}

impl DehazeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| *w == 0 || w % self.heads != 0) {
            return Err(Error::Config(format!(
                "every level width {:?} must be a positive multiple of heads = {}",
                self.widths, self.heads
            )));
        }
        if self.h_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Restoration network. Structure: stem conv, three encoder levels with
/// stride-2 downsampling, a bottom level, then three decoder levels with
/// nearest-upsample + conv and skip concatenation; a zero-initialized tail
/// plus the global residual make the net exactly the identity at init.
#[derive(Debug)]
pub struct DehazeNet {
    cfg: DehazeConfig,
    variant: VariantKind,
    stem: Conv2dLayer,
    enc: Vec<DiffLIDBlock>,
    downs: Vec<Conv2dLayer>,
    mid: DiffLIDBlock,
    ups: Vec<Conv2dLayer>,
    merges: Vec<Conv2dLayer>,
    dec: Vec<DiffLIDBlock>,
    tail: Conv2dLayer,
}

impl DehazeNet {
    pub fn new(cfg: DehazeConfig, variant: VariantKind, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths;
        let stem = Conv2dLayer::new("dehaze.stem", cfg.in_channels, w[0], 3, 1, 1, rng);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for i in 0..3 {
            enc.push(DiffLIDBlock::new(
                &format!("dehaze.enc{i}"),
                w[i],
                cfg.h_channels,
                cfg.heads,
                variant,
                rng,
            )?);
            downs.push(Conv2dLayer::new(&format!("dehaze.down{i}"), w[i], w[i + 1], 3, 2, 1, rng));
        }
        let mid = DiffLIDBlock::new("dehaze.mid", w[3], cfg.h_channels, cfg.heads, variant, rng)?;
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut dec = Vec::new();
        for i in (0..3).rev() {
            ups.push(Conv2dLayer::new(&format!("dehaze.up{i}"), w[i + 1], w[i], 3, 1, 1, rng));
            merges.push(Conv2dLayer::new(&format!("dehaze.merge{i}"), 2 * w[i], w[i], 1, 1, 0, rng));
            dec.push(DiffLIDBlock::new(
                &format!("dehaze.dec{i}"),
                w[i],
                cfg.h_channels,
                cfg.heads,
                variant,
                rng,
            )?);
        }
        let tail = Conv2dLayer::new_zero("dehaze.tail", w[0], cfg.in_channels, 3, 1, 1);
        Ok(DehazeNet { cfg, variant, stem, enc, downs, mid, ups, merges, dec, tail })
    }

    pub fn config(&self) -> &DehazeConfig {
        &self.cfg
    }

    pub fn variant(&self) -> VariantKind {
        self.variant
    }

    fn check_inputs(&self, g: &Graph, x: Var, h1: Var, h2: Var) -> Result<(usize, usize, usize)> {
        let xs = g.value(x)?.shape().to_vec();
        if xs.len() != 4 || xs[1] != self.cfg.in_channels {
            return Err(Error::dimension(
                "dehaze::forward",
                format!("input must be [n,{},h,w], got {:?}", self.cfg.in_channels, xs),
            ));
        }
        if xs[2] % 8 != 0 || xs[3] % 8 != 0 {
            return Err(Error::dimension(
                "dehaze::forward",
                format!("spatial dims must be divisible by 8 for 3 downsamplings, got {}x{}", xs[2], xs[3]),
            ));
        }
        for (label, hv) in [("h_t1", h1), ("h_t2", h2)] {
            let hs = g.value(hv)?.shape().to_vec();
            if hs.len() != 4 || hs[0] != xs[0] || hs[1] != self.cfg.h_channels {
                return Err(Error::dimension(
                    "dehaze::forward",
                    format!(
                        "{label} must be [{},{},h',w'], got {:?}",
                        xs[0], self.cfg.h_channels, hs
                    ),
                ));
            }
        }
        Ok((xs[0], xs[2], xs[3]))
    }

    /// x: [n,c,h,w]; h1, h2: [n, h_channels, h', w'] -> restored [n,c,h,w].
    pub fn forward(&self, g: &mut Graph, x: Var, h1: Var, h2: Var) -> Result<Var> {
        self.check_inputs(g, x, h1, h2)?;
        let mut f = self.stem.forward(g, x)?;
        let mut skips = Vec::new();
        for i in 0..3 {
            f = self.enc[i].forward(g, f, h1, h2)?;
            skips.push(f);
            f = self.downs[i].forward(g, f)?;
        }
        f = self.mid.forward(g, f, h1, h2)?;
        for (j, i) in (0..3).rev().enumerate() {
            f = g.upsample_nearest_2x(f)?;
            f = self.ups[j].forward(g, f)?;
            f = g.concat_channels(f, skips[i])?;
            f = self.merges[j].forward(g, f)?;
            f = self.dec[j].forward(g, f, h1, h2)?;
        }
        let delta = self.tail.forward(g, f)?;
        g.add(x, delta)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.stem.params();
        for b in &self.enc {
            out.extend(b.params());
        }
        for d in &self.downs {
            out.extend(d.params());
        }
        out.extend(self.mid.params());
        for u in &self.ups {
            out.extend(u.params());
        }
        for m in &self.merges {
            out.extend(m.params());
        }
        for b in &self.dec {
            out.extend(b.params());
        }
        out.extend(self.tail.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.stem.params_mut();
        for b in &mut self.enc {
            out.extend(b.params_mut());
        }
        for d in &mut self.downs {
            out.extend(d.params_mut());
        }
        out.extend(self.mid.params_mut());
        for u in &mut self.ups {
            out.extend(u.params_mut());
        }
        for m in &mut self.merges {
            out.extend(m.params_mut());
        }
        for b in &mut self.dec {
            out.extend(b.params_mut());
        }
        out.extend(self.tail.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

/// Build an ablation variant and verify its parameter count stays within
/// ±5% of the full model's. Initialization is seeded per variant so runs
/// are reproducible.
pub fn make_ablation_variant(kind: VariantKind, cfg: &DehazeConfig, seed: u64) -> Result<DehazeNet> {
    let net = DehazeNet::new(
        cfg.clone(),
        kind,
        &mut Rng::new(derive_seed(seed, &format!("dehaze/init/{}", kind.name()))),
    )?;
    if kind != VariantKind::Full {
        let reference = DehazeNet::new(cfg.clone(), VariantKind::Full, &mut Rng::new(0))?;
        let (nv, nf) = (net.param_count(), reference.param_count());
        let rel = (nv as Real - nf as Real).abs() / nf as Real;
        if rel > 0.05 {
            return Err(Error::Config(format!(
                "variant {} has {nv} parameters vs {nf} for the full model ({:.1}% apart, budget 5%)",
                kind.name(),
                100.0 * rel
            )));
        }
    }
    Ok(net)
}
