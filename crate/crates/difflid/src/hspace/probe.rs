//! Per-timestep decoder probes: small convolutional decoders trained to
//! reconstruct the clean image from bottleneck features taken at one t.

use std::path::Path;

use crate::diffusion::{stack_images, LossLog};
use crate::error::{Error, Result};
use crate::hspace::{Domain, HFeature};
use crate::tensor::io::{load_checkpoint, save_checkpoint_tagged, CheckpointMeta};
use crate::tensor::{derive_seed, Adam, Conv2dLayer, Graph, Linear, Parameter, Rng, Tensor, Var};
use crate::Real;

/// Residual block with channel attention: two 3x3 convolutions whose output
/// is rescaled per channel by a squeeze-and-excite gate, then added back.
#[derive(Debug)]
struct Rcab {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    gate_down: Linear,
    gate_up: Linear,
}

impl Rcab {
    fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / 4).max(1);
        Rcab {
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            conv2: Conv2dLayer::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            gate_down: Linear::new(&format!("{name}.gate_down"), channels, hidden, rng),
            gate_up: Linear::new(&format!("{name}.gate_up"), hidden, channels, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let u = self.conv1.forward(g, x)?;
        let u = g.silu(u)?;
        let u = self.conv2.forward(g, u)?;
        let s = g.global_avg_pool(u)?;
        let s = self.gate_down.forward(g, s)?;
        let s = g.silu(s)?;
        let s = self.gate_up.forward(g, s)?;
        let s = g.sigmoid(s)?;
        let gated = g.mul_channel_map(u, s)?;
        g.add(x, gated)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        out.extend(self.gate_down.params());
        out.extend(self.gate_up.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out.extend(self.gate_down.params_mut());
        out.extend(self.gate_up.params_mut());
        out
    }
}

/// Decoder probe for one timestep: conv stem, two residual channel-attention
/// blocks, then nearest-upsample+conv stages until the image resolution is
/// reached. Probes at different t never share parameters.
#[derive(Debug)]
pub struct DecoderProbe {
    pub t: usize,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    stem1: Conv2dLayer,
    stem2: Conv2dLayer,
    rcabs: Vec<Rcab>,
    ups: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

impl DecoderProbe {
    pub fn new(
        t: usize,
        in_shape: &[usize],
        out_shape: &[usize],
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_shape.len() != 3 || out_shape.len() != 3 {
            return Err(Error::dimension(
                "probe::new",
                format!("feature and image shapes must be rank 3, got {in_shape:?} and {out_shape:?}"),
            ));
        }
        let (ih, iw) = (in_shape[1], in_shape[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        if ih == 0 || oh % ih != 0 || ow % iw != 0 || oh / ih != ow / iw {
            return Err(Error::dimension(
                "probe::new",
                format!("image {oh}x{ow} must be an equal integer multiple of feature {ih}x{iw}"),
            ));
        }
        let ratio = oh / ih;
        if !ratio.is_power_of_two() {
            return Err(Error::dimension(
                "probe::new",
                format!("upsampling ratio {ratio} must be a power of two"),
            ));
        }
        let n_up = ratio.trailing_zeros() as usize;
        let p = format!("probe{t}");
        let stem1 = Conv2dLayer::new(&format!("{p}.stem1"), in_shape[0], width, 3, 1, 1, rng);
        let stem2 = Conv2dLayer::new(&format!("{p}.stem2"), width, width, 3, 1, 1, rng);
        let rcabs = (0..2).map(|i| Rcab::new(&format!("{p}.rcab{i}"), width, rng)).collect();
        let ups = (0..n_up)
            .map(|i| Conv2dLayer::new(&format!("{p}.up{i}"), width, width, 3, 1, 1, rng))
            .collect();
        let head = Conv2dLayer::new(&format!("{p}.head"), width, out_shape[0], 3, 1, 1, rng);
        Ok(DecoderProbe {
            t,
            in_shape: [in_shape[0], ih, iw],
            out_shape: [out_shape[0], oh, ow],
            stem1,
            stem2,
            rcabs,
            ups,
            head,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Batched forward: [n, c_feat, h', w'] -> [n, c_img, h, w].
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let got = g.value(h)?.shape().to_vec();
        if got.len() != 4 || got[1..] != self.in_shape {
            return Err(Error::dimension(
                "probe::forward",
                format!("expected [n,{:?}], got {:?}", self.in_shape, got),
            ));
        }
        let mut v = self.stem1.forward(g, h)?;
        v = g.silu(v)?;
        v = self.stem2.forward(g, v)?;
        v = g.silu(v)?;
        for rcab in &self.rcabs {
            v = rcab.forward(g, v)?;
        }
        for up in &self.ups {
            v = g.upsample_nearest_2x(v)?;
            v = up.forward(g, v)?;
            v = g.silu(v)?;
        }
        self.head.forward(g, v)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.stem1.params();
        out.extend(self.stem2.params());
        for r in &self.rcabs {
            out.extend(r.params());
        }
        for u in &self.ups {
            out.extend(u.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.stem1.params_mut();
        out.extend(self.stem2.params_mut());
        for r in &mut self.rcabs {
            out.extend(r.params_mut());
        }
        for u in &mut self.ups {
            out.extend(u.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct ProbeTrainConfig {
    pub width: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: Real,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { width: 64, steps: 1200, batch_size: 8, lr: 1e-3 }
    }
}

/// Train a fresh probe for timestep `t` on clean-domain features only,
/// minimizing mean absolute error to the noise-free targets.
pub fn train_probe(
    t: usize,
    features: &[HFeature],
    targets: &[Tensor],
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<(DecoderProbe, LossLog)> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::contract(
            "train_probe",
            format!("{} features but {} targets", features.len(), targets.len()),
        ));
    }
    for (i, f) in features.iter().enumerate() {
        if f.domain != Domain::Clean {
            return Err(Error::contract(
                "train_probe",
                format!("feature {i} (image {}) is hazy; probes train on clean features only", f.image_id),
            ));
        }
        if f.t != t {
            return Err(Error::contract(
                "train_probe",
                format!("feature {i} was extracted at t={}, probe serves t={t}", f.t),
            ));
        }
        if f.feature.shape() != features[0].feature.shape() {
            return Err(Error::dimension("train_probe", "features disagree on shape"));
        }
        if targets[i].shape() != targets[0].shape() {
            return Err(Error::dimension("train_probe", "targets disagree on shape"));
        }
    }

    let mut probe = DecoderProbe::new(
        t,
        features[0].feature.shape(),
        targets[0].shape(),
        cfg.width,
        &mut Rng::new(derive_seed(seed, &format!("probe/init/{t}"))),
    )?;
    let mut opt = Adam::new(cfg.lr);
    let mut batch_rng = Rng::new(derive_seed(seed, &format!("probe/batch/{t}")));
    let mut log = LossLog::default();
    let n = features.len();
    let batch = cfg.batch_size.min(n);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| batch_rng.below(n)).collect();
        let feats: Vec<&Tensor> = idx.iter().map(|&i| &features[i].feature).collect();
        let tgts: Vec<&Tensor> = idx.iter().map(|&i| &targets[i]).collect();
        let mut g = Graph::new();
        let hv = g.constant(stack_images(&feats)?);
        let yv = g.constant(stack_images(&tgts)?);
        let pred = probe.forward(&mut g, hv)?;
        let diff = g.sub(pred, yv)?;
        let loss = g.mean_abs(diff)?;
        let loss_val = g.value(loss)?.item()?;
        if !loss_val.is_finite() {
            return Err(Error::non_finite("train_probe", format!("loss at step {step}")));
        }
        log.push(step, loss_val);
        let grads = g.backward(loss)?;
        let mut params = probe.params_mut();
        opt.step(&mut params, &g, &grads)?;
    }
    Ok((probe, log))
}

/// Decode one feature back to image space. Raw output; clamping to [0,1] is
/// the exporter's job.
pub fn probe_reconstruct(probe: &DecoderProbe, h: &HFeature) -> Result<Tensor> {
    if h.t != probe.t {
        return Err(Error::contract(
            "probe_reconstruct",
            format!("feature extracted at t={}, probe serves t={}", h.t, probe.t),
        ));
    }
    let mut g = Graph::new();
    let hv = g.constant(stack_images(&[&h.feature])?);
    let out = probe.forward(&mut g, hv)?;
    let value = g.value(out)?;
    let shape = value.shape()[1..].to_vec();
    Tensor::from_vec(&shape, value.data().to_vec())
}

/// Reconstruction-similarity summary of one probe over held-out scene
/// pairs. All distances are mean absolute differences between raw (un-
/// clamped) reconstructions, or between a reconstruction and its clean
/// target.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProbeEvaluation {
    pub t: usize,
    /// Mean L1 between reconstructions of clean features and the clean
    /// images themselves (generalization to held-out scenes).
    pub heldout_clean_l1: Real,
    /// Median over scenes of L1(reconstruction-from-hazy,
    /// reconstruction-from-clean) for the SAME scene.
    pub median_same_scene_l1: Real,
    /// Median of the same distance across DIFFERENT scenes (each scene's
    /// hazy reconstruction against the next scene's clean reconstruction).
    pub median_cross_scene_l1: Real,
}

/// Reconstruct every pair's clean and hazy features with the probe and
/// summarize how similar the two reconstructions are, per scene and across
/// scenes. Needs at least two pairs so a cross-scene distance exists.
pub fn evaluate_probe(
    probe: &DecoderProbe,
    net: &crate::diffusion::DenoiserUnet,
    sched: &crate::diffusion::NoiseSchedule,
    pairs: &[crate::hazegen::ScenePair],
    eps_seed: u64,
) -> Result<ProbeEvaluation> {
    if pairs.len() < 2 {
        return Err(Error::contract("evaluate_probe", "need at least two scene pairs"));
    }
    let mut clean_recs = Vec::with_capacity(pairs.len());
    let mut hazy_recs = Vec::with_capacity(pairs.len());
    let mut clean_l1 = Vec::with_capacity(pairs.len());
    for p in pairs {
        let spec: Vec<(&Tensor, u32, Domain)> = vec![
            (&p.clean, p.image_id, Domain::Clean),
            (&p.hazy, p.image_id, Domain::Hazy),
        ];
        let feats = crate::hspace::extract_batch(net, sched, &spec, probe.t, eps_seed)?;
        let rc = probe_reconstruct(probe, &feats[0])?;
        let rh = probe_reconstruct(probe, &feats[1])?;
        clean_l1.push(crate::metrics::l1(&rc, &p.clean)?);
        clean_recs.push(rc);
        hazy_recs.push(rh);
    }
    let same: Vec<Real> = (0..pairs.len())
        .map(|i| crate::metrics::l1(&hazy_recs[i], &clean_recs[i]))
        .collect::<Result<_>>()?;
    let cross: Vec<Real> = (0..pairs.len())
        .map(|i| crate::metrics::l1(&hazy_recs[i], &clean_recs[(i + 1) % pairs.len()]))
        .collect::<Result<_>>()?;
    let n = clean_l1.len() as Real;
    Ok(ProbeEvaluation {
        t: probe.t,
        heldout_clean_l1: clean_l1.iter().sum::<Real>() / n,
        median_same_scene_l1: crate::metrics::median(same),
        median_cross_scene_l1: crate::metrics::median(cross),
    })
}

/// Checkpoint a probe; the manifest records which timestep it serves.
pub fn save_probe(dir: &Path, probe: &DecoderProbe, step: u64, config_hash: &str) -> Result<()> {
    save_checkpoint_tagged(dir, &probe.params(), step, config_hash, Some(probe.t))
}

/// Restore a probe checkpoint into a structurally matching probe. The
/// checkpoint's recorded timestep must agree with the probe's.
pub fn load_probe(dir: &Path, probe: &mut DecoderProbe) -> Result<CheckpointMeta> {
    let mut params = probe.params_mut();
    let meta = load_checkpoint(dir, &mut params)?;
    if meta.probe_t != Some(probe.t) {
        return Err(Error::contract(
            "load_probe",
            format!("checkpoint serves t={:?}, probe expects t={}", meta.probe_t, probe.t),
        ));
    }
    Ok(meta)
}
