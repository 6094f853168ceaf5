//! Training loop for the restoration net against a frozen denoiser.
//!
//! Per epoch: content features h_t1 are extracted once (t1 is normally 0, so
//! they are noise-free), haze features h_t2 are re-extracted with a fresh
//! noise realization, and the net minimizes the mean absolute error between
//! its output and the clean image. Evaluation always uses one fixed noise
//! seed so metrics are comparable across epochs and runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dehaze::net::DehazeNet;
use crate::dehaze::source::SourceExtractor;
use crate::diffusion::{stack_images, DenoiserUnet, LossLog, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hazegen::ScenePair;
use crate::hspace::Domain;
use crate::metrics::{evaluate_with, MetricReport};
use crate::tensor::{derive_seed, Adam, Graph, Rng, Tensor};
use crate::Real;

/// How many images go through the frozen denoiser per extraction pass.
const EXTRACT_CHUNK: usize = 16;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DehazeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    /// Timestep of the content features fed to cross-attention.
    pub t1: usize,
    /// Timestep of the haze features fed to the modulation blocks.
    pub t2: usize,
    /// Record train/test metric rows every this many epochs (and always
    /// after the last). 0 = final epoch only.
    pub eval_every: usize,
    /// Noise seed used for every evaluation-time feature extraction.
    pub eval_eps_seed: u64,
}

impl Default for DehazeTrainConfig {
    fn default() -> Self {
        DehazeTrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            t1: 0,
            t2: 50,
            eval_every: 10,
            eval_eps_seed: 0xE7A1,
        }
    }
}

/// One train/test metric measurement during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetricRow {
    pub epoch: usize,
    pub split: String,
    pub psnr: Real,
    pub ssim: Real,
    pub l1: Real,
}

/// CSV with header `epoch,split,psnr,ssim,l1`.
pub fn metric_rows_csv(rows: &[EpochMetricRow]) -> String {
    let mut out = String::from("epoch,split,psnr,ssim,l1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.split, r.psnr, r.ssim, r.l1
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct DehazeRunResult {
    pub loss: LossLog,
    pub metrics: Vec<EpochMetricRow>,
}

/// Extract features for every pair's hazy image at one timestep, in chunks,
/// keyed by image id. Each image gets its own (id, domain)-keyed noise
/// realization, deterministic in `eps_seed`.
fn extract_all(
    extractor: &SourceExtractor,
    denoiser: &DenoiserUnet,
    sched: &NoiseSchedule,
    pairs: &[ScenePair],
    t: usize,
    eps_seed: u64,
) -> Result<BTreeMap<u32, Tensor>> {
    let mut out = BTreeMap::new();
    for chunk in pairs.chunks(EXTRACT_CHUNK) {
        let spec: Vec<(&Tensor, u32, Domain)> =
            chunk.iter().map(|p| (&p.hazy, p.image_id, Domain::Hazy)).collect();
        for f in extractor.extract(denoiser, sched, &spec, t, eps_seed)? {
            out.insert(f.image_id, f.feature);
        }
    }
    Ok(out)
}

fn feature_of<'m>(map: &'m BTreeMap<u32, Tensor>, id: u32, op: &str) -> Result<&'m Tensor> {
    map.get(&id)
        .ok_or_else(|| Error::contract(op, format!("no extracted feature for image {id}")))
}

fn validate(
    net: &DehazeNet,
    extractor: &SourceExtractor,
    sched: &NoiseSchedule,
    cfg: &DehazeTrainConfig,
) -> Result<()> {
    if extractor.channels() != net.config().h_channels {
        return Err(Error::Config(format!(
            "net expects h features with {} channels but the extractor yields {}",
            net.config().h_channels,
            extractor.channels()
        )));
    }
    if cfg.t1 >= cfg.t2 || cfg.t2 > sched.t_steps() {
        return Err(Error::Config(format!(
            "need 0 <= t1 < t2 <= {}, got t1 = {}, t2 = {}",
            sched.t_steps(),
            cfg.t1,
            cfg.t2
        )));
    }
    Ok(())
}

/// Restore every pair with the current net (features at the fixed eval
/// seed) and summarize image quality against the clean targets.
pub fn evaluate_model(
    net: &DehazeNet,
    denoiser: &DenoiserUnet,
    sched: &NoiseSchedule,
    extractor: &SourceExtractor,
    pairs: &[ScenePair],
    cfg: &DehazeTrainConfig,
    config_hash: &str,
    seed: u64,
) -> Result<MetricReport> {
    validate(net, extractor, sched, cfg)?;
    let h1 = extract_all(extractor, denoiser, sched, pairs, cfg.t1, cfg.eval_eps_seed)?;
    let h2 = extract_all(extractor, denoiser, sched, pairs, cfg.t2, cfg.eval_eps_seed)?;
    evaluate_with(
        &mut |p: &ScenePair| {
            let mut g = Graph::new();
            let x = g.constant(stack_images(&[&p.hazy])?);
            let h1v = g.constant(stack_images(&[feature_of(&h1, p.image_id, "evaluate_model")?])?);
            let h2v = g.constant(stack_images(&[feature_of(&h2, p.image_id, "evaluate_model")?])?);
            let y = net.forward(&mut g, x, h1v, h2v)?;
            let v = g.value(y)?;
            Tensor::from_vec(&v.shape()[1..], v.data().to_vec())
        },
        pairs,
        config_hash,
        seed,
    )
}

fn push_metric_rows(
    rows: &mut Vec<EpochMetricRow>,
    epoch: usize,
    net: &DehazeNet,
    denoiser: &DenoiserUnet,
    sched: &NoiseSchedule,
    extractor: &SourceExtractor,
    train_pairs: &[ScenePair],
    test_pairs: &[ScenePair],
    cfg: &DehazeTrainConfig,
    seed: u64,
) -> Result<()> {
    let train_subset = &train_pairs[..train_pairs.len().min(8)];
    for (split, pairs) in [("train", train_subset), ("test", test_pairs)] {
        if pairs.is_empty() {
            continue;
        }
        let report = evaluate_model(net, denoiser, sched, extractor, pairs, cfg, "", seed)?;
        rows.push(EpochMetricRow {
            epoch,
            split: split.to_string(),
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            l1: report.mean_l1,
        });
    }
    Ok(())
}

/// Train the restoration net. The denoiser must be frozen; it is only read.
/// Deterministic in (pairs, config, seed).
pub fn train_dehaze(
    net: &mut DehazeNet,
    denoiser: &DenoiserUnet,
    sched: &NoiseSchedule,
    extractor: &SourceExtractor,
    train_pairs: &[ScenePair],
    test_pairs: &[ScenePair],
    cfg: &DehazeTrainConfig,
    seed: u64,
) -> Result<DehazeRunResult> {
    if train_pairs.is_empty() {
        return Err(Error::contract("train_dehaze", "no training pairs"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::contract("train_dehaze", "epochs and batch_size must be positive"));
    }
    validate(net, extractor, sched, cfg)?;

    // Content features are tied to one fixed realization (with t1 = 0 the
    // noise is irrelevant: the image enters the denoiser unchanged).
    let h1 =
        extract_all(extractor, denoiser, sched, train_pairs, cfg.t1, derive_seed(seed, "dehaze/t1-eps"))?;

    let mut adam = Adam::new(cfg.lr);
    let mut loss_log = LossLog::default();
    let mut rows = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let h2 = extract_all(
            extractor,
            denoiser,
            sched,
            train_pairs,
            cfg.t2,
            derive_seed(seed, &format!("dehaze/t2-eps/{epoch}")),
        )?;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        Rng::new(derive_seed(seed, &format!("dehaze/order/{epoch}"))).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let hazy: Vec<&Tensor> = batch.iter().map(|&i| &train_pairs[i].hazy).collect();
            let clean: Vec<&Tensor> = batch.iter().map(|&i| &train_pairs[i].clean).collect();
            let mut f1 = Vec::with_capacity(batch.len());
            let mut f2 = Vec::with_capacity(batch.len());
            for &i in batch {
                let id = train_pairs[i].image_id;
                f1.push(feature_of(&h1, id, "train_dehaze")?);
                f2.push(feature_of(&h2, id, "train_dehaze")?);
            }
            let mut g = Graph::new();
            let x = g.constant(stack_images(&hazy)?);
            let h1v = g.constant(stack_images(&f1)?);
            let h2v = g.constant(stack_images(&f2)?);
            let y = net.forward(&mut g, x, h1v, h2v)?;
            let target = g.constant(stack_images(&clean)?);
            let diff = g.sub(y, target)?;
            let loss = g.mean_abs(diff)?;
            let loss_val = g.value(loss)?.item()?;
            if !loss_val.is_finite() {
                return Err(Error::non_finite(
                    "train_dehaze",
                    format!("loss diverged at epoch {epoch}, step {step}"),
                ));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut net.params_mut(), &g, &grads)?;
            loss_log.push(step, loss_val);
        }
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        if due || epoch == cfg.epochs {
            push_metric_rows(
                &mut rows, epoch, net, denoiser, sched, extractor, train_pairs, test_pairs, cfg,
                seed,
            )?;
        }
    }
    Ok(DehazeRunResult { loss: loss_log, metrics: rows })
}
