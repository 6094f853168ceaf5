//! The bottleneck-replacement experiment: push a noisy clean image through
//! the frozen denoiser, but splice in the bottleneck computed from the hazy
//! version of the same scene (and vice versa). If the bottleneck carried the
//! haze, the output would change a lot; instead it barely moves compared to
//! swapping the input image itself — the haze lives in the skip connections.
//!
//! Run with: cargo run --release --example replacement

use difflid::diffusion::{
    make_schedule, toy_beta_endpoints, train_denoiser, DenoiserConfig, DenoiserUnet,
    DiffusionTrainConfig,
};
use difflid::hazegen::{make_scene_pair, HazeRanges, ScenePair};
use difflid::hspace::replacement_probe;
use difflid::metrics::median;
use difflid::tensor::{derive_seed, Rng, Tensor};
use difflid::Result;

fn main() -> Result<()> {
    let seed = 7;
    let t_steps = 50;
    let (b0, b1) = toy_beta_endpoints(t_steps);
    let sched = make_schedule(t_steps, b0, b1)?;

    let ranges = HazeRanges::default();
    let pairs: Vec<ScenePair> = (0..8)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let clean: Vec<Tensor> = pairs.iter().map(|p| p.clean.clone()).collect();

    let dcfg = DenoiserConfig { widths: [8, 12, 16], groups: 4, time_embed_dim: 16, ..Default::default() };
    let mut net = DenoiserUnet::new(dcfg, &mut Rng::new(derive_seed(seed, "diffusion/init")));
    let tcfg = DiffusionTrainConfig { steps: 600, batch_size: 2, lr: 2e-3, ..Default::default() };
    train_denoiser(&mut net, &sched, &clean, &tcfg, seed)?;
    net.freeze();

    let t = t_steps / 2;
    let eps_seed = derive_seed(seed, "hspace/replace-eps");
    println!("bottleneck replacement at t = {t} (relative change in denoiser output):\n");
    println!("  scene   swap bottleneck   swap input");
    let mut hs = Vec::new();
    let mut is = Vec::new();
    for p in &pairs {
        let (h_ratio, input_ratio) = replacement_probe(&net, &sched, &p.clean, &p.hazy, t, eps_seed)?;
        println!("  {:>5}   {:>15.5}   {:>10.5}", p.image_id, h_ratio, input_ratio);
        hs.push(h_ratio);
        is.push(input_ratio);
    }
    println!("  median  {:>15.5}   {:>10.5}", median(hs), median(is));

    let first = &pairs[0];
    let (self_h, self_in) = replacement_probe(&net, &sched, &first.clean, &first.clean, t, eps_seed)?;
    println!("\nself-swap control (image swapped with itself): ({self_h}, {self_in}) — exactly zero.");
    Ok(())
}
