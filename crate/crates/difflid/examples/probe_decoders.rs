//! Train small decoder probes that reconstruct images from the denoiser's
//! bottleneck features at different timesteps, then use them to ask what
//! the features still remember: at t = 0 a hazy image's reconstruction
//! tracks its own scene (content survives), while at intermediate t the
//! reconstructions drift toward the haze domain.
//!
//! Run with: cargo run --release --example probe_decoders

use difflid::diffusion::{
    make_schedule, toy_beta_endpoints, train_denoiser, DenoiserConfig, DenoiserUnet,
    DiffusionTrainConfig,
};
use difflid::hazegen::{make_scene_pair, HazeRanges, ScenePair};
use difflid::hspace::{evaluate_probe, extract_batch, train_probe, Domain, ProbeTrainConfig};
use difflid::tensor::{derive_seed, Rng, Tensor};
use difflid::Result;

fn main() -> Result<()> {
    let seed = 7;
    let t_steps = 50;
    let (b0, b1) = toy_beta_endpoints(t_steps);
    let sched = make_schedule(t_steps, b0, b1)?;

    let ranges = HazeRanges::default();
    let train_pairs: Vec<ScenePair> = (0..12)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let test_pairs: Vec<ScenePair> = (12..16)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let clean: Vec<Tensor> = train_pairs.iter().map(|p| p.clean.clone()).collect();

    let dcfg = DenoiserConfig { widths: [8, 12, 16], groups: 4, time_embed_dim: 16, ..Default::default() };
    let mut net = DenoiserUnet::new(dcfg, &mut Rng::new(derive_seed(seed, "diffusion/init")));
    let tcfg = DiffusionTrainConfig { steps: 600, batch_size: 2, lr: 2e-3, ..Default::default() };
    train_denoiser(&mut net, &sched, &clean, &tcfg, seed)?;
    net.freeze();

    let eps_seed = derive_seed(seed, "hspace/eps");
    let pcfg = ProbeTrainConfig { width: 24, steps: 400, batch_size: 4, lr: 1e-3 };

    println!("decoder probes trained on clean-image bottleneck features:\n");
    println!("    t   train L1  heldout L1   same-scene L1  cross-scene L1");
    for t in [0, t_steps / 2] {
        let spec: Vec<(&Tensor, u32, Domain)> =
            train_pairs.iter().map(|p| (&p.clean, p.image_id, Domain::Clean)).collect();
        let feats = extract_batch(&net, &sched, &spec, t, eps_seed)?;
        let (probe, log) = train_probe(t, &feats, &clean, &pcfg, seed)?;
        let eval = evaluate_probe(&probe, &net, &sched, &test_pairs, eps_seed)?;
        println!(
            "  {:>3}   {:>8.4}  {:>10.4}   {:>13.4}  {:>14.4}",
            t,
            log.final_smoothed(25),
            eval.heldout_clean_l1,
            eval.median_same_scene_l1,
            eval.median_cross_scene_l1,
        );
    }
    println!("\nsame-scene: L1 between a hazy image's probe reconstruction and its own clean");
    println!("scene's reconstruction; cross-scene compares against a different scene. The");
    println!("gap between them is the content the features retain about hazy inputs.");
    Ok(())
}
