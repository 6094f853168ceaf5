//! Component ablations at miniature scale: train the full dehazing net and
//! the three reduced variants (cross-attention swapped for self-attention,
//! modulation removed, both removed) from the same data and report test
//! PSNR for each. Run longer for cleaner separations; this is the shape of
//! the experiment, not a benchmark.
//!
//! Run with: cargo run --release --example ablations

use difflid::dehaze::{
    evaluate_model, make_ablation_variant, train_dehaze, DehazeConfig, DehazeTrainConfig,
    FeatureSource, SourceExtractor, VariantKind,
};
use difflid::diffusion::{
    make_schedule, toy_beta_endpoints, train_denoiser, DenoiserConfig, DenoiserUnet,
    DiffusionTrainConfig,
};
use difflid::hazegen::{make_scene_pair, HazeRanges, ScenePair};
use difflid::tensor::{derive_seed, Rng, Tensor};
use difflid::Result;

fn main() -> Result<()> {
    let seed = 7;
    let t_steps = 50;
    let (b0, b1) = toy_beta_endpoints(t_steps);
    let sched = make_schedule(t_steps, b0, b1)?;

    let ranges = HazeRanges::default();
    let train_pairs: Vec<ScenePair> = (0..16)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let test_pairs: Vec<ScenePair> = (16..20)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let clean: Vec<Tensor> = train_pairs.iter().map(|p| p.clean.clone()).collect();

    let dcfg = DenoiserConfig { widths: [8, 12, 16], groups: 4, time_embed_dim: 16, ..Default::default() };
    let mut den = DenoiserUnet::new(dcfg, &mut Rng::new(derive_seed(seed, "diffusion/init")));
    train_denoiser(
        &mut den,
        &sched,
        &clean,
        &DiffusionTrainConfig { steps: 600, batch_size: 2, lr: 2e-3, ..Default::default() },
        seed,
    )?;
    den.freeze();
    let extractor =
        SourceExtractor::new(FeatureSource::Bottleneck, &den, derive_seed(seed, "source-adapter"));

    let dh_cfg = DehazeTrainConfig {
        epochs: 6,
        batch_size: 4,
        lr: 2e-3,
        t1: 0,
        t2: t_steps / 2,
        eval_every: 0,
        eval_eps_seed: derive_seed(seed, "dehaze/eval-eps"),
    };
    let net_cfg = DehazeConfig {
        widths: [8, 8, 16, 16],
        heads: 2,
        h_channels: extractor.channels(),
        in_channels: 3,
    };

    println!("variant ablation (matched parameter budgets, same data and schedule):\n");
    println!("  variant    params   test psnr");
    for kind in
        [VariantKind::Full, VariantKind::NoCim, VariantKind::NoHae, VariantKind::Baseline]
    {
        let run_seed = derive_seed(seed, &format!("ablate/variant/{}/0", kind.name()));
        let mut net = make_ablation_variant(kind, &net_cfg, run_seed)?;
        train_dehaze(&mut net, &den, &sched, &extractor, &train_pairs, &[], &dh_cfg, run_seed)?;
        let report =
            evaluate_model(&net, &den, &sched, &extractor, &test_pairs, &dh_cfg, "example", seed)?;
        println!("  {:<9} {:>7}   {:>6.2} dB", kind.name(), net.param_count(), report.mean_psnr);
    }
    println!("\nfull keeps both feature pathways; no_cim swaps cross-attention for");
    println!("self-attention; no_hae drops the channel modulation; baseline drops both.");
    Ok(())
}
