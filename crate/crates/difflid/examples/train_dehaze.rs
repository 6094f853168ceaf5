//! Train the dehazing network end to end at miniature scale: freeze a
//! briefly-trained denoiser, feed its bottleneck features from two
//! timesteps into the restoration net, and compare the result against the
//! do-nothing baseline.
//!
//! Run with: cargo run --release --example train_dehaze

use difflid::dehaze::{
    evaluate_model, make_ablation_variant, train_dehaze, DehazeTrainConfig, FeatureSource,
    SourceExtractor, VariantKind,
};
use difflid::diffusion::{
    make_schedule, toy_beta_endpoints, train_denoiser, DenoiserConfig, DenoiserUnet,
    DiffusionTrainConfig,
};
use difflid::hazegen::{make_scene_pair, HazeRanges, ScenePair};
use difflid::metrics::identity_baseline;
use difflid::tensor::{derive_seed, Rng, Tensor};
use difflid::Result;

fn main() -> Result<()> {
    let seed = 7;
    let t_steps = 50;
    let (b0, b1) = toy_beta_endpoints(t_steps);
    let sched = make_schedule(t_steps, b0, b1)?;

    let ranges = HazeRanges::default();
    let train_pairs: Vec<ScenePair> = (0..24)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let test_pairs: Vec<ScenePair> = (24..30)
        .map(|i| make_scene_pair(i, 32, &ranges, derive_seed(seed, "data")))
        .collect::<Result<_>>()?;
    let clean: Vec<Tensor> = train_pairs.iter().map(|p| p.clean.clone()).collect();

    let dcfg = DenoiserConfig { widths: [8, 12, 16], groups: 4, time_embed_dim: 16, ..Default::default() };
    let mut den = DenoiserUnet::new(dcfg, &mut Rng::new(derive_seed(seed, "diffusion/init")));
    let tcfg = DiffusionTrainConfig { steps: 600, batch_size: 2, lr: 2e-3, ..Default::default() };
    train_denoiser(&mut den, &sched, &clean, &tcfg, seed)?;
    den.freeze();

    let extractor = SourceExtractor::new(FeatureSource::Bottleneck, &den, derive_seed(seed, "source-adapter"));
    let mut net = make_ablation_variant(
        VariantKind::Full,
        &difflid::dehaze::DehazeConfig {
            widths: [8, 8, 16, 16],
            heads: 2,
            h_channels: extractor.channels(),
            in_channels: 3,
        },
        seed,
    )?;
    println!("dehaze net parameters: {}", net.param_count());

    let dh_cfg = DehazeTrainConfig {
        epochs: 8,
        batch_size: 4,
        lr: 2e-3,
        t1: 0,
        t2: t_steps / 2,
        eval_every: 4,
        eval_eps_seed: derive_seed(seed, "dehaze/eval-eps"),
    };
    let result = train_dehaze(&mut net, &den, &sched, &extractor, &train_pairs, &test_pairs, &dh_cfg, seed)?;
    println!(
        "restoration L1 loss: {:.4} -> {:.4}",
        result.loss.initial_smoothed(25),
        result.loss.final_smoothed(25)
    );
    for row in &result.metrics {
        println!(
            "  epoch {:>2} [{:>5}]  psnr {:>6.2} dB  ssim {:.4}  l1 {:.4}",
            row.epoch, row.split, row.psnr, row.ssim, row.l1
        );
    }

    let report = evaluate_model(&net, &den, &sched, &extractor, &test_pairs, &dh_cfg, "example", seed)?;
    let baseline = identity_baseline(&test_pairs, "example", seed)?;
    println!(
        "\ntest PSNR: {:.2} dB vs identity baseline {:.2} dB ({:+.2} dB)",
        report.mean_psnr,
        baseline.mean_psnr,
        report.mean_psnr - baseline.mean_psnr
    );
    Ok(())
}
