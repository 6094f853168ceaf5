//! The nine pipeline stages behind the command-line interface. Each stage
//! reads earlier stages' outputs from the run directory, writes its own
//! artifacts under its stage subdirectory, and returns the relative paths
//! of everything it produced.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dehaze::{
    evaluate_model, make_ablation_variant, metric_rows_csv, train_dehaze, DehazeTrainConfig,
    FeatureSource, SourceExtractor, VariantKind,
};
use crate::diffusion::{
    make_schedule, toy_beta_endpoints, train_denoiser, DenoiserUnet, LossLog, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::harness::parallel::parallel_map;
use crate::hazegen::{build_dataset, load_dataset, Dataset, ScenePair};
use crate::hspace::{
    evaluate_probe, extract_batch, project_features, projection_csv, replacement_probe,
    save_probe, sweep_timesteps, train_probe, Domain, HFeature, Projection, SeparationReport,
};
use crate::metrics::{identity_baseline, median, MetricReport};
use crate::tensor::io::{load_checkpoint, save_checkpoint};
use crate::tensor::{derive_seed, Rng, Tensor};
use crate::Real;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Write bytes at `rel` under the run directory, creating parents, and
/// record the artifact.
fn write_file(out: &Path, rel: &str, bytes: &[u8], artifacts: &mut Vec<String>) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    artifacts.push(rel.to_string());
    Ok(())
}

fn write_json<T: Serialize>(
    out: &Path,
    rel: &str,
    value: &T,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(out, rel, text.as_bytes(), artifacts)
}

fn loss_csv(log: &LossLog) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in &log.entries {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

fn schedule_for(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    let (b0, b1) = toy_beta_endpoints(cfg.diffusion.t_steps);
    make_schedule(cfg.diffusion.t_steps, b0, b1)
}

fn load_data(out: &Path) -> Result<Dataset> {
    load_dataset(&out.join("dataset"))
}

/// Rebuild the denoiser from config, load its trained weights, freeze it.
fn load_trained_denoiser(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<(DenoiserUnet, NoiseSchedule)> {
    let mut net = DenoiserUnet::new(cfg.denoiser_config(), &mut Rng::new(0));
    load_checkpoint(&out.join("diffusion/denoiser"), &mut net.params_mut())?;
    net.freeze();
    Ok((net, schedule_for(cfg)?))
}

/// The feature extractor every dehaze-side stage shares. Its adapter (for
/// non-bottleneck taps) is a fixed seeded projection, identical across
/// training, evaluation, and ablation runs of one experiment.
fn source_extractor(
    cfg: &ExperimentConfig,
    source: FeatureSource,
    denoiser: &DenoiserUnet,
) -> SourceExtractor {
    SourceExtractor::new(source, denoiser, derive_seed(cfg.seed, "source-adapter"))
}

/// Batched feature extraction in input order, chunked to bound memory.
fn extract_ordered(
    net: &DenoiserUnet,
    sched: &NoiseSchedule,
    images: &[(&Tensor, u32, Domain)],
    t: usize,
    eps_seed: u64,
) -> Result<Vec<HFeature>> {
    let mut feats = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        feats.extend(extract_batch(net, sched, chunk, t, eps_seed)?);
    }
    Ok(feats)
}

// ---------------------------------------------------------------- gen-data

pub(crate) fn stage_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let manifest =
        build_dataset(&cfg.dataset_config(), derive_seed(cfg.seed, "data"), &out.join("dataset"))?;
    let mut artifacts = vec!["dataset/manifest.json".to_string()];
    for rec in manifest.train.iter().chain(manifest.test.iter()) {
        for rel in rec.files.values() {
            artifacts.push(format!("dataset/{rel}"));
            if cfg.data.export_png {
                artifacts.push(format!("dataset/{}", rel.replace(".dltf", ".png")));
            }
        }
    }
    Ok(artifacts)
}

// --------------------------------------------------------- train-diffusion

pub(crate) fn stage_train_diffusion(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let sched = schedule_for(cfg)?;
    let mut net = DenoiserUnet::new(
        cfg.denoiser_config(),
        &mut Rng::new(derive_seed(cfg.seed, "diffusion/init")),
    );
    let clean: Vec<Tensor> = data.train.iter().map(|p| p.clean.clone()).collect();
    let log = train_denoiser(&mut net, &sched, &clean, &cfg.diffusion_train_config(), cfg.seed)?;
    let ckpt = out.join("diffusion/denoiser");
    save_checkpoint(&ckpt, &net.params(), cfg.diffusion.steps, &cfg.config_hash())?;
    let mut artifacts = vec![
        "diffusion/denoiser/manifest.json".to_string(),
        "diffusion/denoiser/weights.dltf".to_string(),
    ];
    write_file(out, "diffusion/loss.csv", loss_csv(&log).as_bytes(), &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------ probe-hspace

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReportEntry {
    pub t: usize,
    pub final_train_loss: Real,
    pub heldout_clean_l1: Real,
    pub median_same_scene_l1: Real,
    pub median_cross_scene_l1: Real,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeStageReport {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<ProbeReportEntry>,
}

pub(crate) fn stage_probe_hspace(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    let eps_seed = derive_seed(cfg.seed, "hspace/eps");
    let n = cfg.hspace.n_pairs.min(data.train.len());
    let subset = &data.train[..n];
    let targets: Vec<Tensor> = subset.iter().map(|p| p.clean.clone()).collect();
    let mut artifacts = Vec::new();
    let mut entries = Vec::new();
    for t in cfg.probe_ts() {
        let spec: Vec<(&Tensor, u32, Domain)> =
            subset.iter().map(|p| (&p.clean, p.image_id, Domain::Clean)).collect();
        let feats = extract_ordered(&den, &sched, &spec, t, eps_seed)?;
        let (probe, log) =
            train_probe(t, &feats, &targets, &cfg.probe_train_config(), cfg.seed)?;
        let rel = format!("hspace/probes/t{t}");
        save_probe(&out.join(&rel), &probe, cfg.hspace.probe_steps, &cfg.config_hash())?;
        artifacts.push(format!("{rel}/manifest.json"));
        artifacts.push(format!("{rel}/weights.dltf"));
        write_file(out, &format!("{rel}/loss.csv"), loss_csv(&log).as_bytes(), &mut artifacts)?;
        let eval = evaluate_probe(&probe, &den, &sched, &data.test, eps_seed)?;
        entries.push(ProbeReportEntry {
            t,
            final_train_loss: log.final_smoothed(25),
            heldout_clean_l1: eval.heldout_clean_l1,
            median_same_scene_l1: eval.median_same_scene_l1,
            median_cross_scene_l1: eval.median_cross_scene_l1,
        });
    }
    let report =
        ProbeStageReport { config_hash: cfg.config_hash(), seed: cfg.seed, entries };
    write_json(out, "hspace/probes/report.json", &report, &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------ sweep-hspace

pub(crate) fn stage_sweep_hspace(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    let n = cfg.hspace.n_pairs.min(data.train.len());
    let subset = &data.train[..n];
    let t_list = cfg.t_list();
    let seeds: Vec<u64> = (0..cfg.hspace.n_seeds)
        .map(|i| derive_seed(cfg.seed, &format!("hspace/sweep-eps/{i}")))
        .collect();
    let sweeps: Vec<Vec<SeparationReport>> =
        parallel_map(&seeds, |_, s| sweep_timesteps(&den, &sched, subset, &t_list, *s))?;

    let mut per_seed = String::from("seed,t,content_score,domain_score\n");
    for (i, reports) in sweeps.iter().enumerate() {
        for r in reports {
            per_seed.push_str(&format!("{i},{},{},{}\n", r.t, r.content_score, r.domain_score));
        }
    }
    let mut med = String::from("t,content_score,domain_score\n");
    for (ti, t) in t_list.iter().enumerate() {
        let c = median(sweeps.iter().map(|s| s[ti].content_score).collect());
        let d = median(sweeps.iter().map(|s| s[ti].domain_score).collect());
        med.push_str(&format!("{t},{c},{d}\n"));
    }

    // 2-D projection of the features at every swept t (first noise seed),
    // the quantitative stand-in for the usual scatter visualizations.
    let mut proj = Projection { rows: Vec::new(), degenerate: false };
    for &t in &t_list {
        let spec: Vec<(&Tensor, u32, Domain)> = subset
            .iter()
            .flat_map(|p| {
                [(&p.clean, p.image_id, Domain::Clean), (&p.hazy, p.image_id, Domain::Hazy)]
            })
            .collect();
        let feats = extract_ordered(&den, &sched, &spec, t, seeds[0])?;
        let part = project_features(&feats)?;
        proj.degenerate |= part.degenerate;
        proj.rows.extend(part.rows);
    }

    let mut artifacts = Vec::new();
    write_file(out, "hspace/sweep/sweep.csv", per_seed.as_bytes(), &mut artifacts)?;
    write_file(out, "hspace/sweep/median.csv", med.as_bytes(), &mut artifacts)?;
    write_file(out, "hspace/sweep/projection.csv", projection_csv(&proj).as_bytes(), &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------ replace-probe

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub config_hash: String,
    pub seed: u64,
    pub t: usize,
    pub median_h_swap_ratio: Real,
    pub median_input_swap_ratio: Real,
    /// Ratios when "swapping" an image with itself; must be exactly zero.
    pub self_swap: (Real, Real),
}

pub(crate) fn stage_replace_probe(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    if data.test.is_empty() {
        return Err(Error::contract("replace_probe", "empty test split"));
    }
    let t = cfg.t2();
    let eps_seed = derive_seed(cfg.seed, "hspace/replace-eps");
    let mut csv = String::from("image_id,h_swap_ratio,input_swap_ratio\n");
    let mut hs = Vec::new();
    let mut is = Vec::new();
    for p in &data.test {
        let (h, i) = replacement_probe(&den, &sched, &p.clean, &p.hazy, t, eps_seed)?;
        csv.push_str(&format!("{},{h},{i}\n", p.image_id));
        hs.push(h);
        is.push(i);
    }
    let first = &data.test[0];
    let self_swap = replacement_probe(&den, &sched, &first.clean, &first.clean, t, eps_seed)?;
    let report = ReplacementReport {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        t,
        median_h_swap_ratio: median(hs),
        median_input_swap_ratio: median(is),
        self_swap,
    };
    let mut artifacts = Vec::new();
    write_file(out, "hspace/replace/replace.csv", csv.as_bytes(), &mut artifacts)?;
    write_json(out, "hspace/replace/replace.json", &report, &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------ train-dehaze

pub(crate) fn stage_train_dehaze(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    let extractor = source_extractor(cfg, cfg.dehaze.source, &den);
    let mut net = make_ablation_variant(
        VariantKind::Full,
        &cfg.dehaze_config(extractor.channels()),
        cfg.seed,
    )?;
    let result = train_dehaze(
        &mut net,
        &den,
        &sched,
        &extractor,
        &data.train,
        &data.test,
        &cfg.dehaze_train_config(),
        cfg.seed,
    )?;
    save_checkpoint(
        &out.join("dehaze/net"),
        &net.params(),
        cfg.dehaze.epochs as u64,
        &cfg.config_hash(),
    )?;
    let mut artifacts =
        vec!["dehaze/net/manifest.json".to_string(), "dehaze/net/weights.dltf".to_string()];
    write_file(out, "dehaze/loss.csv", loss_csv(&result.loss).as_bytes(), &mut artifacts)?;
    write_file(out, "dehaze/metrics.csv", metric_rows_csv(&result.metrics).as_bytes(), &mut artifacts)?;
    Ok(artifacts)
}

// -------------------------------------------------------------------- eval

fn per_image_csv(report: &MetricReport) -> String {
    let mut out = String::from("image_id,psnr,ssim,l1\n");
    for r in &report.per_image {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.image_id, r.psnr, r.ssim, r.l1));
    }
    out
}

pub(crate) fn stage_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    let extractor = source_extractor(cfg, cfg.dehaze.source, &den);
    let mut net = make_ablation_variant(
        VariantKind::Full,
        &cfg.dehaze_config(extractor.channels()),
        cfg.seed,
    )?;
    load_checkpoint(&out.join("dehaze/net"), &mut net.params_mut())?;
    let report = evaluate_model(
        &net,
        &den,
        &sched,
        &extractor,
        &data.test,
        &cfg.dehaze_train_config(),
        &cfg.config_hash(),
        cfg.seed,
    )?;
    let baseline = identity_baseline(&data.test, &cfg.config_hash(), cfg.seed)?;
    let mut artifacts = Vec::new();
    write_json(out, "eval/report.json", &report, &mut artifacts)?;
    write_file(out, "eval/report.csv", per_image_csv(&report).as_bytes(), &mut artifacts)?;
    write_json(out, "eval/baseline.json", &baseline, &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------------ ablate

#[derive(Clone, Debug)]
struct AblationRun {
    /// Grouping key within its table ("full", "decoder", "30", ...).
    name: String,
    /// Which table the run belongs to: "variant", "source", or "t2".
    table: &'static str,
    kind: VariantKind,
    source: FeatureSource,
    t2: usize,
    seed_idx: usize,
}

fn ablate_one(
    cfg: &ExperimentConfig,
    config_hash: &str,
    den: &DenoiserUnet,
    sched: &NoiseSchedule,
    train: &[ScenePair],
    test: &[ScenePair],
    epochs: usize,
    run: &AblationRun,
) -> Result<(Real, Real)> {
    let extractor = source_extractor(cfg, run.source, den);
    let run_seed =
        derive_seed(cfg.seed, &format!("ablate/{}/{}/{}", run.table, run.name, run.seed_idx));
    let mut net =
        make_ablation_variant(run.kind, &cfg.dehaze_config(extractor.channels()), run_seed)?;
    let tcfg = DehazeTrainConfig {
        epochs,
        batch_size: cfg.dehaze.batch_size,
        lr: cfg.dehaze.lr,
        t1: cfg.dehaze.t1,
        t2: run.t2,
        eval_every: 0,
        eval_eps_seed: derive_seed(cfg.seed, "dehaze/eval-eps"),
    };
    train_dehaze(&mut net, den, sched, &extractor, train, &[], &tcfg, run_seed)?;
    let report =
        evaluate_model(&net, den, sched, &extractor, test, &tcfg, config_hash, run_seed)?;
    Ok((report.mean_psnr, report.mean_ssim))
}

pub(crate) fn stage_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let data = load_data(out)?;
    let (den, sched) = load_trained_denoiser(cfg, out)?;
    let n_train = cfg.ablate.n_train.unwrap_or(data.train.len()).min(data.train.len());
    let train = &data.train[..n_train];
    let epochs = cfg.ablate.epochs.unwrap_or(cfg.dehaze.epochs);
    let n_seeds = cfg.ablate.n_seeds;
    let default_t2 = cfg.t2();

    let mut runs: Vec<AblationRun> = Vec::new();
    for kind in [VariantKind::Full, VariantKind::NoCim, VariantKind::NoHae, VariantKind::Baseline]
    {
        for s in 0..n_seeds {
            runs.push(AblationRun {
                name: kind.name().to_string(),
                table: "variant",
                kind,
                source: FeatureSource::Bottleneck,
                t2: default_t2,
                seed_idx: s,
            });
        }
    }
    for source in [FeatureSource::Decoder, FeatureSource::Encoder] {
        for s in 0..n_seeds {
            runs.push(AblationRun {
                name: source.name().to_string(),
                table: "source",
                kind: VariantKind::Full,
                source,
                t2: default_t2,
                seed_idx: s,
            });
        }
    }
    for t2 in cfg.t2_grid() {
        if t2 == default_t2 {
            continue; // reuse the full-variant runs for this cell
        }
        for s in 0..n_seeds {
            runs.push(AblationRun {
                name: t2.to_string(),
                table: "t2",
                kind: VariantKind::Full,
                source: FeatureSource::Bottleneck,
                t2,
                seed_idx: s,
            });
        }
    }

    let config_hash = cfg.config_hash();
    let results: Vec<(Real, Real)> = parallel_map(&runs, |_, run| {
        ablate_one(cfg, &config_hash, &den, &sched, train, &data.test, epochs, run)
    })?;

    let lookup = |table: &str, name: &str| -> Vec<(usize, Real, Real)> {
        runs.iter()
            .zip(&results)
            .filter(|(r, _)| r.table == table && r.name == name)
            .map(|(r, (p, s))| (r.seed_idx, *p, *s))
            .collect()
    };

    let mut variants_csv = String::from("variant,seed,psnr,ssim\n");
    let mut ordering = String::from("kind,name,median_psnr\n");
    for kind in [VariantKind::Full, VariantKind::NoCim, VariantKind::NoHae, VariantKind::Baseline]
    {
        let rows = lookup("variant", kind.name());
        for (s, p, ss) in &rows {
            variants_csv.push_str(&format!("{},{s},{p:.6},{ss:.6}\n", kind.name()));
        }
        let m = median(rows.iter().map(|(_, p, _)| *p).collect());
        ordering.push_str(&format!("variant,{},{m:.6}\n", kind.name()));
    }

    // The bottleneck source IS the full variant; reuse its runs.
    let mut sources_csv = String::from("source,seed,psnr,ssim\n");
    for source in [FeatureSource::Bottleneck, FeatureSource::Decoder, FeatureSource::Encoder] {
        let rows = match source {
            FeatureSource::Bottleneck => lookup("variant", "full"),
            _ => lookup("source", source.name()),
        };
        for (s, p, ss) in &rows {
            sources_csv.push_str(&format!("{},{s},{p:.6},{ss:.6}\n", source.name()));
        }
        let m = median(rows.iter().map(|(_, p, _)| *p).collect());
        ordering.push_str(&format!("source,{},{m:.6}\n", source.name()));
    }

    let mut t2_csv = String::from("t2,seed,psnr\n");
    let mut t2_median_csv = String::from("t2,median_psnr\n");
    for t2 in cfg.t2_grid() {
        let rows = if t2 == default_t2 {
            lookup("variant", "full")
        } else {
            lookup("t2", &t2.to_string())
        };
        for (s, p, _) in &rows {
            t2_csv.push_str(&format!("{t2},{s},{p:.6}\n"));
        }
        let m = median(rows.iter().map(|(_, p, _)| *p).collect());
        t2_median_csv.push_str(&format!("{t2},{m:.6}\n"));
    }

    let mut artifacts = Vec::new();
    write_file(out, "ablate/variants.csv", variants_csv.as_bytes(), &mut artifacts)?;
    write_file(out, "ablate/sources.csv", sources_csv.as_bytes(), &mut artifacts)?;
    write_file(out, "ablate/t2_grid.csv", t2_csv.as_bytes(), &mut artifacts)?;
    write_file(out, "ablate/t2_median.csv", t2_median_csv.as_bytes(), &mut artifacts)?;
    write_file(out, "ablate/ordering.csv", ordering.as_bytes(), &mut artifacts)?;
    Ok(artifacts)
}

// ------------------------------------------------------------ export-plots

pub(crate) fn stage_export_plots(_cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let copies: [(&str, &str); 9] = [
        ("hspace/sweep/median.csv", "plots/separation_vs_t.csv"),
        ("hspace/sweep/sweep.csv", "plots/separation_per_seed.csv"),
        ("hspace/sweep/projection.csv", "plots/projection.csv"),
        ("diffusion/loss.csv", "plots/diffusion_loss.csv"),
        ("dehaze/loss.csv", "plots/dehaze_loss.csv"),
        ("dehaze/metrics.csv", "plots/dehaze_metrics.csv"),
        ("hspace/replace/replace.csv", "plots/replacement.csv"),
        ("ablate/ordering.csv", "plots/ablation_ordering.csv"),
        ("ablate/t2_median.csv", "plots/psnr_vs_t2.csv"),
    ];
    let mut artifacts = Vec::new();
    for (src, dst) in copies {
        let src_path = out.join(src);
        if !src_path.exists() {
            continue;
        }
        let bytes = fs::read(&src_path).map_err(|e| io_err(&src_path, e))?;
        write_file(out, dst, &bytes, &mut artifacts)?;
    }
    if artifacts.is_empty() {
        return Err(Error::contract(
            "export_plots",
            format!(
                "nothing to export under {}: run the earlier stages first",
                out.display()
            ),
        ));
    }
    Ok(artifacts)
}
