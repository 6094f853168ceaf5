//! Scratch tuning driver (not part of the deliverable).
use difflid::diffusion::{make_schedule, toy_beta_endpoints, train_denoiser, DenoiserConfig, DenoiserUnet, DiffusionTrainConfig};
use difflid::hazegen::{build_dataset, load_dataset, DatasetConfig, HazeRanges};
use difflid::hspace::sweep_timesteps;
use difflid::tensor::{derive_seed, Rng, Tensor};
use std::time::Instant;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn main() -> difflid::Result<()> {
    let t_steps = 100usize;
    let size = 32usize;
    let seed = 11u64;
    let t_list = vec![0usize, 10, 25, 50, 75, 90, 100];
    let (b0, b1) = toy_beta_endpoints(t_steps);
    let sched = make_schedule(t_steps, b0, b1)?;

    // (label, steps, beta range, airlight range, pair counts to sweep)
    let cases: Vec<(&str, u64, f64, f64, f64, f64, Vec<usize>)> = vec![
        ("ultra-6k-j", 6000, 0.15, 0.45, 0.72, 0.82, vec![32, 16]),
        ("mild-6k-j", 6000, 0.3, 0.8, 0.70, 0.85, vec![32, 16]),
        ("ultra-12k-j", 12000, 0.15, 0.45, 0.72, 0.82, vec![32]),
    ];

    for (label, steps, bmin, bmax, amin, amax, pair_counts) in cases {
        let ranges = HazeRanges { airlight_min: amin, airlight_max: amax, beta_min: bmin, beta_max: bmax };
        let tmp = std::env::temp_dir().join(format!("difflid-tune-{bmin}-{bmax}-{amin}-{amax}"));
        let dcfg = DatasetConfig { n_train: 200, n_test: 16, size, ranges, export_png: false };
        if !tmp.join("manifest.json").exists() {
            build_dataset(&dcfg, derive_seed(seed, "data"), &tmp)?;
        }
        let data = load_dataset(&tmp)?;

        // Train the denoiser on clean + hazy images.
        let ncfg = DenoiserConfig { in_channels: 3, widths: [16, 32, 64], groups: 8, time_embed_dim: 64 };
        let mut net = DenoiserUnet::new(ncfg, &mut Rng::new(derive_seed(seed, "diffusion/init")));
        let mut images: Vec<Tensor> = Vec::new();
        for p in &data.train {
            images.push(p.clean.clone());
            images.push(p.hazy.clone());
        }
        let tcfg = DiffusionTrainConfig {
            steps,
            batch_size: 4,
            lr: 1e-3,
            lr_decay_every: (steps / 3).max(1),
            lr_decay: 0.5,
        };
        let t0 = Instant::now();
        let log = train_denoiser(&mut net, &sched, &images, &tcfg, seed)?;
        let train_secs = t0.elapsed().as_secs_f64();
        net.freeze();
        println!("\n=== case {label}: steps={steps} beta=[{bmin},{bmax}] air=[{amin},{amax}] train {train_secs:.0}s final-loss {:.4}", log.final_smoothed(50));

        for n_pairs in pair_counts.clone() {
            let pairs: Vec<_> = data.train.iter().take(n_pairs).cloned().collect();
            let mut content: Vec<Vec<f64>> = vec![Vec::new(); t_list.len()];
            let mut domain: Vec<Vec<f64>> = vec![Vec::new(); t_list.len()];
            let t1 = Instant::now();
            for s in 0..3u64 {
                let eps_seed = derive_seed(seed, &format!("hspace/sweep-eps/{s}"));
                let reports = sweep_timesteps(&net, &sched, &pairs, &t_list, eps_seed)?;
                for (i, row) in reports.iter().enumerate() {
                    content[i].push(row.content_score);
                    domain[i].push(row.domain_score);
                }
            }
            let sweep_secs = t1.elapsed().as_secs_f64();
            let cmed: Vec<f64> = content.iter().map(|v| median(v.clone())).collect();
            let dmed: Vec<f64> = domain.iter().map(|v| median(v.clone())).collect();
            println!("-- pairs={n_pairs} (sweep {sweep_secs:.0}s)");
            println!("   t:       {:?}", t_list);
            println!("   content: {}", cmed.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));
            println!("   domain:  {}", dmed.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" "));
            let ci = |t: usize| t_list.iter().position(|x| *x == t).unwrap();
            let (c0, c50, c100) = (cmed[ci(0)], cmed[ci(50)], cmed[ci(100)]);
            let (d0, d50, d100) = (dmed[ci(0)], dmed[ci(50)], dmed[ci(100)]);
            let cmax_at0 = cmed.iter().all(|v| *v <= c0);
            println!(
                "   gates: c0>c50>c100 {} | cmax@0 {} | d50>d0 {} ({:+.3} vs {:+.3}) | d50>d100 {} | d100<0.2 {}",
                c0 > c50 && c50 > c100,
                cmax_at0,
                d50 > d0,
                d50,
                d0,
                d50 > d100,
                d100 < 0.2
            );
        }
    }
    Ok(())
}
