//! Check analytic gradients against central finite differences for the
//! building blocks that matter most: convolution, group normalization,
//! the cross-attention content module, the channel-attention modulation
//! module, and a miniature copy of the full dehazing network.
//!
//! Run with: cargo run --release --example gradcheck

use difflid::dehaze::{
    ContentIntegration, DehazeConfig, DehazeNet, HazeAwareEnhancement, SelfAttention, VariantKind,
};
use difflid::tensor::{
    grad_check, Conv2dLayer, GradCheckOptions, Graph, GroupNormLayer, Parameter, Rng, Tensor, Var,
};
use difflid::{Real, Result};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn(shape, &mut rng)
}

/// Nudge zero-initialized weights off zero so every branch carries gradient.
fn jitter_params(params: Vec<&mut Parameter>, seed: u64) {
    let mut rng = Rng::new(seed);
    for p in params {
        let shape = p.value.shape().to_vec();
        let data: Vec<Real> = p
            .value
            .data()
            .iter()
            .map(|v| v + rng.normal() as Real * 0.2)
            .collect();
        p.value = Tensor::from_vec(&shape, data).expect("same shape");
    }
}

fn report(
    name: &str,
    inputs: &[Tensor],
    tol: f64,
    max_checks: usize,
    mut build: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<()> {
    let opts = GradCheckOptions { tol, max_checks_per_input: max_checks, ..Default::default() };
    let rep = grad_check(&mut build, inputs, &opts)?;
    println!(
        "  {name:<22} max rel err {:>12.3e}  ({} derivatives)  {}",
        rep.max_rel_err,
        rep.checked,
        if rep.pass { "ok" } else { "FAIL" }
    );
    Ok(())
}

fn main() -> Result<()> {
    println!("gradient checks (central differences):");

    let mut rng = Rng::new(11);
    let conv = Conv2dLayer::new("ex.conv", 3, 4, 3, 1, 1, &mut rng);
    report("conv 3x3", &[random(&[2, 3, 6, 6], 1)], 1e-5, 24, |g, vars| {
        let y = conv.forward(g, vars[0])?;
        g.mean_squared(y)
    })?;

    let norm = GroupNormLayer::new("ex.norm", 8, 4);
    report("group norm", &[random(&[2, 8, 5, 5], 2)], 1e-5, 24, |g, vars| {
        let y = norm.forward(g, vars[0])?;
        g.mean_squared(y)
    })?;

    let sattn = SelfAttention::new("ex.sattn", 8, 6, &mut rng);
    report("self-attention", &[random(&[1, 8, 4, 4], 3)], 1e-4, 24, |g, vars| {
        let y = sattn.forward(g, vars[0])?;
        g.mean_squared(y)
    })?;

    let mut cim = ContentIntegration::new("ex.cim", 8, 6, 2, &mut rng)?;
    jitter_params(cim.params_mut(), 4);
    report(
        "content cross-attn",
        &[random(&[1, 8, 4, 4], 5), random(&[1, 6, 3, 3], 6)],
        1e-4,
        24,
        |g, vars| {
            let y = cim.forward(g, vars[0], vars[1])?;
            g.mean_squared(y)
        },
    )?;

    let mut hae = HazeAwareEnhancement::new("ex.hae", 8, 6, &mut rng);
    jitter_params(hae.params_mut(), 7);
    report(
        "haze-aware modulation",
        &[random(&[1, 8, 4, 4], 8), random(&[1, 6, 3, 3], 9)],
        1e-4,
        24,
        |g, vars| {
            let y = hae.forward(g, vars[0], vars[1])?;
            g.mean_squared(y)
        },
    )?;

    let cfg = DehazeConfig { widths: [4, 4, 4, 4], heads: 2, h_channels: 4, in_channels: 3 };
    let mut net = DehazeNet::new(cfg, VariantKind::Full, &mut Rng::new(21))?;
    jitter_params(net.params_mut(), 22);
    report(
        "miniature dehaze net",
        &[random(&[1, 3, 8, 8], 31), random(&[1, 4, 2, 2], 32), random(&[1, 4, 2, 2], 33)],
        1e-4,
        6,
        |g, vars| {
            let y = net.forward(g, vars[0], vars[1], vars[2])?;
            g.mean_squared(y)
        },
    )?;
    Ok(())
}
