//! Bottleneck replacement experiment: how much does the denoiser's output
//! change when the bottleneck is swapped between a clean and a hazy view of
//! the same scene, versus swapping the whole input?

use crate::diffusion::{stack_images, DenoiserUnet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hspace::extraction_noise;
use crate::tensor::{Graph, Tensor};
use crate::Real;

fn l2(v: &[Real]) -> Real {
    v.iter().map(|x| x * x).sum::<Real>().sqrt()
}

fn ratio(num: Real, denom: Real, op: &str) -> Result<Real> {
    if num == 0.0 {
        return Ok(0.0);
    }
    if denom <= 0.0 {
        return Err(Error::non_finite(op, "reference output has zero norm"));
    }
    Ok(num / denom)
}

/// Returns (h_swap_ratio, input_swap_ratio): the relative L2 change of the
/// predicted noise for x_clean at timestep t when (a) only the bottleneck is
/// replaced by the hazy image's bottleneck, and (b) the entire input is
/// replaced by the hazy image. Both views are noised with the same
/// realization drawn from (eps_seed, t).
pub fn replacement_probe(
    net: &DenoiserUnet,
    sched: &NoiseSchedule,
    x_clean: &Tensor,
    x_hazy: &Tensor,
    t: usize,
    eps_seed: u64,
) -> Result<(Real, Real)> {
    if net.params().iter().any(|p| !p.frozen) {
        return Err(Error::contract("replacement_probe", "denoiser must be frozen"));
    }
    if x_clean.shape() != x_hazy.shape() {
        return Err(Error::dimension(
            "replacement_probe",
            format!("clean {:?} vs hazy {:?}", x_clean.shape(), x_hazy.shape()),
        ));
    }
    if t > sched.t_steps() {
        return Err(Error::index(
            "replacement_probe",
            format!("t = {t} outside [0, {}]", sched.t_steps()),
        ));
    }
    let eps = extraction_noise(x_clean.shape(), t, eps_seed);
    let xt_clean = sched.q_sample(x_clean, t, &eps)?;
    let xt_hazy = sched.q_sample(x_hazy, t, &eps)?;

    let mut g = Graph::new();
    let cv = g.constant(stack_images(&[&xt_clean])?);
    let hv = g.constant(stack_images(&[&xt_hazy])?);
    let base = net.forward(&mut g, cv, &[t])?;
    let hazy_run = net.forward(&mut g, hv, &[t])?;
    let swapped = net.forward_full(&mut g, cv, &[t], Some(hazy_run.bottleneck))?;

    let base_eps = g.value(base.eps_hat)?.data().to_vec();
    let swap_eps = g.value(swapped.eps_hat)?.data();
    let input_eps = g.value(hazy_run.eps_hat)?.data();

    let diff_swap: Vec<Real> = swap_eps.iter().zip(&base_eps).map(|(a, b)| a - b).collect();
    let diff_input: Vec<Real> = input_eps.iter().zip(&base_eps).map(|(a, b)| a - b).collect();
    let denom = l2(&base_eps);
    Ok((
        ratio(l2(&diff_swap), denom, "replacement_probe")?,
        ratio(l2(&diff_input), denom, "replacement_probe")?,
    ))
}
