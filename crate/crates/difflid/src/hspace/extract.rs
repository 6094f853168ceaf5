//! Bottleneck feature extraction from a frozen denoiser.

use crate::diffusion::{stack_images, DenoiserUnet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hspace::{Domain, HFeature};
use crate::tensor::{derive_seed, Graph, Rng, Tensor};

/// One shared noise realization per (eps_seed, t, shape) — used where two
/// views must be noised identically so their difference isolates the image
/// change, as in the bottleneck-replacement experiment.
pub fn extraction_noise(shape: &[usize], t: usize, eps_seed: u64) -> Tensor {
    let mut rng = Rng::new(derive_seed(eps_seed, &format!("hspace/eps/{t}")));
    Tensor::randn(shape, &mut rng)
}

/// The per-sample noise used to build x_t for feature extraction. Each
/// (image, domain) gets its own realization, deterministically derived from
/// (eps_seed, t, image_id, domain): reruns are bit-identical, but features
/// at large t genuinely turn to noise instead of inheriting one another's
/// draw. This is what makes separation scores collapse toward zero at t = T.
pub fn sample_noise(
    shape: &[usize],
    t: usize,
    image_id: u32,
    domain: Domain,
    eps_seed: u64,
) -> Tensor {
    let label = format!("hspace/eps/{t}/{image_id}/{domain}");
    let mut rng = Rng::new(derive_seed(eps_seed, &label));
    Tensor::randn(shape, &mut rng)
}

fn ensure_frozen(net: &DenoiserUnet, op: &str) -> Result<()> {
    if net.params().iter().any(|p| !p.frozen) {
        return Err(Error::contract(
            op,
            "denoiser must be frozen before feature extraction (call freeze())",
        ));
    }
    Ok(())
}

/// Extract bottleneck features for a batch of images at one timestep, each
/// noised with its own (image, domain)-keyed realization. No gradients are
/// recorded.
pub fn extract_batch(
    net: &DenoiserUnet,
    sched: &NoiseSchedule,
    images: &[(&Tensor, u32, Domain)],
    t: usize,
    eps_seed: u64,
) -> Result<Vec<HFeature>> {
    ensure_frozen(net, "extract_h")?;
    if images.is_empty() {
        return Err(Error::contract("extract_h", "empty image batch"));
    }
    if t > sched.t_steps() {
        return Err(Error::index(
            "extract_h",
            format!("t = {t} outside [0, {}]", sched.t_steps()),
        ));
    }
    let shape = images[0].0.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dimension(
            "extract_h",
            format!("images must be [c,h,w], got {:?}", shape),
        ));
    }
    let mut noised = Vec::with_capacity(images.len());
    for (x, image_id, domain) in images {
        if x.shape() != shape.as_slice() {
            return Err(Error::dimension(
                "extract_h",
                format!("mixed image shapes in batch: {:?} vs {:?}", x.shape(), shape),
            ));
        }
        let eps = sample_noise(&shape, t, *image_id, *domain, eps_seed);
        noised.push(sched.q_sample(x, t, &eps)?);
    }
    let stacked = stack_images(&noised.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let xv = g.constant(stacked);
    let mid = net.forward_bottleneck(&mut g, xv, &vec![t; images.len()])?;
    let value = g.value(mid)?;
    let fshape = &value.shape()[1..];
    let per = fshape.iter().product::<usize>();
    let mut out = Vec::with_capacity(images.len());
    for (i, (_, image_id, domain)) in images.iter().enumerate() {
        let slice = value.data()[i * per..(i + 1) * per].to_vec();
        out.push(HFeature {
            feature: Tensor::from_vec(fshape, slice)?,
            t,
            image_id: *image_id,
            domain: *domain,
        });
    }
    Ok(out)
}

/// Single-image form of [`extract_batch`].
pub fn extract_h(
    net: &DenoiserUnet,
    sched: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    image_id: u32,
    domain: Domain,
    eps_seed: u64,
) -> Result<HFeature> {
    Ok(extract_batch(net, sched, &[(x, image_id, domain)], t, eps_seed)?.remove(0))
}
