//! Noise-prediction training and ancestral sampling.

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Adam, Graph, Rng, Tensor};
use crate::Real;

use super::schedule::NoiseSchedule;
use super::unet::DenoiserUnet;

#[derive(Clone, Debug)]
pub struct DiffusionTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: Real,
    /// Halve the learning rate every this many steps (0 disables decay).
    pub lr_decay_every: u64,
    pub lr_decay: Real,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig { steps: 2000, batch_size: 4, lr: 1e-3, lr_decay_every: 800, lr_decay: 0.5 }
    }
}

/// Per-step losses with helpers for windowed smoothing.
#[derive(Clone, Debug, Default)]
pub struct LossLog {
    pub entries: Vec<(u64, Real)>,
}

impl LossLog {
    pub fn push(&mut self, step: u64, loss: Real) {
        self.entries.push((step, loss));
    }

    fn window_mean(&self, range: std::ops::Range<usize>) -> Real {
        let slice = &self.entries[range];
        slice.iter().map(|(_, l)| *l).sum::<Real>() / slice.len().max(1) as Real
    }

    pub fn initial_smoothed(&self, window: usize) -> Real {
        self.window_mean(0..window.min(self.entries.len()))
    }

    pub fn final_smoothed(&self, window: usize) -> Real {
        let n = self.entries.len();
        self.window_mean(n.saturating_sub(window)..n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.entries {
            s.push_str(&format!("{},{}\n", step, loss));
        }
        s
    }
}

/// Stack per-image tensors [c,h,w] into a batch [n,c,h,w].
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("stack_images", "empty batch"));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::dimension(
                "stack_images",
                format!("mixed shapes {:?} vs {:?}", img.shape(), shape),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, data)
}

/// Noise a clean batch at per-sample timesteps and return the prediction
/// loss ||eps - eps_hat||^2 as a graph node.
pub fn ddpm_loss(
    g: &mut Graph,
    net: &DenoiserUnet,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<crate::tensor::Var> {
    if x0.shape() != eps.shape() {
        return Err(Error::dimension(
            "ddpm_loss",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    if x0.rank() != 4 || x0.shape()[0] != ts.len() {
        return Err(Error::dimension(
            "ddpm_loss",
            format!("x0 {:?} vs {} timesteps", x0.shape(), ts.len()),
        ));
    }
    let per = x0.numel() / x0.shape()[0];
    let mut xt = vec![0.0; x0.numel()];
    for (n, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (xs, es) = (&x0.data()[n * per..(n + 1) * per], &eps.data()[n * per..(n + 1) * per]);
        for i in 0..per {
            xt[n * per + i] = ca * xs[i] + ce * es[i];
        }
    }
    let x_in = g.constant(Tensor::from_vec(x0.shape(), xt)?);
    let out = net.forward(g, x_in, ts)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(target, out.eps_hat)?;
    g.mean_squared(diff)
}

/// Train the denoiser on clean images. Deterministic in (images, seed,
/// config); returns the loss trace.
pub fn train_denoiser(
    net: &mut DenoiserUnet,
    schedule: &NoiseSchedule,
    images: &[Tensor],
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<LossLog> {
    if images.is_empty() {
        return Err(Error::contract("train_denoiser", "no training images"));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::contract("train_denoiser", "steps and batch_size must be positive"));
    }
    let mut batch_rng = Rng::new(derive_seed(seed, "diffusion/batch"));
    let mut t_rng = Rng::new(derive_seed(seed, "diffusion/t"));
    let mut eps_rng = Rng::new(derive_seed(seed, "diffusion/eps"));
    let mut adam = Adam::new(cfg.lr);
    let mut log = LossLog::default();
    let t_max = schedule.t_steps();

    let mut batch_shape = vec![cfg.batch_size];
    batch_shape.extend_from_slice(images[0].shape());

    for step in 1..=cfg.steps {
        let picks: Vec<&Tensor> =
            (0..cfg.batch_size).map(|_| &images[batch_rng.below(images.len())]).collect();
        let x0 = stack_images(&picks)?;
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| 1 + t_rng.below(t_max)).collect();
        let eps = Tensor::randn(&batch_shape, &mut eps_rng);

        let mut g = Graph::new();
        let loss = ddpm_loss(&mut g, net, schedule, &x0, &ts, &eps)?;
        let loss_val = g.value(loss)?.item()?;
        if !loss_val.is_finite() {
            return Err(Error::non_finite(
                "train_denoiser",
                format!("loss diverged at step {step}"),
            ));
        }
        let grads = g.backward(loss)?;
        if cfg.lr_decay_every > 0 {
            let k = (step - 1) / cfg.lr_decay_every;
            adam.lr = cfg.lr * cfg.lr_decay.powi(k as i32);
        }
        adam.step(&mut net.params_mut(), &g, &grads)?;
        log.push(step, loss_val);
    }
    Ok(log)
}

/// Ancestral sampling with an arbitrary noise predictor.
pub fn reverse_sample_with(
    predict: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
    schedule: &NoiseSchedule,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = Rng::new(derive_seed(seed, "sample"));
    let shape = [n, channels, height, width];
    let mut x = Tensor::randn(&shape, &mut rng);
    for t in (1..=schedule.t_steps()).rev() {
        let eps_hat = predict(&x, t)?;
        if eps_hat.shape() != x.shape() {
            return Err(Error::dimension(
                "reverse_sample",
                format!("predictor returned {:?}, expected {:?}", eps_hat.shape(), x.shape()),
            ));
        }
        let mut next = schedule.posterior_mean_from_eps(&x, t, &eps_hat)?;
        if t > 1 {
            let sigma = schedule.posterior_var(t)?.sqrt();
            let z = Tensor::randn(&shape, &mut rng);
            let data: Vec<Real> =
                next.data().iter().zip(z.data()).map(|(m, z)| m + sigma * z).collect();
            next = Tensor::from_vec(&shape, data)?;
        }
        if !next.is_finite() {
            return Err(Error::non_finite("reverse_sample", format!("sample at t={t}")));
        }
        x = next;
    }
    Ok(x)
}

/// Ancestral sampling from a trained denoiser.
pub fn reverse_sample(
    net: &DenoiserUnet,
    schedule: &NoiseSchedule,
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Tensor> {
    let channels = net.cfg.in_channels;
    reverse_sample_with(
        &mut |x, t| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = net.forward(&mut g, xv, &vec![t; x.shape()[0]])?;
            Ok(g.value(out.eps_hat)?.clone())
        },
        schedule,
        n,
        height,
        width,
        channels,
        seed,
    )
}
