//! Variance schedule and closed-form marginals of the forward noising chain.
//!
//! Conventions: timesteps run 1..=T for transitions; `alpha_bar(0) = 1`
//! so t = 0 denotes the clean image. Betas are linearly spaced. The toy
//! defaults rescale the classic (1e-4, 0.02) endpoints by 1000/T so the
//! total injected noise stays comparable when T shrinks.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::Real;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_steps: usize,
    betas: Vec<Real>,
    alphas: Vec<Real>,
    alpha_bars: Vec<Real>,
}

/// Beta endpoints scaled for a shortened chain, clamped below 1.
pub fn toy_beta_endpoints(t_steps: usize) -> (Real, Real) {
    let scale = 1000.0 / t_steps as Real;
    ((1e-4 * scale).min(0.999), (0.02 * scale).min(0.999))
}

pub fn make_schedule(t_steps: usize, beta_start: Real, beta_end: Real) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::contract("make_schedule", "need at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(Error::contract(
            "make_schedule",
            format!("betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"),
        ));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let f = if t_steps == 1 { 0.0 } else { i as Real / (t_steps - 1) as Real };
        betas.push(beta_start + (beta_end - beta_start) * f);
    }
    let alphas: Vec<Real> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { t_steps, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    fn check_transition_t(&self, op: &str, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps {
            return Err(Error::index(op, format!("t must be in 1..={}, got {}", self.t_steps, t)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<Real> {
        self.check_transition_t("schedule::beta", t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<Real> {
        self.check_transition_t("schedule::alpha", t)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<Real> {
        if t > self.t_steps {
            return Err(Error::index(
                "schedule::alpha_bar",
                format!("t must be in 0..={}, got {}", self.t_steps, t),
            ));
        }
        Ok(self.alpha_bars[t])
    }

    /// Variance of the reverse-step posterior q(x_{t-1} | x_t, x_0).
    pub fn posterior_var(&self, t: usize) -> Result<Real> {
        self.check_transition_t("schedule::posterior_var", t)?;
        Ok((1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t - 1])
    }

    /// Sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. At t = 0 this is
    /// the identity.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::dimension(
                "schedule::q_sample",
                format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar(t)?;
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data: Vec<Real> =
            x0.data().iter().zip(eps.data()).map(|(x, e)| ca * x + ce * e).collect();
        Tensor::from_vec(x0.shape(), data)
    }

    /// Posterior mean written in terms of the noise that produced x_t.
    pub fn posterior_mean_from_eps(&self, xt: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_transition_t("schedule::posterior_mean_from_eps", t)?;
        if xt.shape() != eps.shape() {
            return Err(Error::dimension(
                "schedule::posterior_mean_from_eps",
                format!("xt {:?} vs eps {:?}", xt.shape(), eps.shape()),
            ));
        }
        let a = self.alphas[t - 1];
        let ab = self.alpha_bars[t];
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let data: Vec<Real> =
            xt.data().iter().zip(eps.data()).map(|(x, e)| inv_sqrt_a * (x - coef * e)).collect();
        Tensor::from_vec(xt.shape(), data)
    }

    /// Posterior mean written in terms of the clean image.
    pub fn posterior_mean_from_x0(&self, x0: &Tensor, xt: &Tensor, t: usize) -> Result<Tensor> {
        self.check_transition_t("schedule::posterior_mean_from_x0", t)?;
        if xt.shape() != x0.shape() {
            return Err(Error::dimension(
                "schedule::posterior_mean_from_x0",
                format!("x0 {:?} vs xt {:?}", x0.shape(), xt.shape()),
            ));
        }
        let b = self.betas[t - 1];
        let a = self.alphas[t - 1];
        let ab_prev = self.alpha_bars[t - 1];
        let ab = self.alpha_bars[t];
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let data: Vec<Real> =
            x0.data().iter().zip(xt.data()).map(|(x, y)| c0 * x + ct * y).collect();
        Tensor::from_vec(x0.shape(), data)
    }

    /// Noise tensor for a given shape from a seeded stream.
    pub fn draw_eps(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::randn(shape, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::derive_seed;

    #[test]
    fn two_step_schedule_hand_values() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-12);
        // (1 - 0.9) / (1 - 0.72) * 0.2
        assert!((s.posterior_var(2).unwrap() - 0.0714285714285714).abs() < 1e-12);
        // First transition has a deterministic posterior.
        assert_eq!(s.posterior_var(1).unwrap(), 0.0);
    }

    #[test]
    fn alpha_bar_strictly_decreases_and_stays_in_unit_interval() {
        for t_steps in [1usize, 2, 10, 100] {
            let (bs, be) = toy_beta_endpoints(t_steps);
            let s = make_schedule(t_steps, bs, be).unwrap();
            let mut prev = 1.0;
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            for t in 1..=t_steps {
                let ab = s.alpha_bar(t).unwrap();
                assert!(ab < prev, "alpha_bar must strictly decrease");
                assert!(ab > 0.0 && ab < 1.0);
                prev = ab;
            }
        }
    }

    #[test]
    fn q_sample_at_zero_is_identity_and_hand_value_at_two() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = Tensor::zeros(&[3]);
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0);
        let xt = s.q_sample(&x0, 2, &eps).unwrap();
        let c = (0.72 as Real).sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - c * b).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_and_x0_posterior_means_agree() {
        let s = make_schedule(10, 0.02, 0.3).unwrap();
        let mut rng = Rng::new(derive_seed(99, "posterior"));
        for i in 0..100 {
            let t = 1 + (i % 10);
            let x0 = Tensor::randn(&[2, 3], &mut rng);
            let eps = Tensor::randn(&[2, 3], &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let m_eps = s.posterior_mean_from_eps(&xt, t, &eps).unwrap();
            let m_x0 = s.posterior_mean_from_x0(&x0, &xt, t).unwrap();
            let diff = m_eps.max_abs_diff(&m_x0).unwrap();
            assert!(diff < 1e-6, "forms disagree by {diff} at t={t}");
        }
    }

    #[test]
    fn out_of_range_t_is_an_index_error() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.beta(5).is_err());
        assert!(s.alpha_bar(5).is_err());
        let x = Tensor::zeros(&[2]);
        assert!(s.q_sample(&x, 5, &x).is_err());
    }

    #[test]
    fn invalid_beta_ranges_are_rejected() {
        assert!(make_schedule(4, 0.0, 0.2).is_err());
        assert!(make_schedule(4, 0.3, 0.2).is_err());
        assert!(make_schedule(4, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }
}
