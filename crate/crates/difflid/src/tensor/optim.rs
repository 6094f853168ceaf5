//! Adam with bias correction. Moments are keyed by parameter name in sorted
//! maps, so update order and serialization are deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::Real;

use super::graph::{Gradients, Graph};
use super::layers::Parameter;

pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step: u64,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters that are frozen, or that did not take
    /// part in the graph, are skipped and their moments stay untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter],
        graph: &Graph,
        grads: &Gradients,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(var) = graph.param_var(p) else { continue };
            let Some(grad) = grads.slice(var) else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(
                    "adam::step",
                    format!("gradient of {} at step {}", p.name, self.step),
                ));
            }
            let n = p.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(Error::contract(
                    "adam::step",
                    format!("moment size mismatch for {}: {} vs {}", p.name, m.len(), n),
                ));
            }
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::core::Tensor;
    use crate::tensor::graph::Graph;
    use crate::tensor::rng::Rng;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Parameter::new("w", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let target = Tensor::from_vec(&[3], vec![5.0, -5.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p);
        let t = g.constant(target);
        let diff = g.sub(w, t).unwrap();
        let loss = g.mean_squared(diff).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &g, &grads).unwrap();
        let v = p.value.data();
        // grad signs: (1-5)<0, (1+5)>0, 0 -> moves +lr, -lr, ~0
        assert!((v[0] - 1.1).abs() < 1e-6, "{}", v[0]);
        assert!((v[1] - 0.9).abs() < 1e-6, "{}", v[1]);
        assert!((v[2] - 1.0).abs() < 1e-6, "{}", v[2]);
    }

    #[test]
    fn quadratic_matches_independent_scalar_recurrence() {
        // f(w) = (w - 3)^2 from w = 0 at lr 0.5: compare ten steps against a
        // standalone scalar Adam recurrence, then check real progress.
        let mut p = Parameter::new("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut adam = Adam::new(0.5);

        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut w_ref, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for step in 1..=10 {
            let mut g = Graph::new();
            let w = g.param(&p);
            let c = g.constant(Tensor::from_vec(&[1], vec![3.0]).unwrap());
            let diff = g.sub(w, c).unwrap();
            let loss = g.mean_squared(diff).unwrap();
            let grads = g.backward(loss).unwrap();
            adam.step(&mut [&mut p], &g, &grads).unwrap();

            let grad = 2.0 * (w_ref - 3.0);
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let mhat = m / (1.0 - b1.powi(step));
            let vhat = v / (1.0 - b2.powi(step));
            w_ref -= 0.5 * mhat / (vhat.sqrt() + eps);

            let got = p.value.data()[0] as f64;
            assert!((got - w_ref).abs() < 1e-12, "step {step}: {got} vs {w_ref}");
        }
        // Adam overshoots a little on momentum; distance still shrinks from
        // 3.0 to under 1.0 within ten steps.
        assert!((w_ref - 3.0).abs() < 1.0, "ten steps should close most of the gap: {w_ref}");
    }

    #[test]
    fn frozen_parameter_is_untouched_and_gets_no_moments() {
        let mut rng = Rng::new(8);
        let mut p = Parameter::new("w", Tensor::randn(&[4], &mut rng));
        p.frozen = true;
        let before = p.value.clone();
        let mut g = Graph::new();
        let w = g.param(&p);
        let loss = g.mean_squared(w).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &g, &grads).unwrap();
        assert_eq!(p.value, before);
        assert!(adam.m.is_empty());
    }

    #[test]
    fn non_finite_gradient_is_reported_with_param_name() {
        let mut p = Parameter::new("w.bad", Tensor::from_vec(&[1], vec![1e308]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&p);
        let sq = g.mul(w, w).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(0.1);
        let err = adam.step(&mut [&mut p], &g, &grads).unwrap_err();
        assert!(err.to_string().contains("w.bad"), "{err}");
    }
}
