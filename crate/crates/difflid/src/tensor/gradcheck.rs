//! Central finite-difference verification of analytic gradients. Meaningful
//! only in the default 64-bit build; 32-bit arithmetic cannot reach the
//! tolerances this is used with.

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::graph::{Graph, Var};
use super::rng::Rng;

pub struct GradCheckOptions {
    /// Central difference step.
    pub h: f64,
    /// Maximum relative error allowed.
    pub tol: f64,
    /// Absolute slack under which both gradients count as matching zero.
    pub atol: f64,
    /// Cap on coordinates checked per input (0 = all). Sampling is seeded
    /// and deterministic.
    pub max_checks_per_input: usize,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-5, atol: 1e-8, max_checks_per_input: 0, sample_seed: 1 }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences, perturbing every (sampled) input coordinate.
pub fn grad_check(
    build: &mut dyn FnMut(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    fn eval(
        build: &mut dyn FnMut(&mut Graph, &[Var]) -> Result<Var>,
        tensors: &[Tensor],
    ) -> Result<Real> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars)?;
        g.value(out)?.item()
    }

    // Analytic pass.
    let mut tracked: Vec<Tensor> = inputs.to_vec();
    for t in tracked.iter_mut() {
        t.requires_grad = true;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out)?.numel() != 1 {
        return Err(Error::contract("grad_check", "builder must produce a scalar"));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<Real>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.slice(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = Rng::new(opts.sample_seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if opts.max_checks_per_input == 0 || opts.max_checks_per_input >= n
        {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(opts.max_checks_per_input);
            all.sort_unstable();
            all
        };
        for &j in &coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.h as Real;
            let plus = eval(build, &work)? as f64;
            work[i].data_mut()[j] = orig - opts.h as Real;
            let minus = eval(build, &work)? as f64;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i][j] as f64;
            checked += 1;
            let diff = (a - numeric).abs();
            if diff > opts.atol {
                let rel = diff / a.abs().max(numeric.abs());
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked, pass: max_rel <= opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_for_a_correct_composite() {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let report = grad_check(
            &mut |g, vars| {
                let s = g.silu(vars[0])?;
                let sm = g.softmax_last(s)?;
                g.mean_squared(sm)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // abs() near a point where the "gradient" of a deliberately wrong
        // surrogate differs: compare d/dx of x^2 claimed as 3x^2 by scaling
        // the loss inconsistently between passes. Easiest honest check:
        // perturb the analytic side by building a different function for the
        // numeric evaluation via a stateful closure.
        let mut call = 0usize;
        let x = Tensor::from_vec(&[2], vec![0.5, -1.25]).unwrap();
        let report = grad_check(
            &mut |g, vars| {
                call += 1;
                let factor = if call == 1 { 2.0 } else { 1.0 };
                let s = g.scale(vars[0], factor)?;
                g.mean_squared(s)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn sampling_caps_the_number_of_checks() {
        let mut rng = Rng::new(12);
        let x = Tensor::randn(&[10, 10], &mut rng);
        let opts = GradCheckOptions { max_checks_per_input: 7, ..Default::default() };
        let report = grad_check(&mut |g, v| g.mean_squared(v[0]), &[x], &opts).unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.pass);
    }
}
