//! Group normalization over NCHW tensors.

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::graph::{GradStore, Graph, Op, Var};

const GN_EPS: Real = 1e-5;

impl Graph {
    /// Normalize each (sample, channel-group) slice to zero mean and unit
    /// variance, then apply a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let ix = self.check(x, "group_norm")?;
        let ig = self.check(gamma, "group_norm")?;
        let ib = self.check(beta, "group_norm")?;
        let sx = self.nodes[ix].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::dimension("group_norm", format!("input must be rank 4, got {:?}", sx)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::contract(
                "group_norm",
                format!("channel count {} not divisible into {} groups", c, groups),
            ));
        }
        if self.nodes[ig].value.shape() != [c] || self.nodes[ib].value.shape() != [c] {
            return Err(Error::dimension(
                "group_norm",
                format!("affine params must be [{}]", c),
            ));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let vx = self.nodes[ix].value.data();
        let vg = self.nodes[ig].value.data();
        let vb = self.nodes[ib].value.data();
        let mut out = vec![0.0; vx.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for grp in 0..groups {
                let start = (i * c + grp * cg) * h * w;
                let slice = &vx[start..start + m];
                let mean = slice.iter().sum::<Real>() / m as Real;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / m as Real;
                let inv = 1.0 / (var + GN_EPS).sqrt();
                stats.push((mean, inv));
                for local_c in 0..cg {
                    let ch = grp * cg + local_c;
                    let base = (i * c + ch) * h * w;
                    let (gam, bet) = (vg[ch], vb[ch]);
                    for p in 0..h * w {
                        out[base + p] = (vx[base + p] - mean) * inv * gam + bet;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        let rg = self.requires(ix) || self.requires(ig) || self.requires(ib);
        Ok(self.push(value, Op::GroupNorm { x: ix, gamma: ig, beta: ib, groups, stats }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    g: &Graph,
    ix: usize,
    ig: usize,
    ib: usize,
    groups: usize,
    stats: &[(Real, Real)],
    gout: &[Real],
    store: &mut GradStore,
) -> Result<()> {
    let sx = g.nodes[ix].value.shape().to_vec();
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let cg = c / groups;
    let m = cg * h * w;
    let hw = h * w;
    let vx = g.nodes[ix].value.data();
    let vg = g.nodes[ig].value.data();

    let need_x = g.requires(ix);
    let need_g = g.requires(ig);
    let need_b = g.requires(ib);
    let mut dx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
    let mut dgamma = if need_g { vec![0.0; c] } else { Vec::new() };
    let mut dbeta = if need_b { vec![0.0; c] } else { Vec::new() };

    for i in 0..n {
        for grp in 0..groups {
            let (mean, inv) = stats[i * groups + grp];
            let start = (i * c + grp * cg) * hw;
            // First pass: per-channel reductions and group sums of dxhat.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for local_c in 0..cg {
                let ch = grp * cg + local_c;
                let base = (i * c + ch) * hw;
                let gam = vg[ch];
                for p in 0..hw {
                    let go = gout[base + p];
                    let xhat = (vx[base + p] - mean) * inv;
                    if need_g {
                        dgamma[ch] += go * xhat;
                    }
                    if need_b {
                        dbeta[ch] += go;
                    }
                    let dxhat = go * gam;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            if need_x {
                let mean_dxhat = sum_dxhat / m as Real;
                let mean_dxhat_xhat = sum_dxhat_xhat / m as Real;
                for local_c in 0..cg {
                    let ch = grp * cg + local_c;
                    let base = (i * c + ch) * hw;
                    let gam = vg[ch];
                    for p in 0..hw {
                        let xhat = (vx[base + p] - mean) * inv;
                        let dxhat = gout[base + p] * gam;
                        dx[base + p] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            let _ = start;
        }
    }
    if need_x {
        store.accumulate(ix, dx);
    }
    if need_g {
        store.accumulate(ig, dgamma);
    }
    if need_b {
        store.accumulate(ib, dbeta);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::core::Tensor;
    use super::super::graph::Graph;
    use super::super::rng::Rng;
    use crate::Real;

    #[test]
    fn normalizes_each_group_to_standard_moments() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 8, 4, 4], &mut rng).map(|v| v * 3.0 + 1.5));
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.group_norm(x, gamma, beta, 4).unwrap();
        let v = g.value(y).unwrap();
        let (n, c, hw, cg) = (2, 8, 16, 2);
        for i in 0..n {
            for grp in 0..4 {
                let mut vals = Vec::new();
                for lc in 0..cg {
                    let base = (i * c + grp * cg + lc) * hw;
                    vals.extend_from_slice(&v.data()[base..base + hw]);
                }
                let m = vals.iter().sum::<Real>() / vals.len() as Real;
                let var =
                    vals.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / vals.len() as Real;
                assert!(m.abs() < 1e-10, "mean {m}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn affine_params_shift_and_scale() {
        let mut rng = Rng::new(6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 4, 3, 3], &mut rng));
        let gamma = g.constant(Tensor::full(&[4], 2.0));
        let beta = g.constant(Tensor::full(&[4], -1.0));
        let y = g.group_norm(x, gamma, beta, 2).unwrap();
        let v = g.value(y).unwrap();
        let m = v.mean();
        assert!((m - -1.0).abs() < 1e-9, "group means are 0, so output mean is beta: {m}");
    }

    #[test]
    fn group_count_must_divide_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let gamma = g.constant(Tensor::full(&[6], 1.0));
        let beta = g.constant(Tensor::zeros(&[6]));
        assert!(g.group_norm(x, gamma, beta, 4).is_err());
    }
}
