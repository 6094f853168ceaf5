//! Multi-head scaled dot-product attention with separate query and key/value
//! sequences. Heads split the channel axis; scaling is 1/sqrt(head_dim).

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::graph::{GradStore, Graph, Op, Var};
use super::ops::gemm_strided;

/// Copy the `h`-th head slice of a [n_seq, heads*d] row-major block into a
/// contiguous [n_seq, d] buffer.
fn gather_head(src: &[Real], n_seq: usize, c: usize, h: usize, d: usize, dst: &mut [Real]) {
    for row in 0..n_seq {
        let base = row * c + h * d;
        dst[row * d..(row + 1) * d].copy_from_slice(&src[base..base + d]);
    }
}

fn scatter_head_add(dst: &mut [Real], n_seq: usize, c: usize, h: usize, d: usize, src: &[Real]) {
    for row in 0..n_seq {
        let base = row * c + h * d;
        for i in 0..d {
            dst[base + i] += src[row * d + i];
        }
    }
}

impl Graph {
    /// q: [n, lq, c], k/v: [n, lk, c] -> [n, lq, c].
    pub fn mha_cross(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let iq = self.check(q, "mha_cross")?;
        let ik = self.check(k, "mha_cross")?;
        let iv = self.check(v, "mha_cross")?;
        let sq = self.nodes[iq].value.shape().to_vec();
        let sk = self.nodes[ik].value.shape().to_vec();
        let sv = self.nodes[iv].value.shape().to_vec();
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(Error::dimension(
                "mha_cross",
                format!("expected rank-3 [n,len,c] operands, got {:?}/{:?}/{:?}", sq, sk, sv),
            ));
        }
        if sq[0] != sk[0] || sq[0] != sv[0] {
            return Err(Error::dimension("mha_cross", "batch axis mismatch".to_string()));
        }
        if sq[2] != sk[2] || sq[2] != sv[2] {
            return Err(Error::dimension("mha_cross", "channel axis mismatch".to_string()));
        }
        if sk[1] != sv[1] {
            return Err(Error::dimension("mha_cross", "key/value length mismatch".to_string()));
        }
        let (n, lq, c) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::contract(
                "mha_cross",
                format!("channel count {} not divisible by {} heads", c, heads),
            ));
        }
        let d = c / heads;
        let scale = 1.0 / (d as Real).sqrt();

        let vq = self.nodes[iq].value.data();
        let vk = self.nodes[ik].value.data();
        let vv = self.nodes[iv].value.data();
        let mut out = vec![0.0; n * lq * c];
        let mut probs = vec![0.0; n * heads * lq * lk];
        let mut qh = vec![0.0; lq * d];
        let mut kh = vec![0.0; lk * d];
        let mut vh = vec![0.0; lk * d];
        let mut oh = vec![0.0; lq * d];
        for b in 0..n {
            let qb = &vq[b * lq * c..(b + 1) * lq * c];
            let kb = &vk[b * lk * c..(b + 1) * lk * c];
            let vb = &vv[b * lk * c..(b + 1) * lk * c];
            for h in 0..heads {
                gather_head(qb, lq, c, h, d, &mut qh);
                gather_head(kb, lk, c, h, d, &mut kh);
                gather_head(vb, lk, c, h, d, &mut vh);
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                // scores = scale * qh [lq,d] * kh^T [d,lk]
                gemm_strided(
                    lq, d, lk, scale, &qh, d as isize, 1, &kh, 1, d as isize, 0.0, p,
                    lk as isize, 1,
                );
                for row in p.chunks_mut(lk) {
                    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                // oh = p [lq,lk] * vh [lk,d]
                gemm_strided(
                    lq, lk, d, 1.0, p, lk as isize, 1, &vh, d as isize, 1, 0.0, &mut oh,
                    d as isize, 1,
                );
                let ob = &mut out[b * lq * c..(b + 1) * lq * c];
                for row in 0..lq {
                    ob[row * c + h * d..row * c + (h + 1) * d]
                        .copy_from_slice(&oh[row * d..(row + 1) * d]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, lq, c], out)?;
        let rg = self.requires(iq) || self.requires(ik) || self.requires(iv);
        Ok(self.push(value, Op::MhaCross { q: iq, k: ik, v: iv, heads, probs }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_backward(
    g: &Graph,
    iq: usize,
    ik: usize,
    iv: usize,
    heads: usize,
    probs: &[Real],
    gout: &[Real],
    store: &mut GradStore,
) -> Result<()> {
    let sq = g.nodes[iq].value.shape().to_vec();
    let sk = g.nodes[ik].value.shape().to_vec();
    let (n, lq, c) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    let d = c / heads;
    let scale = 1.0 / (d as Real).sqrt();
    let vq = g.nodes[iq].value.data();
    let vk = g.nodes[ik].value.data();
    let vv = g.nodes[iv].value.data();

    let need_q = g.requires(iq);
    let need_k = g.requires(ik);
    let need_v = g.requires(iv);
    let mut dq = if need_q { vec![0.0; n * lq * c] } else { Vec::new() };
    let mut dk = if need_k { vec![0.0; n * lk * c] } else { Vec::new() };
    let mut dv = if need_v { vec![0.0; n * lk * c] } else { Vec::new() };

    let mut qh = vec![0.0; lq * d];
    let mut kh = vec![0.0; lk * d];
    let mut vh = vec![0.0; lk * d];
    let mut goh = vec![0.0; lq * d];
    let mut dp = vec![0.0; lq * lk];
    let mut ds = vec![0.0; lq * lk];
    let mut tmp = vec![0.0; lq.max(lk) * d];

    for b in 0..n {
        let qb = &vq[b * lq * c..(b + 1) * lq * c];
        let kb = &vk[b * lk * c..(b + 1) * lk * c];
        let vb = &vv[b * lk * c..(b + 1) * lk * c];
        let gob = &gout[b * lq * c..(b + 1) * lq * c];
        for h in 0..heads {
            gather_head(qb, lq, c, h, d, &mut qh);
            gather_head(kb, lk, c, h, d, &mut kh);
            gather_head(vb, lk, c, h, d, &mut vh);
            gather_head(gob, lq, c, h, d, &mut goh);
            let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];

            if need_v {
                // dv_h = p^T [lk,lq] * go [lq,d]
                let t = &mut tmp[..lk * d];
                gemm_strided(lk, lq, d, 1.0, p, 1, lk as isize, &goh, d as isize, 1, 0.0, t, d as isize, 1);
                scatter_head_add(&mut dv[b * lk * c..(b + 1) * lk * c], lk, c, h, d, t);
            }
            if need_q || need_k {
                // dp = go [lq,d] * v^T [d,lk]
                gemm_strided(
                    lq, d, lk, 1.0, &goh, d as isize, 1, &vh, 1, d as isize, 0.0, &mut dp,
                    lk as isize, 1,
                );
                // ds = p .* (dp - rowsum(dp .* p))
                for r in 0..lq {
                    let pr = &p[r * lk..(r + 1) * lk];
                    let dpr = &dp[r * lk..(r + 1) * lk];
                    let dot: Real = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for cidx in 0..lk {
                        ds[r * lk + cidx] = pr[cidx] * (dpr[cidx] - dot);
                    }
                }
                if need_q {
                    // dq_h = scale * ds [lq,lk] * k [lk,d]
                    let t = &mut tmp[..lq * d];
                    gemm_strided(
                        lq, lk, d, scale, &ds, lk as isize, 1, &kh, d as isize, 1, 0.0, t,
                        d as isize, 1,
                    );
                    scatter_head_add(&mut dq[b * lq * c..(b + 1) * lq * c], lq, c, h, d, t);
                }
                if need_k {
                    // dk_h = scale * ds^T [lk,lq] * q [lq,d]
                    let t = &mut tmp[..lk * d];
                    gemm_strided(
                        lk, lq, d, scale, &ds, 1, lk as isize, &qh, d as isize, 1, 0.0, t,
                        d as isize, 1,
                    );
                    scatter_head_add(&mut dk[b * lk * c..(b + 1) * lk * c], lk, c, h, d, t);
                }
            }
        }
    }
    if need_q {
        store.accumulate(iq, dq);
    }
    if need_k {
        store.accumulate(ik, dk);
    }
    if need_v {
        store.accumulate(iv, dv);
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
    fn single_key_attention_passes_value_through() {
        // With one key the softmax is exactly 1 and the output equals v.
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[2, 5, 8], &mut rng));
        let k = g.constant(Tensor::randn(&[2, 1, 8], &mut rng));
        let vt = Tensor::randn(&[2, 1, 8], &mut rng);
        let v = g.constant(vt.clone());
        let out = g.mha_cross(q, k, v, 4).unwrap();
        let ov = g.value(out).unwrap();
        for b in 0..2 {
            for row in 0..5 {
                for ch in 0..8 {
                    let got = ov.data()[(b * 5 + row) * 8 + ch];
                    let want = vt.data()[b * 8 + ch];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rows_of_attention_are_convex_combinations() {
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[1, 4, 6], &mut rng));
        let k = g.constant(Tensor::randn(&[1, 7, 6], &mut rng));
        let v = g.constant(Tensor::full(&[1, 7, 6], 3.25));
        let out = g.mha_cross(q, k, v, 2).unwrap();
        for &val in g.value(out).unwrap().data() {
            assert!((val - 3.25).abs() < 1e-9, "convex combo of constant values");
        }
    }

    #[test]
    fn head_count_must_divide_channels() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 6]));
        let k = g.constant(Tensor::zeros(&[1, 3, 6]));
        let v = g.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(g.mha_cross(q, k, v, 4).is_err());
    }

    #[test]
    fn brute_force_reference_matches() {
        // Independent loop implementation of the same attention.
        let mut rng = Rng::new(7);
        let (n, lq, lk, c, heads) = (2, 3, 5, 8, 2);
        let d = c / heads;
        let qt = Tensor::randn(&[n, lq, c], &mut rng);
        let kt = Tensor::randn(&[n, lk, c], &mut rng);
        let vt = Tensor::randn(&[n, lk, c], &mut rng);
        let mut g = Graph::new();
        let q = g.constant(qt.clone());
        let k = g.constant(kt.clone());
        let v = g.constant(vt.clone());
        let out = g.mha_cross(q, k, v, heads).unwrap();
        let got = g.value(out).unwrap();

        let scale = 1.0 / (d as Real).sqrt();
        for b in 0..n {
            for h in 0..heads {
                for i in 0..lq {
                    let mut weights = vec![0.0; lk];
                    for (j, wj) in weights.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for e in 0..d {
                            s += qt.data()[(b * lq + i) * c + h * d + e]
                                * kt.data()[(b * lk + j) * c + h * d + e];
                        }
                        *wj = s * scale;
                    }
                    let max = weights.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                    let mut sum = 0.0;
                    for wv in weights.iter_mut() {
                        *wv = (*wv - max).exp();
                        sum += *wv;
                    }
                    for e in 0..d {
                        let mut o = 0.0;
                        for j in 0..lk {
                            o += weights[j] / sum * vt.data()[(b * lk + j) * c + h * d + e];
                        }
                        let gv = got.data()[(b * lq + i) * c + h * d + e];
                        assert!((gv - o).abs() < 1e-9, "{gv} vs {o}");
                    }
                }
            }
        }
    }
}
