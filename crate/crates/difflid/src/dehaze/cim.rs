//! Content integration: cross-attention from restoration features to the
//! denoiser's bottleneck features,
//! F' = W_O · Softmax(Q Kᵀ / scale) · V + F
//! with Q projected from F and K, V projected from a 1x1-compressed h.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dLayer, Graph, Parameter, Rng, Var};

/// Cross-attention block fusing bottleneck features into spatial features.
#[derive(Debug)]
pub struct ContentIntegration {
    /// 1x1 compression of h from its native channels to the block width.
    w_c: Conv2dLayer,
    w_q: Conv2dLayer,
    w_k: Conv2dLayer,
    w_v: Conv2dLayer,
    /// Zero-initialized output projection: the block starts as the identity.
    w_o: Conv2dLayer,
    heads: usize,
    width: usize,
    h_channels: usize,
}

impl ContentIntegration {
    pub fn new(
        name: &str,
        width: usize,
        h_channels: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: {heads} heads must divide the block width {width}"
            )));
        }
        Ok(ContentIntegration {
            w_c: Conv2dLayer::new(&format!("{name}.w_c"), h_channels, width, 1, 1, 0, rng),
            w_q: Conv2dLayer::new(&format!("{name}.w_q"), width, width, 1, 1, 0, rng),
            w_k: Conv2dLayer::new(&format!("{name}.w_k"), width, width, 1, 1, 0, rng),
            w_v: Conv2dLayer::new(&format!("{name}.w_v"), width, width, 1, 1, 0, rng),
            w_o: Conv2dLayer::new_zero(&format!("{name}.w_o"), width, width, 1, 1, 0),
            heads,
            width,
            h_channels,
        })
    }

    /// f: [n, width, fh, fw]; h: [n, h_channels, h', w'] -> same shape as f.
    pub fn forward(&self, g: &mut Graph, f: Var, h: Var) -> Result<Var> {
        let fs = g.value(f)?.shape().to_vec();
        let hs = g.value(h)?.shape().to_vec();
        if fs.len() != 4 || fs[1] != self.width {
            return Err(Error::dimension(
                "cim::forward",
                format!("feature must be [n,{},h,w], got {:?}", self.width, fs),
            ));
        }
        if hs.len() != 4 || hs[1] != self.h_channels || hs[0] != fs[0] {
            return Err(Error::dimension(
                "cim::forward",
                format!(
                    "h must be [{},{},h',w'], got {:?}",
                    fs[0], self.h_channels, hs
                ),
            ));
        }
        let (n, c, fh, fw) = (fs[0], fs[1], fs[2], fs[3]);
        let (hh, hw) = (hs[2], hs[3]);
        let hc = self.w_c.forward(g, h)?;
        let q = self.w_q.forward(g, f)?;
        let k = self.w_k.forward(g, hc)?;
        let v = self.w_v.forward(g, hc)?;
        // [n,c,h,w] -> [n, positions, c] token layout for attention.
        let tokens = |g: &mut Graph, x: Var, hh: usize, ww: usize| -> Result<Var> {
            let flat = g.reshape(x, &[n, c, hh * ww])?;
            g.permute(flat, &[0, 2, 1])
        };
        let q = tokens(g, q, fh, fw)?;
        let k = tokens(g, k, hh, hw)?;
        let v = tokens(g, v, hh, hw)?;
        let attended = g.mha_cross(q, k, v, self.heads)?;
        let back = g.permute(attended, &[0, 2, 1])?;
        let spatial = g.reshape(back, &[n, c, fh, fw])?;
        let projected = self.w_o.forward(g, spatial)?;
        g.add(projected, f)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.w_c.params();
        out.extend(self.w_q.params());
        out.extend(self.w_k.params());
        out.extend(self.w_v.params());
        out.extend(self.w_o.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.w_c.params_mut();
        out.extend(self.w_q.params_mut());
        out.extend(self.w_k.params_mut());
        out.extend(self.w_v.params_mut());
        out.extend(self.w_o.params_mut());
        out
    }
}

/// Parameter-matched self-attention used when content integration is ablated:
/// the same attention layout, but keys and values come from F itself. The
/// inner width is padded so the parameter count matches the replaced block.
#[derive(Debug)]
pub struct SelfAttention {
    w_q: Conv2dLayer,
    w_k: Conv2dLayer,
    w_v: Conv2dLayer,
    w_o: Conv2dLayer,
    inner: usize,
    width: usize,
}

impl SelfAttention {
    pub fn new(name: &str, width: usize, h_channels: usize, rng: &mut Rng) -> Self {
        // ContentIntegration spends (h_channels + 4·width)·width weights on
        // its five projections; matching that with four width->inner
        // projections needs inner = width + h_channels/4.
        let inner = width + h_channels.div_ceil(4);
        SelfAttention {
            w_q: Conv2dLayer::new(&format!("{name}.w_q"), width, inner, 1, 1, 0, rng),
            w_k: Conv2dLayer::new(&format!("{name}.w_k"), width, inner, 1, 1, 0, rng),
            w_v: Conv2dLayer::new(&format!("{name}.w_v"), width, inner, 1, 1, 0, rng),
            w_o: Conv2dLayer::new_zero(&format!("{name}.w_o"), inner, width, 1, 1, 0),
            inner,
            width,
        }
    }

    /// f: [n, width, fh, fw] -> same shape; h is ignored by construction.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let fs = g.value(f)?.shape().to_vec();
        if fs.len() != 4 || fs[1] != self.width {
            return Err(Error::dimension(
                "self_attention::forward",
                format!("feature must be [n,{},h,w], got {:?}", self.width, fs),
            ));
        }
        let (n, fh, fw) = (fs[0], fs[2], fs[3]);
        let q = self.w_q.forward(g, f)?;
        let k = self.w_k.forward(g, f)?;
        let v = self.w_v.forward(g, f)?;
        let tokens = |g: &mut Graph, x: Var| -> Result<Var> {
            let flat = g.reshape(x, &[n, self.inner, fh * fw])?;
            g.permute(flat, &[0, 2, 1])
        };
        let q = tokens(g, q)?;
        let k = tokens(g, k)?;
        let v = tokens(g, v)?;
        let attended = g.mha_cross(q, k, v, 1)?;
        let back = g.permute(attended, &[0, 2, 1])?;
        let spatial = g.reshape(back, &[n, self.inner, fh, fw])?;
        let projected = self.w_o.forward(g, spatial)?;
        g.add(projected, f)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.w_q.params();
        out.extend(self.w_k.params());
        out.extend(self.w_v.params());
        out.extend(self.w_o.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.w_q.params_mut();
        out.extend(self.w_k.params_mut());
        out.extend(self.w_v.params_mut());
        out.extend(self.w_o.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::Real;

    fn values(g: &Graph, v: Var) -> Vec<Real> {
        g.value(v).unwrap().data().to_vec()
    }

    #[test]
    fn zero_output_projection_makes_the_block_an_exact_identity() {
        let mut rng = Rng::new(1);
        let cim = ContentIntegration::new("cim", 8, 6, 2, &mut rng).unwrap();
        let f = Tensor::randn(&[2, 8, 4, 4], &mut rng);
        let h = Tensor::randn(&[2, 6, 2, 2], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let hv = g.constant(h);
        let out = cim.forward(&mut g, fv, hv).unwrap();
        assert_eq!(g.value(out).unwrap().data(), f.data());
    }

    #[test]
    fn single_key_attention_collapses_to_a_broadcast_value() {
        let mut rng = Rng::new(2);
        let mut cim = ContentIntegration::new("cim", 8, 6, 2, &mut rng).unwrap();
        // Give the output projection real weights so the test sees attention.
        for p in cim.params_mut() {
            if p.name.contains("w_o.weight") {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::randn(&shape, &mut Rng::new(77));
            }
        }
        let f = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let h = Tensor::randn(&[1, 6, 1, 1], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let hv = g.constant(h.clone());
        let out = cim.forward(&mut g, fv, hv).unwrap();
        // With one key, softmax weights are exactly 1, so every query gets
        // W_V·W_c·h; the output is W_O applied to that constant, plus F.
        let hv2 = g.constant(h);
        let hc = cim.w_c.forward(&mut g, hv2).unwrap();
        let val = cim.w_v.forward(&mut g, hc).unwrap();
        let val = values(&g, val); // [1, 8, 1, 1]
        let w_o = cim.w_o.weight.value.clone();
        let b_o = cim.w_o.bias.value.clone();
        let got = values(&g, out);
        for pos in 0..16 {
            for c_out in 0..8 {
                let mut exp = b_o.data()[c_out];
                for c_in in 0..8 {
                    exp += w_o.data()[c_out * 8 + c_in] * val[c_in];
                }
                exp += f.data()[c_out * 16 + pos];
                let idx = c_out * 16 + pos;
                assert!((got[idx] - exp).abs() < 1e-9, "pos {pos} ch {c_out}");
            }
        }
    }

    #[test]
    fn matches_brute_force_dense_attention_on_random_instances() {
        for inst in 0..20 {
            let mut rng = Rng::new(100 + inst);
            let mut cim = ContentIntegration::new("cim", 8, 6, 2, &mut rng).unwrap();
            for p in cim.params_mut() {
                if p.name.contains("w_o.weight") {
                    let shape = p.value.shape().to_vec();
                    p.value = Tensor::randn(&shape, &mut Rng::new(500 + inst));
                }
            }
            let f = Tensor::randn(&[1, 8, 4, 4], &mut rng);
            let h = Tensor::randn(&[1, 6, 2, 2], &mut rng);
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let hv = g.constant(h.clone());
            let out = cim.forward(&mut g, fv, hv).unwrap();
            let got = values(&g, out);

            // Brute force: explicit 1x1 convs, then per-head dense attention
            // with a (16 x 4) score matrix.
            let conv1x1 = |w: &Tensor, b: &Tensor, x: &Tensor| -> Vec<Real> {
                let (ci, hh, ww) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let co = w.shape()[0];
                let mut out = vec![0.0; co * hh * ww];
                for o in 0..co {
                    for p in 0..hh * ww {
                        let mut acc = b.data()[o];
                        for i in 0..ci {
                            acc += w.data()[o * ci + i] * x.data()[i * hh * ww + p];
                        }
                        out[o * hh * ww + p] = acc;
                    }
                }
                out
            };
            let hc_flat = conv1x1(&cim.w_c.weight.value, &cim.w_c.bias.value, &h);
            let hc = Tensor::from_vec(&[1, 8, 2, 2], hc_flat).unwrap();
            let qf = conv1x1(&cim.w_q.weight.value, &cim.w_q.bias.value, &f);
            let kf = conv1x1(&cim.w_k.weight.value, &cim.w_k.bias.value, &hc);
            let vf = conv1x1(&cim.w_v.weight.value, &cim.w_v.bias.value, &hc);
            // Tokens: q[pos][c] with pos over 16, c over 8; k,v over 4 keys.
            let (lq, lk, c) = (16usize, 4usize, 8usize);
            let heads = 2;
            let hd = c / heads;
            let mut attended = vec![0.0; lq * c];
            for head in 0..heads {
                for i in 0..lq {
                    let mut scores = vec![0.0; lk];
                    for j in 0..lk {
                        let mut dot = 0.0;
                        for d in 0..hd {
                            let ch = head * hd + d;
                            dot += qf[ch * lq + i] * kf[ch * lk + j];
                        }
                        scores[j] = dot / (hd as Real).sqrt();
                    }
                    let m = scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                    let exps: Vec<Real> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: Real = exps.iter().sum();
                    for d in 0..hd {
                        let ch = head * hd + d;
                        let mut acc = 0.0;
                        for j in 0..lk {
                            acc += exps[j] / z * vf[ch * lk + j];
                        }
                        attended[i * c + ch] = acc;
                    }
                }
            }
            // Output projection + residual.
            let wo = &cim.w_o.weight.value;
            let bo = &cim.w_o.bias.value;
            for pos in 0..lq {
                for o in 0..c {
                    let mut acc = bo.data()[o];
                    for i in 0..c {
                        acc += wo.data()[o * c + i] * attended[pos * c + i];
                    }
                    acc += f.data()[o * lq + pos];
                    let diff = (got[o * lq + pos] - acc).abs();
                    assert!(diff < 1e-6, "instance {inst} pos {pos} ch {o}: diff {diff}");
                }
            }
        }
    }

    #[test]
    fn head_divisibility_is_a_config_error() {
        let mut rng = Rng::new(1);
        let err = ContentIntegration::new("cim", 8, 6, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn self_attention_is_identity_at_init_and_matches_cim_parameter_count() {
        let mut rng = Rng::new(1);
        let width = 32;
        let h_channels = 64;
        let cim = ContentIntegration::new("a", width, h_channels, 4, &mut rng).unwrap();
        let sa = SelfAttention::new("b", width, h_channels, &mut rng);
        let count = |ps: &[&Parameter]| ps.iter().map(|p| p.value.numel()).sum::<usize>();
        let (nc, ns) = (count(&cim.params()), count(&sa.params()));
        let rel = (nc as Real - ns as Real).abs() / nc as Real;
        assert!(rel < 0.05, "cim {nc} vs self-attention {ns}");
        let f = Tensor::randn(&[2, width, 4, 4], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let out = sa.forward(&mut g, fv).unwrap();
        assert_eq!(g.value(out).unwrap().data(), f.data());
    }
}
