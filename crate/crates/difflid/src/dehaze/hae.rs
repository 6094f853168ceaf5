//! Haze-aware enhancement: spatial feature modulation driven by bottleneck
//! features, followed by a channel gate.
//!   F'_m = (W_γ h) · F' + (W_β h)        (maps resized to F's spatial size)
//!   F_o  = σ(W_L · AvgPool(F'_m)) · F'_m + F'

use crate::error::{Error, Result};
use crate::tensor::{Conv2dLayer, Graph, Linear, Parameter, Rng, Var};

/// Modulation block. The 1x1 projections that produce the scale and shift
/// maps start at zero, making the block an exact identity at initialization.
#[derive(Debug)]
pub struct HazeAwareEnhancement {
    w_gamma: Conv2dLayer,
    w_beta: Conv2dLayer,
    w_l: Linear,
    width: usize,
    h_channels: usize,
}

impl HazeAwareEnhancement {
    pub fn new(name: &str, width: usize, h_channels: usize, rng: &mut Rng) -> Self {
        HazeAwareEnhancement {
            w_gamma: Conv2dLayer::new_zero(&format!("{name}.w_gamma"), h_channels, width, 1, 1, 0),
            w_beta: Conv2dLayer::new_zero(&format!("{name}.w_beta"), h_channels, width, 1, 1, 0),
            w_l: Linear::new(&format!("{name}.w_l"), width, width, rng),
            width,
            h_channels,
        }
    }

    /// f: [n, width, fh, fw]; h: [n, h_channels, h', w'] -> shape of f.
    pub fn forward(&self, g: &mut Graph, f: Var, h: Var) -> Result<Var> {
        let fs = g.value(f)?.shape().to_vec();
        let hs = g.value(h)?.shape().to_vec();
        if fs.len() != 4 || fs[1] != self.width {
            return Err(Error::dimension(
                "hae::forward",
                format!("feature must be [n,{},h,w], got {:?}", self.width, fs),
            ));
        }
        if hs.len() != 4 || hs[1] != self.h_channels || hs[0] != fs[0] {
            return Err(Error::dimension(
                "hae::forward",
                format!("h must be [{},{},h',w'], got {:?}", fs[0], self.h_channels, hs),
            ));
        }
        let (fh, fw) = (fs[2], fs[3]);
        let gamma = self.w_gamma.forward(g, h)?;
        let gamma = g.resize_nearest(gamma, fh, fw)?;
        let beta = self.w_beta.forward(g, h)?;
        let beta = g.resize_nearest(beta, fh, fw)?;
        let scaled = g.mul(gamma, f)?;
        let modulated = g.add(scaled, beta)?;
        let pooled = g.global_avg_pool(modulated)?;
        let gate = self.w_l.forward(g, pooled)?;
        let gate = g.sigmoid(gate)?;
        let gated = g.mul_channel_map(modulated, gate)?;
        g.add(gated, f)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.w_gamma.params();
        out.extend(self.w_beta.params());
        out.extend(self.w_l.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.w_gamma.params_mut();
        out.extend(self.w_beta.params_mut());
        out.extend(self.w_l.params_mut());
        out
    }
}

/// Parameter-matched channel-attention block used when haze-aware
/// enhancement is ablated: a squeeze-and-excite gate on F itself, with no h
/// input. The hidden width is sized to match the replaced block's parameter
/// count; the gate projection starts at zero with a strongly negative bias,
/// so the block starts close to the identity.
#[derive(Debug)]
pub struct ChannelAttention {
    down: Linear,
    up: Linear,
    width: usize,
}

impl ChannelAttention {
    pub fn new(name: &str, width: usize, h_channels: usize, rng: &mut Rng) -> Self {
        // HazeAwareEnhancement holds 2·h_channels·width + width² weights;
        // two linear layers of hidden size h_channels + width/2 match it.
        let hidden = h_channels + width.div_ceil(2);
        let mut up = Linear::new(&format!("{name}.up"), hidden, width, rng);
        {
            let w = up.weight.value.shape().to_vec();
            up.weight.value = crate::tensor::Tensor::zeros(&w);
            let b = up.bias.value.numel();
            up.bias.value = crate::tensor::Tensor::full(&[b], -4.0);
        }
        ChannelAttention { down: Linear::new(&format!("{name}.down"), width, hidden, rng), up, width }
    }

    /// f: [n, width, fh, fw] -> shape of f.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let fs = g.value(f)?.shape().to_vec();
        if fs.len() != 4 || fs[1] != self.width {
            return Err(Error::dimension(
                "channel_attention::forward",
                format!("feature must be [n,{},h,w], got {:?}", self.width, fs),
            ));
        }
        let pooled = g.global_avg_pool(f)?;
        let hid = self.down.forward(g, pooled)?;
        let hid = g.silu(hid)?;
        let gate = self.up.forward(g, hid)?;
        let gate = g.sigmoid(gate)?;
        let gated = g.mul_channel_map(f, gate)?;
        g.add(gated, f)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.down.params();
        out.extend(self.up.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.down.params_mut();
        out.extend(self.up.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};
    use crate::Real;

    /// Set the scale map to produce exactly `gamma0` everywhere and the shift
    /// map zero, by writing the conv biases.
    fn set_constant_maps(hae: &mut HazeAwareEnhancement, gamma0: Real) {
        let n = hae.w_gamma.bias.value.numel();
        hae.w_gamma.bias.value = Tensor::full(&[n], gamma0);
    }

    /// Zero the channel-gate linear layer so sigma(0) = 0.5 exactly.
    fn zero_gate(hae: &mut HazeAwareEnhancement) {
        let ws = hae.w_l.weight.value.shape().to_vec();
        hae.w_l.weight.value = Tensor::zeros(&ws);
        let bs = hae.w_l.bias.value.shape().to_vec();
        hae.w_l.bias.value = Tensor::zeros(&bs);
    }

    #[test]
    fn zero_modulation_with_zero_gate_layer_is_identity() {
        // W_γh == 0 and W_βh == 0 give F'_m = 0; with W_L = 0 the gate is
        // 0.5 but multiplies zero, so the output is exactly F'.
        let mut rng = Rng::new(3);
        let mut hae = HazeAwareEnhancement::new("hae", 8, 6, &mut rng);
        zero_gate(&mut hae);
        let f = Tensor::randn(&[2, 8, 4, 4], &mut rng);
        let h = Tensor::randn(&[2, 6, 2, 2], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let hv = g.constant(h);
        let out = hae.forward(&mut g, fv, hv).unwrap();
        assert_eq!(g.value(out).unwrap().data(), f.data());
    }

    #[test]
    fn unit_scale_zero_shift_zero_gate_gives_one_point_five_f() {
        // W_γh == 1, W_βh == 0, W_L = 0: F'_m = F', gate = 0.5,
        // F_o = 0.5·F' + F' = 1.5·F'.
        let mut rng = Rng::new(4);
        let mut hae = HazeAwareEnhancement::new("hae", 8, 6, &mut rng);
        set_constant_maps(&mut hae, 1.0);
        zero_gate(&mut hae);
        let f = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let h = Tensor::randn(&[1, 6, 2, 2], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let hv = g.constant(h);
        let out = hae.forward(&mut g, fv, hv).unwrap();
        for (got, want) in g.value(out).unwrap().data().iter().zip(f.data()) {
            assert!((got - 1.5 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_an_explicit_loop_reference_on_random_instances() {
        for inst in 0..20 {
            let mut rng = Rng::new(200 + inst);
            let mut hae = HazeAwareEnhancement::new("hae", 4, 6, &mut rng);
            // Give the modulation projections real weights.
            for p in hae.params_mut() {
                if p.name.contains("w_gamma.weight") || p.name.contains("w_beta.weight") {
                    let shape = p.value.shape().to_vec();
                    p.value = Tensor::randn(&shape, &mut Rng::new(300 + inst));
                }
            }
            let f = Tensor::randn(&[1, 4, 4, 4], &mut rng);
            let h = Tensor::randn(&[1, 6, 2, 2], &mut rng);
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let hv = g.constant(h.clone());
            let out = hae.forward(&mut g, fv, hv).unwrap();
            let got = g.value(out).unwrap().data().to_vec();

            // Reference with plain loops.
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
            let gamma_small = conv1x1(&hae.w_gamma.weight.value, &hae.w_gamma.bias.value, &h);
            let beta_small = conv1x1(&hae.w_beta.weight.value, &hae.w_beta.bias.value, &h);
            // Nearest resize 2x2 -> 4x4: source index = floor(o * 2 / 4).
            let resize = |src: &[Real]| -> Vec<Real> {
                let mut out = vec![0.0; 4 * 4 * 4];
                for c in 0..4 {
                    for y in 0..4 {
                        for x in 0..4 {
                            out[c * 16 + y * 4 + x] = src[c * 4 + (y * 2 / 4) * 2 + (x * 2 / 4)];
                        }
                    }
                }
                out
            };
            let gamma = resize(&gamma_small);
            let beta = resize(&beta_small);
            let mut fm = vec![0.0; 4 * 16];
            for i in 0..4 * 16 {
                fm[i] = gamma[i] * f.data()[i] + beta[i];
            }
            // Channel gate.
            let mut gate = vec![0.0; 4];
            for c in 0..4 {
                let mean: Real = fm[c * 16..(c + 1) * 16].iter().sum::<Real>() / 16.0;
                gate[c] = mean;
            }
            let wl = &hae.w_l.weight.value; // layout [in, out]
            let bl = &hae.w_l.bias.value;
            let mut gated = vec![0.0; 4];
            for o in 0..4 {
                let mut acc = bl.data()[o];
                for i in 0..4 {
                    acc += gate[i] * wl.data()[i * 4 + o];
                }
                gated[o] = 1.0 / (1.0 + (-acc).exp());
            }
            for c in 0..4 {
                for p in 0..16 {
                    let want = gated[c] * fm[c * 16 + p] + f.data()[c * 16 + p];
                    let diff = (got[c * 16 + p] - want).abs();
                    assert!(diff < 1e-6, "instance {inst} ch {c} pos {p}: diff {diff}");
                }
            }
        }
    }

    #[test]
    fn gate_values_stay_strictly_inside_zero_one() {
        let mut rng = Rng::new(9);
        let hae = HazeAwareEnhancement::new("hae", 4, 6, &mut rng);
        // Drive the gate directly: sigmoid of any finite input is in (0,1).
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![-50.0, -1.0, 1.0, 50.0]).unwrap());
        let gate_in = hae.w_l.forward(&mut g, x).unwrap();
        let gate = g.sigmoid(gate_in).unwrap();
        for &v in g.value(gate).unwrap().data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn channel_attention_matches_hae_parameters_and_starts_near_identity() {
        let mut rng = Rng::new(5);
        let width = 32;
        let h_channels = 64;
        let hae = HazeAwareEnhancement::new("a", width, h_channels, &mut rng);
        let ca = ChannelAttention::new("b", width, h_channels, &mut rng);
        let count = |ps: &[&Parameter]| ps.iter().map(|p| p.value.numel()).sum::<usize>();
        let (nh, nc) = (count(&hae.params()), count(&ca.params()));
        let rel = (nh as Real - nc as Real).abs() / nh as Real;
        assert!(rel < 0.05, "hae {nh} vs channel attention {nc}");
        let f = Tensor::randn(&[2, width, 4, 4], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let out = ca.forward(&mut g, fv).unwrap();
        let diff = g.value(out).unwrap().mean_abs_diff(&f).unwrap();
        let scale = f.data().iter().map(|v| v.abs()).sum::<Real>() / f.numel() as Real;
        assert!(diff / scale < 0.05, "relative deviation {}", diff / scale);
    }
}
