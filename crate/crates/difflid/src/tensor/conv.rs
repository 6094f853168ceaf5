//! Spatial ops: 2-D convolution via im2col plus gemm, and resampling.

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::graph::{GradStore, Graph, Op, Var};
use super::ops::gemm_strided;

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather conv patches: col[(c*kh+dy)*kw+dx, oy*ow+ox] = x[c, oy*s+dy-p, ox*s+dx-p].
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [Real],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let l = oh * ow;
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let out_base = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        col[out_base..out_base + ow].fill(0.0);
                        continue;
                    }
                    let in_row = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        col[out_base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xc[in_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns back into image layout (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[Real],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [Real],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let l = oh * ow;
    for c in 0..c_in {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xc[in_row + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution, NCHW layout, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ix = self.check(x, "conv2d")?;
        let iw = self.check(w, "conv2d")?;
        let ib = b.map(|bv| self.check(bv, "conv2d")).transpose()?;
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be >= 1"));
        }
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::dimension("conv2d", format!("input must be rank 4, got {:?}", sx)));
        }
        if sw.len() != 4 {
            return Err(Error::dimension("conv2d", format!("kernel must be rank 4, got {:?}", sw)));
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kc != c_in {
            return Err(Error::dimension(
                "conv2d",
                format!("channel axis: input has {}, kernel expects {}", c_in, kc),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dimension(
                "conv2d",
                format!("spatial axes {}x{} too small for {}x{} kernel with pad {}", h, wd, kh, kw, pad),
            ));
        }
        if let Some(ibv) = ib {
            let sb = self.nodes[ibv].value.shape();
            if sb != [c_out] {
                return Err(Error::dimension(
                    "conv2d",
                    format!("bias axis: expected [{}], got {:?}", c_out, sb),
                ));
            }
        }
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);
        let l = oh * ow;
        let ck = c_in * kh * kw;
        let vx = self.nodes[ix].value.data();
        let vw = self.nodes[iw].value.data();
        let mut out = vec![0.0; n * c_out * l];
        let mut col = vec![0.0; ck * l];
        for i in 0..n {
            im2col(&vx[i * c_in * h * wd..], c_in, h, wd, kh, kw, stride, pad, &mut col);
            gemm_strided(
                c_out,
                ck,
                l,
                1.0,
                vw,
                ck as isize,
                1,
                &col,
                l as isize,
                1,
                0.0,
                &mut out[i * c_out * l..(i + 1) * c_out * l],
                l as isize,
                1,
            );
        }
        if let Some(ibv) = ib {
            let vb = self.nodes[ibv].value.data();
            for i in 0..n {
                for co in 0..c_out {
                    let bias = vb[co];
                    let base = (i * c_out + co) * l;
                    for p in 0..l {
                        out[base + p] += bias;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c_out, oh, ow], out)?;
        let rg = self.requires(ix)
            || self.requires(iw)
            || ib.map(|v| self.requires(v)).unwrap_or(false);
        Ok(self.push(value, Op::Conv2d { x: ix, w: iw, b: ib, stride, pad }, rg))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "upsample_nearest_2x")?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dimension(
                "upsample_nearest_2x",
                format!("input must be rank 4, got {:?}", s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * 2, w * 2);
        let vx = self.nodes[ix].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n * c {
            let ibase = i * h * w;
            let obase = i * oh * ow;
            for y in 0..oh {
                let src_row = ibase + (y / 2) * w;
                for xq in 0..ow {
                    out[obase + y * ow + xq] = vx[src_row + xq / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::UpsampleNearest2x(ix), rg))
    }

    /// Nearest-neighbor resize to an arbitrary spatial size.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let ix = self.check(x, "resize_nearest")?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dimension(
                "resize_nearest",
                format!("input must be rank 4, got {:?}", s),
            ));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::contract("resize_nearest", "target size must be positive"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let vx = self.nodes[ix].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n * c {
            let ibase = i * h * w;
            let obase = i * oh * ow;
            for y in 0..oh {
                let sy = y * h / oh;
                for xq in 0..ow {
                    let sx = xq * w / ow;
                    out[obase + y * ow + xq] = vx[ibase + sy * w + sx];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::ResizeNearest(ix), rg))
    }

    /// Bilinear resize with half-pixel centers, edges clamped.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let ix = self.check(x, "resize_bilinear")?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dimension(
                "resize_bilinear",
                format!("input must be rank 4, got {:?}", s),
            ));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::contract("resize_bilinear", "target size must be positive"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let vx = self.nodes[ix].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n * c {
            let ibase = i * h * w;
            let obase = i * oh * ow;
            for y in 0..oh {
                let (y0, y1, fy) = bilinear_axis(y, h, oh);
                for xq in 0..ow {
                    let (x0, x1, fx) = bilinear_axis(xq, w, ow);
                    let v00 = vx[ibase + y0 * w + x0];
                    let v01 = vx[ibase + y0 * w + x1];
                    let v10 = vx[ibase + y1 * w + x0];
                    let v11 = vx[ibase + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[obase + y * ow + xq] = top + (bot - top) * fy;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::ResizeBilinear(ix), rg))
    }
}

/// Source interval and fraction for one output coordinate (half-pixel rule).
fn bilinear_axis(o: usize, in_len: usize, out_len: usize) -> (usize, usize, Real) {
    let scale = in_len as Real / out_len as Real;
    let src = ((o as Real + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as Real)
}

pub(crate) fn bilinear_backward(in_shape: &[usize], out_shape: &[usize], gout: &[Real]) -> Vec<Real> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut dx = vec![0.0; n * c * h * w];
    for i in 0..n * c {
        let ibase = i * h * w;
        let obase = i * oh * ow;
        for y in 0..oh {
            let (y0, y1, fy) = bilinear_axis(y, h, oh);
            for xq in 0..ow {
                let (x0, x1, fx) = bilinear_axis(xq, w, ow);
                let g = gout[obase + y * ow + xq];
                dx[ibase + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dx[ibase + y0 * w + x1] += g * (1.0 - fy) * fx;
                dx[ibase + y1 * w + x0] += g * fy * (1.0 - fx);
                dx[ibase + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &Graph,
    out_idx: usize,
    ix: usize,
    iw: usize,
    ib: Option<usize>,
    stride: usize,
    pad: usize,
    gout: &[Real],
    store: &mut GradStore,
) -> Result<()> {
    let sx = g.nodes[ix].value.shape().to_vec();
    let sw = g.nodes[iw].value.shape().to_vec();
    let so = g.nodes[out_idx].value.shape().to_vec();
    let (n, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let (c_out, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let l = so[2] * so[3];
    let ck = c_in * kh * kw;
    let vx = g.nodes[ix].value.data();
    let vw = g.nodes[iw].value.data();

    let need_x = g.requires(ix);
    let need_w = g.requires(iw);
    let mut dx = if need_x { vec![0.0; n * c_in * h * w] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0; c_out * ck] } else { Vec::new() };
    let mut col = vec![0.0; ck * l];
    let mut dcol = if need_x { vec![0.0; ck * l] } else { Vec::new() };

    for i in 0..n {
        let gslice = &gout[i * c_out * l..(i + 1) * c_out * l];
        if need_w {
            im2col(&vx[i * c_in * h * w..], c_in, h, w, kh, kw, stride, pad, &mut col);
            // dw += g [c_out, l] * col^T [l, ck]
            gemm_strided(
                c_out, l, ck, 1.0, gslice, l as isize, 1, &col, 1, l as isize, 1.0, &mut dw,
                ck as isize, 1,
            );
        }
        if need_x {
            // dcol = w^T [ck, c_out] * g [c_out, l]
            gemm_strided(
                ck, c_out, l, 1.0, vw, 1, ck as isize, gslice, l as isize, 1, 0.0, &mut dcol,
                l as isize, 1,
            );
            col2im(&dcol, c_in, h, w, kh, kw, stride, pad, &mut dx[i * c_in * h * w..(i + 1) * c_in * h * w]);
        }
    }
    if need_x {
        store.accumulate(ix, dx);
    }
    if need_w {
        store.accumulate(iw, dw);
    }
    if let Some(ibv) = ib {
        if g.requires(ibv) {
            let mut db = vec![0.0; c_out];
            for i in 0..n {
                for co in 0..c_out {
                    let base = (i * c_out + co) * l;
                    db[co] += gout[base..base + l].iter().sum::<Real>();
                }
            }
            store.accumulate(ibv, db);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::core::Tensor;
    use super::super::graph::Graph;
    use crate::Real;

    #[test]
    fn valid_conv_matches_hand_value() {
        // [[1,2],[3,4]] with identity-diagonal kernel [[1,0],[0,1]]: 1*1 + 4*1 = 5
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let v = g.value(y).unwrap();
        assert_eq!(v.shape(), &[1, 1, 1, 1]);
        assert_eq!(v.data(), &[5.0]);
    }

    #[test]
    fn same_padding_preserves_size_and_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<Real> = (0..16).map(|v| v as Real * 0.25).collect();
        let x = g.constant(Tensor::from_vec(&[1, 1, 4, 4], data.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::from_vec(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y).unwrap();
        assert_eq!(v.shape(), &[1, 1, 4, 4]);
        for (a, b) in v.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel axis"), "{msg}");
    }

    #[test]
    fn upsample_then_resize_back() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = g.upsample_nearest_2x(x).unwrap();
        assert_eq!(g.value(up).unwrap().shape(), &[1, 1, 4, 4]);
        assert_eq!(g.value(up).unwrap().at4(0, 0, 1, 1), 1.0);
        assert_eq!(g.value(up).unwrap().at4(0, 0, 2, 3), 4.0);
        let down = g.resize_nearest(up, 2, 2).unwrap();
        assert_eq!(g.value(down).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let y = g.resize_bilinear(x, 5, 7).unwrap();
        for &v in g.value(y).unwrap().data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
