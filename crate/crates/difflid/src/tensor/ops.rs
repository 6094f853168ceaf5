//! Forward builders for graph operations. Each validates shapes, computes
//! the value eagerly, and records the node for the backward pass. There is
//! no implicit broadcasting; the only shape-mixing ops are the explicit
//! bias/scale map variants.

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::graph::{row_major_strides, Graph, Op, Var};

/// c[m,n] (+)= alpha * a[m,k] * b[k,n] with explicit strides, backed by a
/// blocked gemm kernel. The blocking is fixed, so results are reproducible
/// within one build.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn same_shape(g: &Graph, op: &str, a: usize, b: usize) -> Result<()> {
    let (sa, sb) = (g.nodes[a].value.shape(), g.nodes[b].value.shape());
    if sa != sb {
        return Err(Error::dimension(op, format!("operand shapes {:?} vs {:?}", sa, sb)));
    }
    Ok(())
}

impl Graph {
    fn binary_elementwise(
        &mut self,
        op_name: &str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a, op_name)?;
        let ib = self.check(b, op_name)?;
        same_shape(self, op_name, ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data: Vec<Real> =
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(value, make(ia, ib), rg))
    }

    fn unary_elementwise(
        &mut self,
        op_name: &str,
        x: Var,
        f: impl Fn(Real) -> Real,
        make: impl Fn(usize) -> Op,
    ) -> Result<Var> {
        let ix = self.check(x, op_name)?;
        let vx = &self.nodes[ix].value;
        let value = Tensor::from_vec(vx.shape(), vx.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.requires(ix);
        Ok(self.push(value, make(ix), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Result<Var> {
        self.unary_elementwise("scale", x, |v| v * s, |ix| Op::Scale(ix, s))
    }

    pub fn shift(&mut self, x: Var, c: Real) -> Result<Var> {
        self.unary_elementwise("shift", x, |v| v + c, Op::Shift)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary_elementwise("abs", x, |v| v.abs(), Op::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_elementwise("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary_elementwise("silu", x, |v| v / (1.0 + (-v).exp()), Op::Silu)
    }

    /// Plain 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a, "matmul")?;
        let ib = self.check(b, "matmul")?;
        let (sa, sb) =
            (self.nodes[ia].value.shape().to_vec(), self.nodes[ib].value.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", sa, sb),
            ));
        }
        if sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("inner axis mismatch: {} vs {}", sa[1], sb[0]),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            1.0,
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            n as isize,
            1,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(value, Op::Matmul(ia, ib), rg))
    }

    /// `[n,m] + [m]` row-wise bias.
    pub fn add_bias1d(&mut self, x: Var, b: Var) -> Result<Var> {
        let ix = self.check(x, "add_bias1d")?;
        let ib = self.check(b, "add_bias1d")?;
        let sx = self.nodes[ix].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dimension(
                "add_bias1d",
                format!("expected [n,m] + [m], got {:?} + {:?}", sx, sb),
            ));
        }
        let (n, m) = (sx[0], sx[1]);
        let vx = self.nodes[ix].value.data();
        let vb = self.nodes[ib].value.data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] = vx[r * m + c] + vb[c];
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        let rg = self.requires(ix) || self.requires(ib);
        Ok(self.push(value, Op::AddBias1d { x: ix, b: ib }, rg))
    }

    /// `[n,c,h,w] + [n,c]`, the bias broadcast over space.
    pub fn add_channel_map(&mut self, x: Var, b: Var) -> Result<Var> {
        let ix = self.check(x, "add_channel_map")?;
        let ib = self.check(b, "add_channel_map")?;
        let sx = self.nodes[ix].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        if sx.len() != 4 || sb != [sx[0], sx[1]] {
            return Err(Error::dimension(
                "add_channel_map",
                format!("expected [n,c,h,w] + [n,c], got {:?} + {:?}", sx, sb),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let vx = self.nodes[ix].value.data();
        let vb = self.nodes[ib].value.data();
        let mut out = vec![0.0; vx.len()];
        for i in 0..n {
            for ch in 0..c {
                let bias = vb[i * c + ch];
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = vx[base + p] + bias;
                }
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        let rg = self.requires(ix) || self.requires(ib);
        Ok(self.push(value, Op::AddChannelMap { x: ix, b: ib }, rg))
    }

    /// `[n,c,h,w] * [n,c]`, per-channel gate broadcast over space.
    pub fn mul_channel_map(&mut self, x: Var, s: Var) -> Result<Var> {
        let ix = self.check(x, "mul_channel_map")?;
        let is = self.check(s, "mul_channel_map")?;
        let sx = self.nodes[ix].value.shape().to_vec();
        let ss = self.nodes[is].value.shape().to_vec();
        if sx.len() != 4 || ss != [sx[0], sx[1]] {
            return Err(Error::dimension(
                "mul_channel_map",
                format!("expected [n,c,h,w] * [n,c], got {:?} * {:?}", sx, ss),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let vx = self.nodes[ix].value.data();
        let vs = self.nodes[is].value.data();
        let mut out = vec![0.0; vx.len()];
        for i in 0..n {
            for ch in 0..c {
                let gate = vs[i * c + ch];
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = vx[base + p] * gate;
                }
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        let rg = self.requires(ix) || self.requires(is);
        Ok(self.push(value, Op::MulChannelMap { x: ix, s: is }, rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "softmax_last")?;
        let vx = &self.nodes[ix].value;
        if vx.rank() == 0 {
            return Err(Error::dimension("softmax_last", "input must have rank >= 1".to_string()));
        }
        let cols = *vx.shape().last().unwrap();
        let mut out = vec![0.0; vx.numel()];
        for (row_out, row_in) in out.chunks_mut(cols).zip(vx.data().chunks(cols)) {
            let max = row_in.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::from_vec(vx.shape(), out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::SoftmaxLast(ix), rg))
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "global_avg_pool")?;
        let sx = self.nodes[ix].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::dimension(
                "global_avg_pool",
                format!("expected rank-4 input, got {:?}", sx),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let vx = self.nodes[ix].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = vx[i * hw..(i + 1) * hw].iter().sum::<Real>() / hw as Real;
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::GlobalAvgPool(ix), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x, "reshape")?;
        let value = self.nodes[ix].value.reshaped(shape)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.check(x, "permute")?;
        let in_shape = self.nodes[ix].value.shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dimension(
                "permute",
                format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = row_major_strides(&in_shape);
        let vx = self.nodes[ix].value.data();
        let mut out = vec![0.0; vx.len()];
        let mut coord = vec![0usize; rank];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut rem = o;
            for d in (0..rank).rev() {
                coord[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let mut src = 0;
            for d in 0..rank {
                src += coord[d] * in_strides[axes[d]];
            }
            *slot = vx[src];
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let rg = self.requires(ix);
        Ok(self.push(value, Op::Permute { x: ix, axes: axes.to_vec() }, rg))
    }

    /// Concatenate two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a, "concat_channels")?;
        let ib = self.check(b, "concat_channels")?;
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::dimension(
                "concat_channels",
                format!("incompatible shapes {:?} and {:?}", sa, sb),
            ));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let va = self.nodes[ia].value.data();
        let vb = self.nodes[ib].value.data();
        let mut out = vec![0.0; n * (ca + cb) * hw];
        let row = (ca + cb) * hw;
        for i in 0..n {
            out[i * row..i * row + ca * hw].copy_from_slice(&va[i * ca * hw..(i + 1) * ca * hw]);
            out[i * row + ca * hw..(i + 1) * row]
                .copy_from_slice(&vb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, sa[2], sa[3]], out)?;
        let rg = self.requires(ia) || self.requires(ib);
        Ok(self.push(value, Op::ConcatChannels(ia, ib), rg))
    }

    /// Scalar mean of squared entries.
    pub fn mean_squared(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "mean_squared")?;
        let vx = self.nodes[ix].value.data();
        let m = vx.iter().map(|v| v * v).sum::<Real>() / vx.len().max(1) as Real;
        let rg = self.requires(ix);
        Ok(self.push(Tensor::scalar(m), Op::MeanSquared(ix), rg))
    }

    /// Scalar mean of absolute entries.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "mean_abs")?;
        let vx = self.nodes[ix].value.data();
        let m = vx.iter().map(|v| v.abs()).sum::<Real>() / vx.len().max(1) as Real;
        let rg = self.requires(ix);
        Ok(self.push(Tensor::scalar(m), Op::MeanAbs(ix), rg))
    }

    /// Scalar mean of entries.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "mean_all")?;
        let vx = self.nodes[ix].value.data();
        let m = vx.iter().sum::<Real>() / vx.len().max(1) as Real;
        let rg = self.requires(ix);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(ix), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::super::core::Tensor;
    use super::super::graph::Graph;
    use crate::error::Error;
    use crate::Real;

    fn leaf_grad(data: Vec<Real>, shape: &[usize]) -> Tensor {
        let mut t = Tensor::from_vec(shape, data).unwrap();
        t.requires_grad = true;
        t
    }

    #[test]
    fn softmax_matches_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax_last(x).unwrap();
        let v = g.value(y).unwrap().data().to_vec();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((v.iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_through_scale_and_shift() {
        // y = mean(2x + 3), dy/dx = 2/n
        let mut g = Graph::new();
        let t = leaf_grad(vec![1.0, -2.0, 0.5, 4.0], &[4]);
        let x = g.leaf(&t);
        let s = g.scale(x, 2.0).unwrap();
        let y = g.shift(s, 3.0).unwrap();
        let loss = g.mean_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for &gv in grads.slice(x).unwrap() {
            assert!((gv - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut g = Graph::new();
        let a = leaf_grad(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = leaf_grad(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let va = g.leaf(&a);
        let vb = g.leaf(&b);
        let y = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[4.0, 5.0, 10.0, 11.0]);
        let loss = g.mean_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        // d(mean)/dy = 1/4 each; da = g * b^T
        let da = grads.slice(va).unwrap();
        let expect_da = [0.25, 0.25, 0.5, 0.25, 0.25, 0.5];
        for (x, e) in da.iter().zip(expect_da) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.add(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn detached_var_is_missing_node() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = g1.constant(Tensor::zeros(&[2]));
        let b = g2.constant(Tensor::zeros(&[2]));
        assert!(matches!(g1.add(a, b), Err(Error::MissingNode { .. })));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let t = leaf_grad(vec![1.0, 2.0], &[2]);
        let x = g.leaf(&t);
        let loss = g.mean_squared(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let t = leaf_grad(vec![1.0, 2.0], &[2]);
        let x = g.leaf(&t);
        assert!(matches!(g.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut g = Graph::new();
        let t = leaf_grad((0..24).map(|v| v as Real).collect(), &[2, 3, 4]);
        let x = g.leaf(&t);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).unwrap().shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).unwrap().data(), t.data());
        let loss = g.mean_all(back).unwrap();
        let grads = g.backward(loss).unwrap();
        for &gv in grads.slice(x).unwrap() {
            assert!((gv - 1.0 / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split_gradients() {
        let mut g = Graph::new();
        let ta = leaf_grad(vec![1.0; 8], &[1, 2, 2, 2]);
        let tb = leaf_grad(vec![2.0; 4], &[1, 1, 2, 2]);
        let a = g.leaf(&ta);
        let b = g.leaf(&tb);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().shape(), &[1, 3, 2, 2]);
        let loss = g.mean_all(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.slice(a).unwrap().len(), 8);
        assert_eq!(grads.slice(b).unwrap().len(), 4);
    }

    #[test]
    fn mean_squared_matches_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 2.0]).unwrap());
        let m = g.mean_squared(x).unwrap();
        assert!((g.value(m).unwrap().item().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn finite_outputs_for_large_magnitudes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[4], vec![1e3, -1e3, 999.0, -999.0]).unwrap());
        for y in [g.sigmoid(x).unwrap(), g.silu(x).unwrap(), g.softmax_last(x).unwrap()] {
            assert!(g.value(y).unwrap().is_finite());
        }
    }
}
