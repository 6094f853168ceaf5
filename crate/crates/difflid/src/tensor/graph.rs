//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node holding the forward value
//! plus whatever the backward pass needs. [`Var`] is a handle into one
//! specific graph; using it with another graph is an error, not undefined
//! behavior. Backward walks the tape in reverse insertion order, which is a
//! valid topological order by construction, so gradient accumulation order
//! is deterministic.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::Real;

use super::core::Tensor;
use super::layers::Parameter;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) graph_id: u64,
    pub(crate) index: usize,
}

/// Saved per-group statistics for group norm backward: (mean, inv_std) pairs.
pub(crate) type GnStats = Vec<(Real, Real)>;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, Real),
    Shift(usize),
    Abs(usize),
    Sigmoid(usize),
    Silu(usize),
    Matmul(usize, usize),
    AddBias1d { x: usize, b: usize },
    AddChannelMap { x: usize, b: usize },
    MulChannelMap { x: usize, s: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    UpsampleNearest2x(usize),
    ResizeNearest(usize),
    ResizeBilinear(usize),
    SoftmaxLast(usize),
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: GnStats },
    GlobalAvgPool(usize),
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    ConcatChannels(usize, usize),
    MhaCross { q: usize, k: usize, v: usize, heads: usize, probs: Vec<Real> },
    MeanSquared(usize),
    MeanAbs(usize),
    MeanAll(usize),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

pub struct Graph {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    /// Parameter buffer address -> node index, to make re-registration
    /// idempotent within one graph.
    param_cache: HashMap<usize, usize>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph_id: self.id, index: self.nodes.len() - 1 }
    }

    /// Register an input tensor. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Register a constant input (never tracked).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Register a named parameter. Registering the same parameter twice in
    /// one graph returns the same node. Frozen parameters participate in the
    /// forward pass but receive no gradient.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let key = p.buffer_id();
        if let Some(&idx) = self.param_cache.get(&key) {
            return Var { graph_id: self.id, index: idx };
        }
        let var = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.param_cache.insert(key, var.index);
        var
    }

    /// Node index for a parameter if it was used in this graph.
    pub fn param_var(&self, p: &Parameter) -> Option<Var> {
        self.param_cache.get(&p.buffer_id()).map(|&index| Var { graph_id: self.id, index })
    }

    pub(crate) fn check(&self, v: Var, op: &str) -> Result<usize> {
        if v.graph_id != self.id || v.index >= self.nodes.len() {
            return Err(Error::MissingNode { op: op.into() });
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let idx = self.check(v, "graph::value")?;
        Ok(&self.nodes[idx].value)
    }

    pub(crate) fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients for every
    /// tracked node reachable from the loss. Calling it a second time on the
    /// same graph is an error; build a fresh graph per step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let loss_idx = self.check(loss, "graph::backward")?;
        if self.backward_done {
            return Err(Error::contract(
                "graph::backward",
                "backward already ran on this graph; build a new graph per step",
            ));
        }
        if self.nodes[loss_idx].value.numel() != 1 {
            return Err(Error::contract(
                "graph::backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss_idx].value.shape()),
            ));
        }
        self.backward_done = true;

        let mut store = GradStore { bufs: vec![None; self.nodes.len()] };
        store.bufs[loss_idx] = Some(vec![1.0; 1]);

        for idx in (0..=loss_idx).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = store.bufs[idx].take() else { continue };
            self.backward_node(idx, &gout, &mut store)?;
            store.bufs[idx] = Some(gout);
        }

        let shapes: Vec<Vec<usize>> =
            self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { graph_id: self.id, bufs: store.bufs, shapes })
    }

    fn backward_node(&self, idx: usize, gout: &[Real], store: &mut GradStore) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                if self.requires(*a) {
                    store.accumulate(*a, gout.to_vec());
                }
                if self.requires(*b) {
                    store.accumulate(*b, gout.to_vec());
                }
                Ok(())
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    store.accumulate(*a, gout.to_vec());
                }
                if self.requires(*b) {
                    store.accumulate(*b, gout.iter().map(|g| -g).collect());
                }
                Ok(())
            }
            Op::Mul(a, b) => {
                let va = self.nodes[*a].value.data();
                let vb = self.nodes[*b].value.data();
                if self.requires(*a) {
                    store.accumulate(*a, gout.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.requires(*b) {
                    store.accumulate(*b, gout.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Ok(())
            }
            Op::Scale(x, s) => {
                if self.requires(*x) {
                    let s = *s;
                    store.accumulate(*x, gout.iter().map(|g| g * s).collect());
                }
                Ok(())
            }
            Op::Shift(x) => {
                if self.requires(*x) {
                    store.accumulate(*x, gout.to_vec());
                }
                Ok(())
            }
            Op::Abs(x) => {
                if self.requires(*x) {
                    let vx = self.nodes[*x].value.data();
                    store.accumulate(
                        *x,
                        gout.iter()
                            .zip(vx)
                            .map(|(g, x)| {
                                if *x > 0.0 {
                                    *g
                                } else if *x < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Ok(())
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let y = self.nodes[idx].value.data();
                    store.accumulate(
                        *x,
                        gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    );
                }
                Ok(())
            }
            Op::Silu(x) => {
                if self.requires(*x) {
                    let vx = self.nodes[*x].value.data();
                    store.accumulate(
                        *x,
                        gout.iter()
                            .zip(vx)
                            .map(|(g, x)| {
                                let s = 1.0 / (1.0 + (-x).exp());
                                g * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    );
                }
                Ok(())
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    // da = gout [m,n] * b^T
                    super::ops::gemm_strided(
                        m, n, k, 1.0, gout, n as isize, 1, vb.data(), 1, n as isize, 0.0,
                        &mut da, k as isize, 1,
                    );
                    store.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    // db = a^T * gout
                    super::ops::gemm_strided(
                        k, m, n, 1.0, va.data(), 1, k as isize, gout, n as isize, 1, 0.0,
                        &mut db, n as isize, 1,
                    );
                    store.accumulate(*b, db);
                }
                Ok(())
            }
            Op::AddBias1d { x, b } => {
                let (nrows, ncols) = {
                    let s = self.nodes[*x].value.shape();
                    (s[0], s[1])
                };
                if self.requires(*x) {
                    store.accumulate(*x, gout.to_vec());
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; ncols];
                    for r in 0..nrows {
                        for c in 0..ncols {
                            db[c] += gout[r * ncols + c];
                        }
                    }
                    store.accumulate(*b, db);
                }
                Ok(())
            }
            Op::AddChannelMap { x, b } => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.requires(*x) {
                    store.accumulate(*x, gout.to_vec());
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; n * c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            db[i * c + ch] = gout[base..base + hw].iter().sum();
                        }
                    }
                    store.accumulate(*b, db);
                }
                Ok(())
            }
            Op::MulChannelMap { x, s } => {
                let sh = self.nodes[*x].value.shape().to_vec();
                let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                let vx = self.nodes[*x].value.data();
                let vs = self.nodes[*s].value.data();
                if self.requires(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = vs[i * c + ch];
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                dx[base + p] = gout[base + p] * scale;
                            }
                        }
                    }
                    store.accumulate(*x, dx);
                }
                if self.requires(*s) {
                    let mut ds = vec![0.0; n * c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let mut acc = 0.0;
                            for p in 0..hw {
                                acc += gout[base + p] * vx[base + p];
                            }
                            ds[i * c + ch] = acc;
                        }
                    }
                    store.accumulate(*s, ds);
                }
                Ok(())
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                super::conv::conv2d_backward(self, idx, *x, *w, *b, *stride, *pad, gout, store)
            }
            Op::UpsampleNearest2x(x) => {
                if self.requires(*x) {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * 2, w * 2);
                    let mut dx = vec![0.0; n * c * h * w];
                    for i in 0..n * c {
                        let ibase = i * h * w;
                        let obase = i * oh * ow;
                        for y in 0..oh {
                            for xq in 0..ow {
                                dx[ibase + (y / 2) * w + xq / 2] += gout[obase + y * ow + xq];
                            }
                        }
                    }
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::ResizeNearest(x) => {
                if self.requires(*x) {
                    let si = self.nodes[*x].value.shape().to_vec();
                    let so = self.nodes[idx].value.shape().to_vec();
                    let (n, c, ih, iw) = (si[0], si[1], si[2], si[3]);
                    let (oh, ow) = (so[2], so[3]);
                    let mut dx = vec![0.0; n * c * ih * iw];
                    for i in 0..n * c {
                        let ibase = i * ih * iw;
                        let obase = i * oh * ow;
                        for y in 0..oh {
                            let sy = y * ih / oh;
                            for xq in 0..ow {
                                let sx = xq * iw / ow;
                                dx[ibase + sy * iw + sx] += gout[obase + y * ow + xq];
                            }
                        }
                    }
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::ResizeBilinear(x) => {
                if self.requires(*x) {
                    let si = self.nodes[*x].value.shape().to_vec();
                    let so = self.nodes[idx].value.shape().to_vec();
                    let dx = super::conv::bilinear_backward(&si, &so, gout);
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::SoftmaxLast(x) => {
                if self.requires(*x) {
                    let y = self.nodes[idx].value.data();
                    let cols = *self.nodes[idx].value.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let base = r * cols;
                        let yr = &y[base..base + cols];
                        let gr = &gout[base..base + cols];
                        let dot: Real = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            dx[base + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => super::norm::group_norm_backward(
                self, *x, *gamma, *beta, *groups, stats, gout, store,
            ),
            Op::GlobalAvgPool(x) => {
                if self.requires(*x) {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let inv = 1.0 / hw as Real;
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n * c {
                        let g = gout[i] * inv;
                        for p in 0..hw {
                            dx[i * hw + p] = g;
                        }
                    }
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    store.accumulate(*x, gout.to_vec());
                }
                Ok(())
            }
            Op::Permute { x, axes } => {
                if self.requires(*x) {
                    let in_shape = self.nodes[*x].value.shape().to_vec();
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    let in_strides = row_major_strides(&in_shape);
                    let out_rank = out_shape.len();
                    let mut coord = vec![0usize; out_rank];
                    for (o, g) in gout.iter().enumerate() {
                        let mut rem = o;
                        for d in (0..out_rank).rev() {
                            coord[d] = rem % out_shape[d];
                            rem /= out_shape[d];
                        }
                        let mut src = 0;
                        for d in 0..out_rank {
                            src += coord[d] * in_strides[axes[d]];
                        }
                        dx[src] += g;
                    }
                    store.accumulate(*x, dx);
                }
                Ok(())
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let row = (ca + cb) * hw;
                if self.requires(*a) {
                    let mut da = vec![0.0; n * ca * hw];
                    for i in 0..n {
                        da[i * ca * hw..(i + 1) * ca * hw]
                            .copy_from_slice(&gout[i * row..i * row + ca * hw]);
                    }
                    store.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; n * cb * hw];
                    for i in 0..n {
                        db[i * cb * hw..(i + 1) * cb * hw]
                            .copy_from_slice(&gout[i * row + ca * hw..(i + 1) * row]);
                    }
                    store.accumulate(*b, db);
                }
                Ok(())
            }
            Op::MhaCross { q, k, v, heads, probs } => {
                super::attention::mha_backward(self, *q, *k, *v, *heads, probs, gout, store)
            }
            Op::MeanSquared(x) => {
                if self.requires(*x) {
                    let vx = self.nodes[*x].value.data();
                    let scale = gout[0] * 2.0 / vx.len() as Real;
                    store.accumulate(*x, vx.iter().map(|x| x * scale).collect());
                }
                Ok(())
            }
            Op::MeanAbs(x) => {
                if self.requires(*x) {
                    let vx = self.nodes[*x].value.data();
                    let scale = gout[0] / vx.len() as Real;
                    store.accumulate(
                        *x,
                        vx.iter()
                            .map(|x| {
                                if *x > 0.0 {
                                    scale
                                } else if *x < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Ok(())
            }
            Op::MeanAll(x) => {
                if self.requires(*x) {
                    let n = self.nodes[*x].value.numel();
                    let g = gout[0] / n as Real;
                    store.accumulate(*x, vec![g; n]);
                }
                Ok(())
            }
        }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) struct GradStore {
    bufs: Vec<Option<Vec<Real>>>,
}

impl GradStore {
    pub fn accumulate(&mut self, idx: usize, contrib: Vec<Real>) {
        match &mut self.bufs[idx] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

pub struct Gradients {
    graph_id: u64,
    bufs: Vec<Option<Vec<Real>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for a node, if any flowed to it.
    pub fn slice(&self, v: Var) -> Option<&[Real]> {
        if v.graph_id != self.graph_id || v.index >= self.bufs.len() {
            return None;
        }
        self.bufs[v.index].as_deref()
    }

    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.slice(v)
            .map(|buf| Tensor::from_vec(&self.shapes[v.index], buf.to_vec()).expect("grad shape"))
    }
}
