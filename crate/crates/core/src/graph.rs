//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! handed out in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Values are stored as `f32`. Every reduction (sums, means, matrix and
//! convolution products) accumulates in `f64` and rounds once on output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied before every logarithm.
pub const LOG_FLOOR: f64 = 1.928_749_847_963_917_8e-22; // e^-50

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a flat buffer splits into normalization channels: element
/// `((o * channels) + c) * inner + i` belongs to channel `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    /// `rows × channels` matrix, one channel per column.
    pub fn columns(rows: usize, channels: usize) -> Self {
        ChannelLayout {
            outer: rows,
            channels,
            inner: 1,
        }
    }

    /// `B × C × H × W` feature maps.
    pub fn nchw(shape: &[usize]) -> Self {
        ChannelLayout {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2] * shape[3],
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn total(&self) -> usize {
        self.outer * self.channels * self.inner
    }
}

#[derive(Debug, Clone)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Inference { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
    pad_h: usize,
    pad_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output columns `x` whose tap at horizontal offset `ox` lands inside the input.
    fn valid_x(&self, ox: usize) -> (usize, usize) {
        let lo = self.pad_w.saturating_sub(ox).min(self.w);
        let hi = (self.w + self.pad_w).saturating_sub(ox).min(self.w).max(lo);
        (lo, hi)
    }

    /// Output rows `y` whose tap at vertical offset `oy` lands inside the input.
    fn valid_y(&self, oy: usize) -> (usize, usize) {
        let lo = self.pad_h.saturating_sub(oy).min(self.h);
        let hi = (self.h + self.pad_h).saturating_sub(oy).min(self.h).max(lo);
        (lo, hi)
    }

    /// For one tap, the flat output range that reads from the input and the
    /// constant offset of the source index. Entries of the range at invalid
    /// columns must still be masked by the caller.
    fn tap_span(&self, a: usize, b: usize) -> (usize, usize, isize) {
        let (oy, ox) = (a * self.dh, b * self.dw);
        let (y0, y1) = self.valid_y(oy);
        let shift = (oy as isize - self.pad_h as isize) * self.w as isize + ox as isize
            - self.pad_w as isize;
        let plane = self.plane() as isize;
        let lo = ((y0 * self.w) as isize).max(-shift).max(0);
        let hi = ((y1 * self.w) as isize).min(plane - shift).max(lo);
        (lo as usize, hi as usize, shift)
    }

    /// Unfold one sample into a `patch × plane` column matrix.
    fn im2col(&self, input: &[f32], cols: &mut [f64]) {
        let plane = self.plane();
        for ci in 0..self.c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi, shift) = self.tap_span(a, b);
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (lo as isize + shift) as usize;
                    for (o, v) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                        *o = *v as f64;
                    }
                    let (x0, x1) = self.valid_x(b * self.dw);
                    if x0 > 0 || x1 < self.w {
                        for line in dst[lo - lo % self.w..hi].chunks_mut(self.w) {
                            let n = line.len();
                            line[..x0.min(n)].fill(0.0);
                            line[x1.min(n)..].fill(0.0);
                        }
                    }
                }
            }
        }
    }

    /// Fold a column-matrix gradient back onto one sample's input gradient.
    /// Entries of `cols` at padded positions are overwritten with zero.
    fn col2im(&self, cols: &mut [f64], grad: &mut [f64]) {
        let plane = self.plane();
        for ci in 0..self.c_in {
            let dst = &mut grad[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi, shift) = self.tap_span(a, b);
                    if lo == hi {
                        continue;
                    }
                    let (x0, x1) = self.valid_x(b * self.dw);
                    if x0 > 0 || x1 < self.w {
                        for line in src[lo - lo % self.w..hi].chunks_mut(self.w) {
                            let n = line.len();
                            line[..x0.min(n)].fill(0.0);
                            line[x1.min(n)..].fill(0.0);
                        }
                    }
                    let d0 = (lo as isize + shift) as usize;
                    for (o, v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Mask(NodeId, Vec<f32>),
    LogFloor(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: ChannelLayout,
        train: bool,
        inv_std: Vec<f64>,
        xhat: Vec<f32>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Conv2d(NodeId, NodeId, ConvGeometry),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    AddBias(NodeId, NodeId),
    /// Keeps the unrounded probabilities for a following cross-entropy.
    Softmax(NodeId, Vec<f64>),
    CrossEntropy(NodeId, Vec<usize>),
    Sum(NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Mask(..) => "mask",
            Op::LogFloor(_) => "log_floor",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d(..) => "conv2d",
            Op::Add(..) => "add",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::AddBias(..) => "add_bias",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    learnable: bool,
    needs_grad: bool,
    /// Unrounded value of scalar reductions.
    exact: Option<f64>,
}

/// Gradients of a scalar loss with respect to every learnable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dgemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    assert!((m == 0 || k == 0) || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k == 0 || n == 0) || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a dense row-major m×n buffer borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn narrow(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Learnable leaf: receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, learnable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            learnable,
            needs_grad: learnable,
            exact: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            learnable: false,
            needs_grad,
            exact: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a node; reductions report their `f64` accumulator
    /// before rounding to `f32`.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let node = &self.nodes[id.0];
        match node.exact {
            Some(v) => Ok(v),
            None => node.value.item().map(f64::from),
        }
    }

    fn set_exact(&mut self, id: NodeId, value: f64) -> NodeId {
        self.nodes[id.0].exact = Some(value);
        id
    }

    /// Which side of its kink every piecewise-linear element sits on, in
    /// recording order: `x > 0` for each ReLU input and `x > e^-50` for each
    /// log-floor input. Two graphs of identical structure with equal patterns
    /// lie on the same smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let floor = LOG_FLOOR as f32;
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|v| *v > 0.0)),
                Op::LogFloor(x) => out.extend(self.value(x).data().iter().map(|v| *v > floor)),
                _ => {}
            }
        }
        out
    }

    /// Batch mean and biased variance computed by a training-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f64; m * n];
        dgemm(
            (m, k, n),
            &widen(self.value(a).data()),
            (k, 1),
            &widen(self.value(b).data()),
            (n, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[m, n], narrow(&out))?;
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, &[x])
    }

    /// Element-wise product with a constant mask of the same size.
    pub fn mask(&mut self, x: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("mask", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push(Op::Mask(x, mask), value, &[x])
    }

    /// `ln(max(x, e^-50))` element-wise. Negative input is rejected.
    pub fn log_floor(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!(
                "log compression requires nonnegative input, found {bad}"
            )));
        }
        let value = xv.map(|v| (v as f64).max(LOG_FLOOR).ln() as f32);
        self.push(Op::LogFloor(x), value, &[x])
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: ChannelLayout,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != layout.total() {
            return Err(Error::shape(
                "batch_norm",
                xv.shape(),
                &[layout.outer, layout.channels, layout.inner],
            ));
        }
        for p in [gamma, beta] {
            if self.value(p).len() != layout.channels {
                return Err(Error::shape(
                    "batch_norm",
                    self.value(p).shape(),
                    &[layout.channels],
                ));
            }
        }
        let ch = layout.channels;
        let data = xv.data();
        let (train, mean, var) = match mode {
            BatchNormMode::Train => {
                let n = layout.count() as f64;
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for o in 0..layout.outer {
                    for (c, m) in mean.iter_mut().enumerate() {
                        let base = (o * ch + c) * layout.inner;
                        *m += data[base..base + layout.inner]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for o in 0..layout.outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * layout.inner;
                        var[c] += data[base..base + layout.inner]
                            .iter()
                            .map(|&v| (v as f64 - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (true, mean, var)
            }
            BatchNormMode::Inference { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", &[mean.len(), var.len()], &[ch]));
                }
                (false, mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; data.len()];
        let mut out = vec![0.0f32; data.len()];
        for o in 0..layout.outer {
            for c in 0..ch {
                let base = (o * ch + c) * layout.inner;
                for i in base..base + layout.inner {
                    let h = (data[i] as f64 - mean[c]) * inv_std[c];
                    xhat[i] = h as f32;
                    out[i] = (g[c] as f64 * h + b[c] as f64) as f32;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                train,
                inv_std,
                xhat,
                batch_mean: mean,
                batch_var: var,
            },
            value,
            &[x, gamma, beta],
        )
    }

    /// Zero-padded cross-correlation that preserves the spatial size.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, dilation: (usize, usize)) -> Result<NodeId> {
        if dilation.0 < 1 || dilation.1 < 1 {
            return Err(Error::Config(format!("dilation must be >= 1, got {dilation:?}")));
        }
        let (sx, sk) = (self.value(x).shape(), self.value(kernel).shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        let geo = ConvGeometry {
            batch: sx[0],
            c_in: sx[1],
            c_out: sk[0],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
            dh: dilation.0,
            dw: dilation.1,
            pad_h: dilation.0 * (sk[2] - 1) / 2,
            pad_w: dilation.1 * (sk[3] - 1) / 2,
        };
        let (patch, plane) = (geo.patch(), geo.plane());
        let kmat = widen(self.value(kernel).data());
        let input = self.value(x).data();
        let mut cols = vec![0.0f64; patch * plane];
        let mut acc = vec![0.0f64; geo.c_out * plane];
        let mut out = Vec::with_capacity(geo.batch * geo.c_out * plane);
        for s in 0..geo.batch {
            geo.im2col(&input[s * geo.c_in * plane..(s + 1) * geo.c_in * plane], &mut cols);
            dgemm(
                (geo.c_out, patch, plane),
                &kmat,
                (patch, 1),
                &cols,
                (plane, 1),
                0.0,
                &mut acc,
            );
            out.extend(acc.iter().map(|&v| v as f32));
        }
        let value = Tensor::new(&[geo.batch, geo.c_out, geo.h, geo.w], out)?;
        self.push(Op::Conv2d(x, kernel, geo), value, &[x, kernel])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(Op::Add(a, b), value, &[a, b])
    }

    /// Mean over the two spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
        }
        let plane = s[2] * s[3];
        let data = xv
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], data)?;
        self.push(Op::GlobalAvgPool(x), value, &[x])
    }

    /// Adds a length-P bias to every row of an M×P matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 2 || bv.len() != xv.dim(1) {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let p = xv.dim(1);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % p])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push(Op::AddBias(x, bias), value, &[x, bias])
    }

    /// Row-wise softmax of an M×P matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("softmax", xv.shape(), &[0, 0]));
        }
        let p = xv.dim(1);
        let mut exact = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(p) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exact.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::new(xv.shape(), narrow(&exact))?;
        self.push(Op::Softmax(x, exact), value, &[x])
    }

    /// Mean over rows of `-ln(max(p[label], e^-50))`.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let pv = self.value(probs);
        if pv.rank() != 2 || pv.dim(0) != labels.len() {
            return Err(Error::shape("cross_entropy", pv.shape(), &[labels.len()]));
        }
        let classes = pv.dim(1);
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let loss = match &self.nodes[probs.0].op {
            Op::Softmax(_, exact) => cross_entropy_of(|i| exact[i], classes, labels),
            _ => cross_entropy_value(pv.data(), classes, labels),
        };
        let id = self.push(
            Op::CrossEntropy(probs, labels.to_vec()),
            Tensor::scalar(loss as f32),
            &[probs],
        )?;
        Ok(self.set_exact(id, loss))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).sum();
        let id = self.push(Op::Sum(x), Tensor::scalar(total as f32), &[x])?;
        Ok(self.set_exact(id, total))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value, &[x])
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown node {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pending: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut result: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.learnable {
                result[id] = Some(Tensor::new(node.value.shape(), grad)?);
                continue;
            }
            self.propagate(node, &grad, &mut pending);
        }
        Ok(Gradients { grads: result })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, grad: &[f32], pending: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                let g = widen(grad);
                if self.wants(*a) {
                    let mut da = vec![0.0f64; m * k];
                    // dA = dC · Bᵀ
                    dgemm((m, n, k), &g, (n, 1), &widen(bv.data()), (1, n), 0.0, &mut da);
                    accumulate(&mut pending[a.0], narrow(&da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f64; k * n];
                    // dB = Aᵀ · dC
                    dgemm((k, m, n), &widen(av.data()), (1, k), &g, (n, 1), 0.0, &mut db);
                    accumulate(&mut pending[b.0], narrow(&db));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = grad
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut pending[x.0], dx);
            }
            Op::Mask(x, mask) => {
                let dx = grad.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(&mut pending[x.0], dx);
            }
            Op::LogFloor(x) => {
                let xv = self.value(*x).data();
                let dx = grad
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        if (v as f64) > LOG_FLOOR {
                            (*g as f64 / v as f64) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut pending[x.0], dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                train,
                inv_std,
                xhat,
                ..
            } => {
                let ch = layout.channels;
                let mut sum_dy = vec![0.0f64; ch];
                let mut sum_dy_xhat = vec![0.0f64; ch];
                for o in 0..layout.outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * layout.inner;
                        for i in base..base + layout.inner {
                            sum_dy[c] += grad[i] as f64;
                            sum_dy_xhat[c] += grad[i] as f64 * xhat[i] as f64;
                        }
                    }
                }
                if self.wants(*gamma) {
                    accumulate(&mut pending[gamma.0], narrow(&sum_dy_xhat));
                }
                if self.wants(*beta) {
                    accumulate(&mut pending[beta.0], narrow(&sum_dy));
                }
                if self.wants(*x) {
                    let g = self.value(*gamma).data();
                    let n = layout.count() as f64;
                    let mut dx = vec![0.0f32; grad.len()];
                    for o in 0..layout.outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * layout.inner;
                            let scale = g[c] as f64 * inv_std[c];
                            for i in base..base + layout.inner {
                                let v = if *train {
                                    scale
                                        * (grad[i] as f64
                                            - sum_dy[c] / n
                                            - xhat[i] as f64 * sum_dy_xhat[c] / n)
                                } else {
                                    scale * grad[i] as f64
                                };
                                dx[i] = v as f32;
                            }
                        }
                    }
                    accumulate(&mut pending[x.0], dx);
                }
            }
            Op::Conv2d(x, kernel, geo) => {
                let (patch, plane) = (geo.patch(), geo.plane());
                let input = self.value(*x).data();
                let kmat = widen(self.value(*kernel).data());
                let want_x = self.wants(*x);
                let want_k = self.wants(*kernel);
                let mut dk = vec![0.0f64; geo.c_out * patch];
                let mut dx = if want_x {
                    vec![0.0f64; input.len()]
                } else {
                    Vec::new()
                };
                let mut cols = vec![0.0f64; patch * plane];
                let mut dcols = vec![0.0f64; patch * plane];
                let per_in = geo.c_in * plane;
                let per_out = geo.c_out * plane;
                for s in 0..geo.batch {
                    let g = widen(&grad[s * per_out..(s + 1) * per_out]);
                    if want_k {
                        geo.im2col(&input[s * per_in..(s + 1) * per_in], &mut cols);
                        // dK += dOut · colsᵀ
                        dgemm(
                            (geo.c_out, plane, patch),
                            &g,
                            (plane, 1),
                            &cols,
                            (1, plane),
                            1.0,
                            &mut dk,
                        );
                    }
                    if want_x {
                        // dCols = Kᵀ · dOut
                        dgemm(
                            (patch, geo.c_out, plane),
                            &kmat,
                            (1, patch),
                            &g,
                            (plane, 1),
                            0.0,
                            &mut dcols,
                        );
                        geo.col2im(&mut dcols, &mut dx[s * per_in..(s + 1) * per_in]);
                    }
                }
                if want_k {
                    accumulate(&mut pending[kernel.0], narrow(&dk));
                }
                if want_x {
                    accumulate(&mut pending[x.0], narrow(&dx));
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(*id) {
                        accumulate(&mut pending[id.0], grad.to_vec());
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let dx = grad
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / plane as f32, plane))
                    .collect();
                accumulate(&mut pending[x.0], dx);
            }
            Op::AddBias(x, bias) => {
                let p = self.value(*bias).len();
                if self.wants(*bias) {
                    let mut db = vec![0.0f64; p];
                    for row in grad.chunks(p) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += *g as f64;
                        }
                    }
                    accumulate(&mut pending[bias.0], narrow(&db));
                }
                if self.wants(*x) {
                    accumulate(&mut pending[x.0], grad.to_vec());
                }
            }
            Op::Softmax(x, _) => {
                let p = node.value.dim(1);
                let mut dx = Vec::with_capacity(grad.len());
                for (gr, pr) in grad.chunks(p).zip(node.value.data().chunks(p)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(g, q)| *g as f64 * *q as f64).sum();
                    dx.extend(
                        gr.iter()
                            .zip(pr)
                            .map(|(g, q)| (*q as f64 * (*g as f64 - dot)) as f32),
                    );
                }
                accumulate(&mut pending[x.0], dx);
            }
            Op::CrossEntropy(probs, labels) => {
                let pv = self.value(*probs);
                let classes = pv.dim(1);
                let scale = grad[0] as f64 / labels.len() as f64;
                let mut dp = vec![0.0f32; pv.len()];
                for (b, &l) in labels.iter().enumerate() {
                    let q = pv.data()[b * classes + l] as f64;
                    if q > LOG_FLOOR {
                        dp[b * classes + l] = (-scale / q) as f32;
                    }
                }
                accumulate(&mut pending[probs.0], dp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(&mut pending[x.0], vec![grad[0]; n]);
            }
            Op::Reshape(x) => {
                accumulate(&mut pending[x.0], grad.to_vec());
            }
        }
    }
}

/// Mean floored negative log-likelihood of `labels` under row-major `probs`.
pub(crate) fn cross_entropy_value(probs: &[f32], classes: usize, labels: &[usize]) -> f64 {
    cross_entropy_of(|i| probs[i] as f64, classes, labels)
}

fn cross_entropy_of(prob: impl Fn(usize) -> f64, classes: usize, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &l)| -prob(b * classes + l).max(LOG_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}
