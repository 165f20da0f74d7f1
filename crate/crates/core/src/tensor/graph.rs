//! Tape of differentiable operations.
//!
//! Every op appends a node holding its output value and the rule needed to
//! push gradients back to its inputs. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and the backward sweep is a
//! single reverse pass.

use super::kernels::{self, ConvGeom, Padding};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    ScaleBy { x: Var, s: Var },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Affine { x: Var, gamma: Var, beta: Var },
    AddRowBias { x: Var, bias: Var },
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Resize { x: Var, factor: usize },
    Concat(Vec<Var>),
    Slice { x: Var, offset: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording graph for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_a: usize = ba.iter().product();
    let batch_b: usize = bb.iter().product();
    if ba == bb {
        Some((batch_a, n, k, m, false, false))
    } else if bb.is_empty() {
        Some((batch_a, n, k, m, false, true))
    } else if ba.is_empty() {
        Some((batch_b, n, k, m, true, false))
    } else {
        None
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<T>, node_op: Op<T>, rg: bool) -> Result<Var> {
        if !all_finite(&data) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: node_op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, self.shape(a).to_vec(), data, node, rg)
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(op, self.shape(x).to_vec(), data, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::Shift(x))
    }

    /// Multiply every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let rg = self.rg(x) || self.rg(s);
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        self.push("scale_by", self.shape(x).to_vec(), data, Op::ScaleBy { x, s }, rg)
    }

    /// Batched matrix product over the last two axes. Leading batch axes
    /// must match, or one operand may be a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, k, m, a_shared, b_shared) =
            matmul_dims(&sa, &sb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out = vec![T::zero(); batch * n * m];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ao = if a_shared { 0 } else { i * n * k };
                let bo = if b_shared { 0 } else { i * k * m };
                T::gemm(
                    n, k, m, T::one(), &da[ao..ao + n * k], k as isize, 1, &db[bo..bo + k * m],
                    m as isize, 1, T::zero(), &mut out[i * n * m..(i + 1) * n * m], m as isize, 1,
                );
            }
        }
        let mut shape = if sa.len() >= sb.len() { sa.clone() } else { sb.clone() };
        let r = shape.len();
        shape[r - 2] = n;
        shape[r - 1] = m;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", shape, out, Op::MatMul { a, b }, rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (bi, block) in src.chunks(r * c).enumerate() {
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = block[i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        self.push("transpose", shape, out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), rg)
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[0] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[2], stride, padding).ok_or_else(|| {
            Error::invalid(format!(
                "conv2d: kernel {} with {:?} padding does not fit input {:?}",
                sw[2], padding, sx
            ))
        })?;
        let c_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", vec![c_out, geom.out_h, geom.out_w], out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Stride-1 sliding max per channel of `x: [C, H, W]`, borders clipped.
    pub fn maxpool_window(&mut self, x: Var, window: usize) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(0);
        self.maxpool_channels(x, &vec![window; c])
    }

    /// Like [`Graph::maxpool_window`] with a separate window per channel.
    pub fn maxpool_channels(&mut self, x: Var, windows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || windows.len() != s[0] {
            return Err(Error::shape("maxpool", &s, &[windows.len()]));
        }
        if windows.iter().any(|&w| w < 1) {
            return Err(Error::invalid("maxpool: window must be at least 1"));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut out = Vec::with_capacity(s[0] * plane);
        let mut argmax = Vec::with_capacity(s[0] * plane);
        for (ch, &win) in windows.iter().enumerate() {
            let src = &self.value(x).data()[ch * plane..(ch + 1) * plane];
            let (v, a) = kernels::maxpool_plane(src, h, w, win);
            out.extend(v);
            argmax.extend(a.into_iter().map(|i| ch * plane + i));
        }
        let rg = self.rg(x);
        self.push("maxpool", s, out, Op::MaxPool { x, argmax }, rg)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().filter(|&&c| c >= 1).ok_or_else(|| Error::shape("softmax", &s, &[]))?;
        let out = kernels::softmax_rows(self.value(x).data(), cols);
        let rg = self.rg(x);
        self.push("softmax", s, out, Op::Softmax(x), rg)
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().filter(|&&c| c >= 1).ok_or_else(|| Error::shape("log_softmax", &s, &[]))?;
        let out = kernels::log_softmax_rows(self.value(x).data(), cols);
        let rg = self.rg(x);
        self.push("log_softmax", s, out, Op::LogSoftmax(x), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().filter(|&&c| c >= 1).ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        let (out, inv_std) = kernels::layer_norm_rows(self.value(x).data(), cols, eps);
        let rg = self.rg(x);
        self.push("layer_norm", s, out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// `x * gamma + beta` with `gamma`, `beta` broadcast along the last axis.
    pub fn affine_lastdim(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("affine", &s, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, &v)| v * g[j] + b[j]))
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push("affine", s, out, Op::Affine { x, gamma, beta }, rg)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_row_bias", &s, self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_row_bias", s, out, Op::AddRowBias { x, bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary("elu", x, |v| if v > T::zero() { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, T::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, T::ln, Op::Ln(x))
    }

    /// Nearest-neighbour upsampling of `x: [C, H, W]` by an integer factor.
    pub fn resize_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("resize_nearest", &s, &[]));
        }
        if factor < 1 {
            return Err(Error::invalid("resize_nearest: factor must be at least 1"));
        }
        let out = kernels::resize_nearest_forward(self.value(x).data(), s[0], s[1], s[2], factor);
        let rg = self.rg(x);
        self.push("resize_nearest", vec![s[0], s[1] * factor, s[2] * factor], out, Op::Resize { x, factor }, rg)
    }

    /// Concatenate along the first axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", shape, data, Op::Concat(parts.to_vec()), rg)
    }

    /// Rows `start..start + len` of the first axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape("slice", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(x);
        self.push("slice", shape, data, Op::Slice { x, offset: start * inner }, rg)
    }

    /// Row `i` of the output is row `index[i]` of `x` (first axis).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", &s, &[index.len()]));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.clone();
        shape[0] = index.len();
        let rg = self.rg(x);
        self.push("gather_rows", shape, data, Op::GatherRows { x, index: index.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", vec![1], vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(node, &gout, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout).zip(vb) {
                        *d += s * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout).zip(va) {
                        *d += s * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, &mut |g| {
                    for ((d, &s), &den) in g.iter_mut().zip(gout).zip(vb) {
                        *d += s / den;
                    }
                });
                acc(*b, &mut |g| {
                    for (((d, &s), &den), &q) in g.iter_mut().zip(gout).zip(vb).zip(y) {
                        *d -= s * q / den;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s * *c)),
            Op::Shift(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::ScaleBy { x, s } => {
                let c = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(d, &o)| *d += o * c));
                let dot: T = gout.iter().zip(vx).map(|(&o, &v)| o * v).sum();
                acc(*s, &mut |g| g[0] += dot);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (batch, n, k, m, a_shared, b_shared) = matmul_dims(sa, sb).expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * n * k };
                        let bo = if b_shared { 0 } else { i * k * m };
                        // ga += gout . b^T
                        T::gemm(
                            n, m, k, T::one(), &gout[i * n * m..(i + 1) * n * m], m as isize, 1,
                            &vb[bo..bo + k * m], 1, m as isize, T::one(), &mut g[ao..ao + n * k],
                            k as isize, 1,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * n * k };
                        let bo = if b_shared { 0 } else { i * k * m };
                        // gb += a^T . gout
                        T::gemm(
                            k, n, m, T::one(), &va[ao..ao + n * k], 1, k as isize,
                            &gout[i * n * m..(i + 1) * n * m], m as isize, 1, T::one(),
                            &mut g[bo..bo + k * m], m as isize, 1,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, &mut |g| {
                    for (bi, block) in gout.chunks(r * c).enumerate() {
                        let dst = &mut g[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += block[j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::Conv2d { x, w, b, geom } => {
                let c_out = self.nodes[w.0].value.shape()[0];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |g| kernels::conv2d_backward(vx, vw, c_out, geom, gout, Some(g), None, None));
                acc(*w, &mut |g| kernels::conv2d_backward(vx, vw, c_out, geom, gout, None, Some(g), None));
                if let Some(b) = b {
                    acc(*b, &mut |g| kernels::conv2d_backward(vx, vw, c_out, geom, gout, None, None, Some(g)));
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |g| {
                for (&a, &s) in argmax.iter().zip(gout) {
                    g[a] += s;
                }
            }),
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in gout.chunks(cols).zip(y.chunks(cols)).zip(g.chunks_mut(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in gout.chunks(cols).zip(y.chunks(cols)).zip(g.chunks_mut(cols)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &gy), &ly) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gy - ly.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = *node.value.shape().last().unwrap();
                let n = T::from_usize(cols).unwrap();
                acc(*x, &mut |g| {
                    for (((gr, xr), dr), &r) in gout
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(g.chunks_mut(cols))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((d, &gy), &xh) in dr.iter_mut().zip(gr).zip(xr) {
                            *d += r * (gy - mg - xh * mgx);
                        }
                    }
                });
            }
            Op::Affine { x, gamma, beta } => {
                let d = self.nodes[gamma.0].value.numel();
                let (vx, vg) = (val(*x), val(*gamma));
                acc(*x, &mut |g| {
                    for (i, (dv, &s)) in g.iter_mut().zip(gout).enumerate() {
                        *dv += s * vg[i % d];
                    }
                });
                acc(*gamma, &mut |g| {
                    for (i, (&s, &v)) in gout.iter().zip(vx).enumerate() {
                        g[i % d] += s * v;
                    }
                });
                acc(*beta, &mut |g| {
                    for (i, &s) in gout.iter().enumerate() {
                        g[i % d] += s;
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let d = self.nodes[bias.0].value.numel();
                acc(*x, &mut |g| add_into(g, gout));
                acc(*bias, &mut |g| {
                    for (i, &s) in gout.iter().enumerate() {
                        g[i % d] += s;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(gout).zip(vx) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for (((d, &s), &v), &o) in g.iter_mut().zip(gout).zip(vx).zip(y) {
                        *d += if v > T::zero() { s } else { s * (o + T::one()) };
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(y) {
                    *d += s * (T::one() - o * o);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(y) {
                    *d += s * o * (T::one() - o);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(y) {
                    *d += s * o;
                }
            }),
            Op::Ln(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *d += s / v;
                    }
                });
            }
            Op::Resize { x, factor } => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |g| kernels::resize_nearest_backward(gout, c, h, w, *factor, g));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(p, &mut |g| add_into(g, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { x, offset } => {
                let off = *offset;
                acc(*x, &mut |g| add_into(&mut g[off..off + gout.len()], gout));
            }
            Op::GatherRows { x, index } => {
                let inner = gout.len() / index.len().max(1);
                acc(*x, &mut |g| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut g[i * inner..(i + 1) * inner], &gout[r * inner..(r + 1) * inner]);
                    }
                });
            }
            Op::Sum(x) => {
                let s = gout[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|d| *d += s));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `x - x` is NaN exactly for infinities and NaNs; lanes keep it vectorized.
fn all_finite<T: Scalar>(data: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k] - c[k];
        }
    }
    acc.iter().chain(tail).all(|v| v.is_finite())
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
