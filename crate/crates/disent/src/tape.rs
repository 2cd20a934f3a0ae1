//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward operations append nodes to the tape; each node caches its value
//! and owns a gradient accumulator of the same shape. Node inputs always
//! precede the node itself, so creation order is a topological order and
//! `backward` is a single reverse sweep. A tape can be consumed by exactly
//! one backward pass; a second pass is an error rather than a silent
//! double-count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Spatial padding for convolution operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps `ceil(extent / stride)`; zero padding split evenly,
    /// extra at the bottom/right.
    Same,
    /// No padding; kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone)]
enum Op<T> {
    /// Input tensor; constants and parameters differ only in whether the
    /// caller reads the gradient back.
    Leaf,
    Matmul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    },
    Conv2dTranspose {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    },
    /// `x[C,H,W] + b[C]`, bias broadcast over the spatial extents.
    ChannelBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    AddConst(NodeId, T),
    Relu(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Log(NodeId),
    ClampMin(NodeId, T),
    Softmax(NodeId),
    Sum(NodeId),
    Pick(NodeId, usize),
    Reshape(NodeId),
    StopGradient,
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Tensor<T>,
    /// Whether any gradient-bearing leaf feeds this node; backward skips
    /// nodes (and adjoint writes into inputs) that carry no gradient.
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.fmt_shape(),
            rhs: b.fmt_shape(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the latest backward pass.
    pub fn grad(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::StopGradient => false,
            other => self.inputs_of(other).iter().any(|id| self.nodes[id.0].needs_grad),
        };
        self.push_with(op, value, needs_grad)
    }

    fn push_with(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node {
            op,
            value,
            grad,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<NodeId> {
        match *op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Matmul(a, b)
            | Op::Conv2d { input: a, kernels: b, .. }
            | Op::Conv2dTranspose { input: a, kernels: b, .. }
            | Op::ChannelBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddConst(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Abs(x)
            | Op::Log(x)
            | Op::ClampMin(x, _)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Pick(x, _)
            | Op::Reshape(x) => vec![x],
        }
    }

    /// Register an input whose gradient the caller will read back.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(Op::Leaf, value, true)
    }

    /// Register an input that never receives gradient (observations, fixed
    /// targets). Backward prunes every computation that only serves it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_with(Op::Leaf, value, false)
    }

    /// Standard matrix product of `[m,k]` by `[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.fmt_shape(),
                rhs: vb.fmt_shape(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(va.data(), vb.data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::Matmul(a, b), out))
    }

    /// 2-d cross-correlation (no kernel flip) of `input[C_in,H,W]` with
    /// `kernels[C_out,C_in,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernels.0].value);
        let geom = ConvGeometry::for_conv("conv2d", vi.shape(), vk.shape(), stride, padding)?;
        let mut out = Tensor::zeros(vec![geom.c_out, geom.out_h, geom.out_w]);
        conv_forward(vi.data(), vk.data(), out.data_mut(), &geom);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            out,
        ))
    }

    /// Adjoint of [`Tape::conv2d`] as a forward operation: maps
    /// `input[C_out,H',W']` back to the shape the matching conv2d consumed.
    /// For stride > 1 that shape is ambiguous; the smallest consistent
    /// extents are used.
    pub fn conv2d_transpose(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernels.0].value);
        let geom =
            ConvGeometry::for_transpose("conv2d_transpose", vi.shape(), vk.shape(), stride, padding)?;
        let mut out = Tensor::zeros(vec![geom.c_in, geom.in_h, geom.in_w]);
        conv_input_adjoint(vi.data(), vk.data(), out.data_mut(), &geom);
        Ok(self.push(
            Op::Conv2dTranspose {
                input,
                kernels,
                stride,
                padding,
            },
            out,
        ))
    }

    /// Add a per-channel bias `b[C]` to `x[C,H,W]`.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let sx = vx.shape();
        if sx.len() != 3 || vb.shape() != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                lhs: vx.fmt_shape(),
                rhs: vb.fmt_shape(),
            });
        }
        let hw = sx[1] * sx[2];
        let mut out = vx.clone();
        for (c, &b) in vb.data().iter().enumerate() {
            for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
                *v = *v + b;
            }
        }
        Ok(self.push(Op::ChannelBias(x, bias), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("add", va, vb)?;
        let mut out = va.clone();
        out.axpy(T::one(), vb);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("sub", va, vb)?;
        let mut out = va.clone();
        out.axpy(-T::one(), vb);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("mul", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("div", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Div(a, b), out))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.push(Op::Scale(x, c), out)
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v + c);
        self.push(Op::AddConst(x, c), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.tanh());
        self.push(Op::Tanh(x), out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.abs());
        self.push(Op::Abs(x), out)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        self.push(Op::Log(x), out)
    }

    /// Elementwise `max(x, min)`; gradient is zero at and below the bound.
    pub fn clamp_min(&mut self, x: NodeId, min: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.max(min));
        self.push(Op::ClampMin(x, min), out)
    }

    /// Numerically stable softmax over all elements.
    pub fn softmax(&mut self, z: NodeId) -> NodeId {
        let v = &self.nodes[z.0].value;
        let max = v
            .data()
            .iter()
            .fold(T::neg_infinity(), |acc, &x| acc.max(x));
        let exps: Vec<T> = v.data().iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().fold(T::zero(), |acc, &e| acc + e);
        let data: Vec<T> = exps.into_iter().map(|e| e / total).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("softmax keeps shape");
        self.push(Op::Softmax(z), out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Extract the element at flat `index`, as a `[1]` tensor.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if index >= v.numel() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: v.fmt_shape(),
                rhs: format!("[index {index}]"),
            });
        }
        let out = Tensor::scalar(v.data()[index]);
        Ok(self.push(Op::Pick(x, index), out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.clone();
        self.push(Op::StopGradient, out)
    }

    /// Convenience: `0.5 * sum((a - b)^2)`.
    pub fn half_squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, T::from_f64(0.5)))
    }

    /// Reverse sweep from a scalar `root`. Every node's gradient accumulator
    /// is zeroed first, then filled with `d root / d node`. The tape is
    /// consumed: a second call is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.fmt_shape(),
            });
        }
        self.consumed = true;
        for node in &mut self.nodes {
            node.grad.fill(T::zero());
        }
        self.nodes[root.0].grad.fill(T::one());

        for i in (0..self.nodes.len()).rev() {
            // Inputs always precede their consumers, so splitting at `i`
            // gives disjoint borrows of the node and its inputs.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.needs_grad || node.grad.data().iter().all(|g| g.is_zero()) {
                continue;
            }
            let g = &node.grad;
            match node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (sa, sb) = (head[a.0].value.shape(), head[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    // dA += G B^T ; dB += A^T G
                    if a.0 == b.0 {
                        let na = &mut head[a.0];
                        let value = na.value.clone();
                        matmul_nt(g.data(), value.data(), na.grad.data_mut(), m, n, k);
                        matmul_tn(value.data(), g.data(), na.grad.data_mut(), k, m, n);
                    } else {
                        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                        let (first, second) = head.split_at_mut(hi);
                        let (na, nb) = if a.0 < b.0 {
                            (&mut first[lo], &mut second[0])
                        } else {
                            (&mut second[0], &mut first[lo])
                        };
                        if na.needs_grad {
                            matmul_nt(g.data(), nb.value.data(), na.grad.data_mut(), m, n, k);
                        }
                        if nb.needs_grad {
                            matmul_tn(na.value.data(), g.data(), nb.grad.data_mut(), k, m, n);
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeometry::for_conv(
                        "conv2d",
                        head[input.0].value.shape(),
                        head[kernels.0].value.shape(),
                        stride,
                        padding,
                    )
                    .expect("validated at forward");
                    let (lo, hi) = (input.0.min(kernels.0), input.0.max(kernels.0));
                    let (first, second) = head.split_at_mut(hi);
                    let (ni, nk) = if input.0 < kernels.0 {
                        (&mut first[lo], &mut second[0])
                    } else {
                        (&mut second[0], &mut first[lo])
                    };
                    if ni.needs_grad {
                        conv_input_adjoint(g.data(), nk.value.data(), ni.grad.data_mut(), &geom);
                    }
                    if nk.needs_grad {
                        conv_kernel_adjoint(g.data(), ni.value.data(), nk.grad.data_mut(), &geom);
                    }
                }
                Op::Conv2dTranspose {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeometry::for_transpose(
                        "conv2d_transpose",
                        head[input.0].value.shape(),
                        head[kernels.0].value.shape(),
                        stride,
                        padding,
                    )
                    .expect("validated at forward");
                    let (lo, hi) = (input.0.min(kernels.0), input.0.max(kernels.0));
                    let (first, second) = head.split_at_mut(hi);
                    let (ni, nk) = if input.0 < kernels.0 {
                        (&mut first[lo], &mut second[0])
                    } else {
                        (&mut second[0], &mut first[lo])
                    };
                    // z = A(k)^T u, so du += A(k) g and dk gets the cross
                    // term with the roles of u and g swapped.
                    if ni.needs_grad {
                        conv_forward(g.data(), nk.value.data(), ni.grad.data_mut(), &geom);
                    }
                    if nk.needs_grad {
                        conv_kernel_adjoint(ni.value.data(), g.data(), nk.grad.data_mut(), &geom);
                    }
                }
                Op::ChannelBias(x, bias) => {
                    let hw = {
                        let sx = head[x.0].value.shape();
                        sx[1] * sx[2]
                    };
                    head[x.0].grad.axpy(T::one(), g);
                    let db = head[bias.0].grad.data_mut();
                    for (c, db_c) in db.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for &gv in &g.data()[c * hw..(c + 1) * hw] {
                            acc += gv;
                        }
                        *db_c += acc;
                    }
                }
                Op::Add(a, b) => {
                    head[a.0].grad.axpy(T::one(), g);
                    head[b.0].grad.axpy(T::one(), g);
                }
                Op::Sub(a, b) => {
                    head[a.0].grad.axpy(T::one(), g);
                    head[b.0].grad.axpy(-T::one(), g);
                }
                Op::Mul(a, b) => {
                    if a.0 == b.0 {
                        let na = &mut head[a.0];
                        let two = T::one() + T::one();
                        for i in 0..g.numel() {
                            let v = na.value.data()[i];
                            na.grad.data_mut()[i] += two * g.data()[i] * v;
                        }
                    } else {
                        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                        let (first, second) = head.split_at_mut(hi);
                        let (na, nb) = if a.0 < b.0 {
                            (&mut first[lo], &mut second[0])
                        } else {
                            (&mut second[0], &mut first[lo])
                        };
                        for i in 0..g.numel() {
                            na.grad.data_mut()[i] += g.data()[i] * nb.value.data()[i];
                            nb.grad.data_mut()[i] += g.data()[i] * na.value.data()[i];
                        }
                    }
                }
                Op::Div(a, b) => {
                    if a.0 == b.0 {
                        // x / x == 1, gradient zero
                    } else {
                        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                        let (first, second) = head.split_at_mut(hi);
                        let (na, nb) = if a.0 < b.0 {
                            (&mut first[lo], &mut second[0])
                        } else {
                            (&mut second[0], &mut first[lo])
                        };
                        for i in 0..g.numel() {
                            let bv = nb.value.data()[i];
                            na.grad.data_mut()[i] += g.data()[i] / bv;
                            nb.grad.data_mut()[i] -= g.data()[i] * na.value.data()[i] / (bv * bv);
                        }
                    }
                }
                Op::Scale(x, c) => head[x.0].grad.axpy(c, g),
                Op::AddConst(x, _) => head[x.0].grad.axpy(T::one(), g),
                Op::Relu(x) => {
                    let nx = &mut head[x.0];
                    for i in 0..g.numel() {
                        if nx.value.data()[i] > T::zero() {
                            nx.grad.data_mut()[i] += g.data()[i];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let nx = &mut head[x.0];
                    for i in 0..g.numel() {
                        let t = y.data()[i];
                        nx.grad.data_mut()[i] += g.data()[i] * (T::one() - t * t);
                    }
                }
                Op::Abs(x) => {
                    let nx = &mut head[x.0];
                    for i in 0..g.numel() {
                        let v = nx.value.data()[i];
                        // subgradient 0 at exactly 0
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        nx.grad.data_mut()[i] += g.data()[i] * s;
                    }
                }
                Op::Log(x) => {
                    let nx = &mut head[x.0];
                    for i in 0..g.numel() {
                        nx.grad.data_mut()[i] += g.data()[i] / nx.value.data()[i];
                    }
                }
                Op::ClampMin(x, min) => {
                    let nx = &mut head[x.0];
                    for i in 0..g.numel() {
                        if nx.value.data()[i] > min {
                            nx.grad.data_mut()[i] += g.data()[i];
                        }
                    }
                }
                Op::Softmax(z) => {
                    let y = &node.value;
                    let dot = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                    let nz = &mut head[z.0];
                    for i in 0..g.numel() {
                        nz.grad.data_mut()[i] += y.data()[i] * (g.data()[i] - dot);
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    for v in head[x.0].grad.data_mut() {
                        *v += gv;
                    }
                }
                Op::Pick(x, index) => {
                    head[x.0].grad.data_mut()[index] += g.data()[0];
                }
                Op::Reshape(x) => {
                    for (dst, &src) in head[x.0].grad.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::StopGradient => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// dense matmul kernels

fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k,n] += a[k,m]^T-style: a is [m,k], so out += a^T * b` with b `[m,n]`
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution geometry and kernels

#[derive(Debug, Clone)]
struct ConvGeometry {
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl ConvGeometry {
    fn for_conv(
        op: &'static str,
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 || input[0] != kernels[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: fmt_shape(input),
                rhs: fmt_shape(kernels),
            });
        }
        let (c_in, in_h, in_w) = (input[0], input[1], input[2]);
        let (c_out, k_h, k_w) = (kernels[0], kernels[2], kernels[3]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(Error::KernelTooLarge {
                        op,
                        kernel: fmt_shape(kernels),
                        input: fmt_shape(input),
                    });
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            c_in,
            in_h,
            in_w,
            c_out,
            k_h,
            k_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
            stride,
        })
    }

    /// Geometry for the transpose, given the conv *output* shape. Restores
    /// the smallest input extents a matching conv2d could have consumed.
    fn for_transpose(
        op: &'static str,
        output: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if output.len() != 3 || kernels.len() != 4 || output[0] != kernels[0] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: fmt_shape(output),
                rhs: fmt_shape(kernels),
            });
        }
        let (out_h, out_w) = (output[1], output[2]);
        let (k_h, k_w) = (kernels[2], kernels[3]);
        let (in_h, in_w) = match padding {
            Padding::Same => ((out_h - 1) * stride + 1, (out_w - 1) * stride + 1),
            Padding::Valid => ((out_h - 1) * stride + k_h, (out_w - 1) * stride + k_w),
        };
        let geom = ConvGeometry::for_conv(
            op,
            &[kernels[1], in_h, in_w],
            kernels,
            stride,
            padding,
        )?;
        debug_assert_eq!((geom.out_h, geom.out_w), (out_h, out_w));
        Ok(geom)
    }
}

/// Valid output-column range for kernel column `kx` at stride 1: keeps
/// `ix = ox + kx - pad_left` inside `[0, in_w)`.
#[inline]
fn ox_range(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.pad_left.saturating_sub(kx);
    let hi = (g.in_w + g.pad_left).saturating_sub(kx).min(g.out_w);
    (lo, hi.max(lo))
}

/// Input row index for output row `oy` and kernel row `ky` at stride 1,
/// when inside the image.
#[inline]
fn in_row_at(g: &ConvGeometry, oy: usize, ky: usize) -> Option<usize> {
    let iy = (oy + ky) as isize - g.pad_top as isize;
    (iy >= 0 && (iy as usize) < g.in_h).then_some(iy as usize)
}

/// `out[co,oy,ox] += sum_{ci,ky,kx} in[ci, oy*s+ky-pt, ox*s+kx-pl] * k[co,ci,ky,kx]`
fn conv_forward<T: Scalar>(input: &[T], kernels: &[T], out: &mut [T], geom: &ConvGeometry) {
    let g = geom;
    if g.stride == 1 {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.k_h {
                    let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                    for oy in 0..g.out_h {
                        let Some(iy) = in_row_at(g, oy, ky) else { continue };
                        let in_row = &input[(ci * g.in_h + iy) * g.in_w..][..g.in_w];
                        let out_row = &mut out[(co * g.out_h + oy) * g.out_w..][..g.out_w];
                        for kx in 0..g.k_w {
                            let (lo, hi) = ox_range(g, kx);
                            if lo >= hi {
                                continue;
                            }
                            let k = kernels[k_base + kx];
                            let start = lo + kx - g.pad_left;
                            for (o, &i) in out_row[lo..hi].iter_mut().zip(&in_row[start..]) {
                                *o += k * i;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ci in 0..g.c_in {
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let in_base = (ci * g.in_h + iy as usize) * g.in_w;
                        let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += input[in_base + ix as usize] * kernels[k_base + kx];
                        }
                    }
                }
                out[(co * g.out_h + oy) * g.out_w + ox] += acc;
            }
        }
    }
}

/// Adjoint w.r.t. the conv input: scatter `gout[co,oy,ox]` through the kernels.
fn conv_input_adjoint<T: Scalar>(gout: &[T], kernels: &[T], dinput: &mut [T], geom: &ConvGeometry) {
    let g = geom;
    if g.stride == 1 {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.k_h {
                    let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                    for oy in 0..g.out_h {
                        let Some(iy) = in_row_at(g, oy, ky) else { continue };
                        let g_row = &gout[(co * g.out_h + oy) * g.out_w..][..g.out_w];
                        let din_row = &mut dinput[(ci * g.in_h + iy) * g.in_w..][..g.in_w];
                        for kx in 0..g.k_w {
                            let (lo, hi) = ox_range(g, kx);
                            if lo >= hi {
                                continue;
                            }
                            let k = kernels[k_base + kx];
                            let start = lo + kx - g.pad_left;
                            for (d, &gv) in din_row[start..].iter_mut().zip(&g_row[lo..hi]) {
                                *d += k * gv;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gv = gout[(co * g.out_h + oy) * g.out_w + ox];
                if gv.is_zero() {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let in_base = (ci * g.in_h + iy as usize) * g.in_w;
                        let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            dinput[in_base + ix as usize] += gv * kernels[k_base + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint w.r.t. the kernels.
fn conv_kernel_adjoint<T: Scalar>(gout: &[T], input: &[T], dkernels: &mut [T], geom: &ConvGeometry) {
    let g = geom;
    if g.stride == 1 {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.k_h {
                    let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                    for oy in 0..g.out_h {
                        let Some(iy) = in_row_at(g, oy, ky) else { continue };
                        let g_row = &gout[(co * g.out_h + oy) * g.out_w..][..g.out_w];
                        let in_row = &input[(ci * g.in_h + iy) * g.in_w..][..g.in_w];
                        for kx in 0..g.k_w {
                            let (lo, hi) = ox_range(g, kx);
                            if lo >= hi {
                                continue;
                            }
                            let start = lo + kx - g.pad_left;
                            let mut acc = T::zero();
                            for (&gv, &iv) in g_row[lo..hi].iter().zip(&in_row[start..]) {
                                acc += gv * iv;
                            }
                            dkernels[k_base + kx] += acc;
                        }
                    }
                }
            }
        }
        return;
    }
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gv = gout[(co * g.out_h + oy) * g.out_w + ox];
                if gv.is_zero() {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let in_base = (ci * g.in_h + iy as usize) * g.in_w;
                        let k_base = ((co * g.c_in + ci) * g.k_h + ky) * g.k_w;
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            dkernels[k_base + kx] += gv * input[in_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference checking

/// Compare the backward pass of `f` against central finite differences at
/// `point`, returning the worst relative error over all coordinates. The
/// relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<T, F>(f: &F, point: &Tensor<T>, epsilon: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    assert!(epsilon > T::zero(), "grad_check needs epsilon > 0");
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = f(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape.grad(x).clone();

    let floor = T::from_f64(1e-8);
    let two = T::from_f64(2.0);
    let mut worst = T::zero();
    for i in 0..point.numel() {
        let eval = |v: T| -> Result<T> {
            let mut p = point.clone();
            p.data_mut()[i] = v;
            let mut t = Tape::new();
            let xi = t.leaf(p);
            let r = f(&mut t, xi)?;
            Ok(t.value(r).item())
        };
        let base = point.data()[i];
        let numeric = (eval(base + epsilon)? - eval(base - epsilon)?) / (two * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    fn randn(rng: &mut StdRng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Resample away from relu/abs kinks by the given margin.
    fn randn_off_kink(rng: &mut StdRng, shape: Vec<usize>, margin: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > margin {
                return v;
            }
        })
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let id = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilation() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let z = tape.leaf(t(vec![2, 1], vec![0.0, 0.0]));
        let out = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[2x2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let b_fixed = randn(&mut rng, vec![4, 2]);
        let w = randn(&mut rng, vec![3, 2]);
        let point = randn(&mut rng, vec![3, 4]);
        // scalarize with fixed random weights so every output entry matters
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let b = tape.leaf(b_fixed.clone());
            let prod = tape.matmul(x, b)?;
            let wn = tape.leaf(w.clone());
            let weighted = tape.mul(prod, wn)?;
            Ok(tape.sum(weighted))
        };
        let err = grad_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
        // and through the right operand
        let a_fixed = randn(&mut rng, vec![3, 4]);
        let point_b = randn(&mut rng, vec![4, 2]);
        let w2 = randn(&mut rng, vec![3, 2]);
        let f2 = |tape: &mut Tape<f64>, x: NodeId| {
            let a = tape.leaf(a_fixed.clone());
            let prod = tape.matmul(a, x)?;
            let wn = tape.leaf(w2.clone());
            let weighted = tape.mul(prod, wn)?;
            Ok(tape.sum(weighted))
        };
        let err2 = grad_check(&f2, &point_b, 1e-5).unwrap();
        assert!(err2 < 1e-6, "relative error {err2}");
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let input = tape.leaf(t(vec![1, 3, 3], (1..=9).map(f64::from).collect()));
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // delta at center
        let kn = tape.leaf(k);
        let out = tape.conv2d(input, kn, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(input).data());
    }

    #[test]
    fn conv2d_zero_kernels_zero_output() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut tape = Tape::new();
        let input = tape.leaf(randn(&mut rng, vec![2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(vec![3, 2, 3, 3]));
        let out = tape.conv2d(input, k, 1, Padding::Same).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    /// Direct nested-loop cross-correlation, independent of the tape path.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernels: &Tensor<f64>,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
        out_h: usize,
        out_w: usize,
    ) -> Tensor<f64> {
        let (ci_n, in_h, in_w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co_n, k_h, k_w) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let mut out = Tensor::zeros(vec![co_n, out_h, out_w]);
        for co in 0..co_n {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..k_h {
                            for kx in 0..k_w {
                                let iy = (oy * stride + ky) as isize - pad_top as isize;
                                let ix = (ox * stride + kx) as isize - pad_left as isize;
                                if iy >= 0
                                    && (iy as usize) < in_h
                                    && ix >= 0
                                    && (ix as usize) < in_w
                                {
                                    let iv = input.data()
                                        [(ci * in_h + iy as usize) * in_w + ix as usize];
                                    let kv = kernels.data()
                                        [((co * ci_n + ci) * k_h + ky) * k_w + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let input = randn(&mut rng, vec![2, 5, 5]);
        let kernels = randn(&mut rng, vec![3, 2, 3, 3]);
        for (stride, padding) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same)] {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let k = tape.leaf(kernels.clone());
            let out = tape.conv2d(i, k, stride, padding).unwrap();
            let geom =
                ConvGeometry::for_conv("conv2d", input.shape(), kernels.shape(), stride, padding)
                    .unwrap();
            let expect = conv_oracle(
                &input,
                &kernels,
                stride,
                geom.pad_top,
                geom.pad_left,
                geom.out_h,
                geom.out_w,
            );
            for (a, b) in tape.value(out).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_valid_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(Tensor::zeros(vec![1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        let err = tape.conv2d(input, k, 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, Error::KernelTooLarge { .. }));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(19);
        let kernels = randn(&mut rng, vec![3, 2, 3, 3]);
        let input = randn(&mut rng, vec![2, 5, 5]);
        let w = randn(&mut rng, vec![3, 5, 5]);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let k = tape.leaf(kernels.clone());
            let c = tape.conv2d(x, k, 1, Padding::Same)?;
            let wn = tape.leaf(w.clone());
            let weighted = tape.mul(c, wn)?;
            Ok(tape.sum(weighted))
        };
        assert!(grad_check(&f, &input, 1e-5).unwrap() < 1e-6);

        let w2 = randn(&mut rng, vec![3, 3, 3]);
        let input2 = randn(&mut rng, vec![2, 5, 5]);
        let fk = |tape: &mut Tape<f64>, x: NodeId| {
            let i = tape.leaf(input2.clone());
            let c = tape.conv2d(i, x, 1, Padding::Valid)?;
            let wn = tape.leaf(w2.clone());
            let weighted = tape.mul(c, wn)?;
            Ok(tape.sum(weighted))
        };
        assert!(grad_check(&fk, &kernels, 1e-5).unwrap() < 1e-6);
    }

    /// Materialize a linear map `R^n -> R^m` as an explicit matrix by probing
    /// with basis vectors.
    fn materialize(
        apply: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        in_shape: Vec<usize>,
    ) -> Vec<Vec<f64>> {
        let n: usize = in_shape.iter().product();
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = Tensor::zeros(in_shape.clone());
            e.data_mut()[i] = 1.0;
            cols.push(apply(&e).data().to_vec());
        }
        // cols[i][j] = A[j][i]; return row-major A
        let m = cols[0].len();
        (0..m).map(|j| (0..n).map(|i| cols[i][j]).collect()).collect()
    }

    #[test]
    fn conv2d_transpose_is_adjoint_of_conv2d() {
        let mut rng = StdRng::seed_from_u64(23);
        let kernels = randn(&mut rng, vec![3, 2, 3, 3]);
        for (stride, padding) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same)] {
            let fwd = |x: &Tensor<f64>| {
                let mut tape = Tape::new();
                let i = tape.leaf(x.clone());
                let k = tape.leaf(kernels.clone());
                let o = tape.conv2d(i, k, stride, padding).unwrap();
                tape.value(o).clone()
            };
            let in_shape = vec![2, 5, 5];
            let out_shape = fwd(&Tensor::zeros(in_shape.clone())).shape().to_vec();
            let adj = |u: &Tensor<f64>| {
                let mut tape = Tape::new();
                let i = tape.leaf(u.clone());
                let k = tape.leaf(kernels.clone());
                let o = tape.conv2d_transpose(i, k, stride, padding).unwrap();
                tape.value(o).clone()
            };
            let a = materialize(fwd, in_shape.clone());
            let at = materialize(adj, out_shape);
            // A^T against materialized adjoint, entry by entry
            for (j, row) in a.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    assert!(
                        (v - at[i][j]).abs() < 1e-12,
                        "adjoint mismatch at ({i},{j}) stride {stride}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv2d_transpose_round_trips_shape() {
        let mut rng = StdRng::seed_from_u64(29);
        let mut tape = Tape::new();
        let input = tape.leaf(randn(&mut rng, vec![1, 4, 4]));
        let k = tape.leaf(randn(&mut rng, vec![2, 1, 3, 3]));
        let mid = tape.conv2d(input, k, 1, Padding::Same).unwrap();
        let back = tape.conv2d_transpose(mid, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(back).shape(), &[1, 4, 4]);
    }

    #[test]
    fn conv2d_transpose_zero_input_zero_output() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::zeros(vec![2, 4, 4]));
        let k = tape.leaf(randn(&mut rng, vec![2, 1, 3, 3]));
        let out = tape.conv2d_transpose(input, k, 1, Padding::Same).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_transpose_inconsistent_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(Tensor::zeros(vec![3, 4, 4]));
        let k = tape.leaf(Tensor::zeros(vec![2, 1, 3, 3])); // c_out 2 != 3
        assert!(tape.conv2d_transpose(input, k, 1, Padding::Same).is_err());
    }

    #[test]
    fn conv2d_transpose_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        let kernels = randn(&mut rng, vec![3, 2, 3, 3]);
        let w = randn(&mut rng, vec![2, 4, 4]);
        let input = randn(&mut rng, vec![3, 4, 4]);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let k = tape.leaf(kernels.clone());
            let c = tape.conv2d_transpose(x, k, 1, Padding::Same)?;
            let wn = tape.leaf(w.clone());
            let weighted = tape.mul(c, wn)?;
            Ok(tape.sum(weighted))
        };
        assert!(grad_check(&f, &input, 1e-5).unwrap() < 1e-6);

        let input2 = randn(&mut rng, vec![3, 4, 4]);
        let w2 = randn(&mut rng, vec![2, 6, 6]);
        let fk = |tape: &mut Tape<f64>, x: NodeId| {
            let i = tape.leaf(input2.clone());
            let c = tape.conv2d_transpose(i, x, 1, Padding::Valid)?;
            let wn = tape.leaf(w2.clone());
            let weighted = tape.mul(c, wn)?;
            Ok(tape.sum(weighted))
        };
        assert!(grad_check(&fk, &kernels, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn relu_and_tanh_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).item(), 0.0);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..50 {
            let p = randn_off_kink(&mut rng, vec![6], 1e-3);
            let w = randn(&mut rng, vec![6]);
            let f_relu = |tape: &mut Tape<f64>, x: NodeId| {
                let r = tape.relu(x);
                let wn = tape.leaf(w.clone());
                let m = tape.mul(r, wn)?;
                Ok(tape.sum(m))
            };
            assert!(grad_check(&f_relu, &p, 1e-5).unwrap() < 1e-6);
            let f_tanh = |tape: &mut Tape<f64>, x: NodeId| {
                let r = tape.tanh(x);
                let wn = tape.leaf(w.clone());
                let m = tape.mul(r, wn)?;
                Ok(tape.sum(m))
            };
            assert!(grad_check(&f_tanh, &p, 1e-5).unwrap() < 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        for c in [-3.0f64, 0.0, 1e6] {
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::full(vec![4], c));
            let s = tape.softmax(z);
            for &p in tape.value(s).data() {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_analytic_two_class() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2], vec![0.0, 2.0f64.ln()]));
        let s = tape.softmax(z);
        let p = tape.value(s).data();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = StdRng::seed_from_u64(43);
        let z = randn(&mut rng, vec![8]);
        let shifted = z.map(|v| v + 1000.0);
        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let n = tape.leaf(input);
            let s = tape.softmax(n);
            tape.value(s).clone()
        };
        let (a, b) = (run(z), run(shifted));
        let sum: f64 = a.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones_and_unreached_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(vec![3], vec![1.0, -2.0, 0.5]));
        let q = tape.leaf(t(vec![3], vec![5.0, 5.0, 5.0]));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(q).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(vec![2], vec![1.0, 2.0]));
        let r = tape.relu(p);
        assert!(matches!(
            tape.backward(r),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn encoder_decoder_style_chain_matches_finite_differences() {
        // conv -> relu -> flatten -> matmul -> tanh -> matmul -> reshape ->
        // half squared distance: the full op mix used by the models.
        let mut rng = StdRng::seed_from_u64(47);
        let obs = randn(&mut rng, vec![1, 4, 4]);
        let w1 = randn(&mut rng, vec![16, 6]);
        let w2 = randn(&mut rng, vec![6, 16]);
        let bias = randn(&mut rng, vec![2]);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let o = tape.leaf(obs.clone());
            let b = tape.leaf(bias.clone());
            let c = tape.conv2d(o, x, 1, Padding::Same)?;
            let cb = tape.channel_bias(c, b)?;
            let r = tape.relu(cb);
            let flat16 = tape.reshape(r, vec![2, 16])?;
            let w1n = tape.leaf(w1.clone());
            let m1 = tape.matmul(flat16, w1n)?;
            let th = tape.tanh(m1);
            let w2n = tape.leaf(w2.clone());
            let m2 = tape.matmul(th, w2n)?;
            let target = tape.leaf(Tensor::zeros(vec![2, 16]));
            tape.half_squared_distance(m2, target)
        };
        let kernels = randn(&mut rng, vec![2, 1, 3, 3]);
        let err = grad_check(&f, &kernels, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_quadratic_is_nearly_exact() {
        let mut rng = StdRng::seed_from_u64(53);
        let p = randn(&mut rng, vec![5]);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let sq = tape.mul(x, x)?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 0.5))
        };
        assert!(grad_check(&f, &p, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn grad_check_constant_function_is_zero() {
        let p = Tensor::<f64>::full(vec![3], 0.7);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let _ = x;
            let c = tape.leaf(Tensor::scalar(3.25));
            Ok(tape.sum(c))
        };
        assert_eq!(grad_check(&f, &p, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let mut rng = StdRng::seed_from_u64(59);
        let p = randn_off_kink(&mut rng, vec![10], 1e-2);
        let f = |tape: &mut Tape<f64>, x: NodeId| {
            let r = tape.relu(x);
            Ok(tape.sum(r))
        };
        assert!(grad_check(&f, &p, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn every_registered_op_passes_grad_check_at_smooth_points() {
        // one scalarized wrapper per differentiable op, checked at random
        // points kept a margin away from relu/abs/clamp kinks
        let mut rng = StdRng::seed_from_u64(61);
        type CheckFn = Box<dyn Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>>;
        let b_mat = randn(&mut rng, vec![3, 2]);
        let other = randn_off_kink(&mut rng, vec![6], 0.2);
        let kernels = randn(&mut rng, vec![2, 1, 3, 3]);
        let bias2 = randn(&mut rng, vec![1]);
        let cases: Vec<(&str, Vec<usize>, CheckFn)> = vec![
            ("matmul", vec![2, 3], {
                let b = b_mat.clone();
                Box::new(move |tape, x| {
                    let bn = tape.leaf(b.clone());
                    let m = tape.matmul(x, bn)?;
                    Ok(tape.sum(m))
                })
            }),
            ("conv2d", vec![1, 4, 4], {
                let k = kernels.clone();
                Box::new(move |tape, x| {
                    let kn = tape.leaf(k.clone());
                    let c = tape.conv2d(x, kn, 1, Padding::Same)?;
                    Ok(tape.sum(c))
                })
            }),
            ("conv2d_transpose", vec![2, 4, 4], {
                let k = kernels.clone();
                Box::new(move |tape, x| {
                    let kn = tape.leaf(k.clone());
                    let c = tape.conv2d_transpose(x, kn, 1, Padding::Same)?;
                    Ok(tape.sum(c))
                })
            }),
            ("channel_bias", vec![1, 3, 3], {
                let b = bias2.clone();
                Box::new(move |tape, x| {
                    let bn = tape.leaf(b.clone());
                    let c = tape.channel_bias(x, bn)?;
                    Ok(tape.sum(c))
                })
            }),
            ("add", vec![6], {
                let o = other.clone();
                Box::new(move |tape, x| {
                    let on = tape.leaf(o.clone());
                    let a = tape.add(x, on)?;
                    Ok(tape.sum(a))
                })
            }),
            ("sub", vec![6], {
                let o = other.clone();
                Box::new(move |tape, x| {
                    let on = tape.leaf(o.clone());
                    let a = tape.sub(x, on)?;
                    Ok(tape.sum(a))
                })
            }),
            ("mul", vec![6], {
                let o = other.clone();
                Box::new(move |tape, x| {
                    let on = tape.leaf(o.clone());
                    let a = tape.mul(x, on)?;
                    Ok(tape.sum(a))
                })
            }),
            ("div", vec![6], {
                let o = other.clone();
                Box::new(move |tape, x| {
                    let on = tape.leaf(o.clone());
                    let a = tape.div(x, on)?;
                    Ok(tape.sum(a))
                })
            }),
            (
                "scale",
                vec![6],
                Box::new(|tape, x| {
                    let s = tape.scale(x, -2.5);
                    Ok(tape.sum(s))
                }),
            ),
            (
                "add_const",
                vec![6],
                Box::new(|tape, x| {
                    let s = tape.add_const(x, 0.75);
                    Ok(tape.sum(s))
                }),
            ),
            (
                "relu",
                vec![6],
                Box::new(|tape, x| {
                    let r = tape.relu(x);
                    Ok(tape.sum(r))
                }),
            ),
            (
                "tanh",
                vec![6],
                Box::new(|tape, x| {
                    let r = tape.tanh(x);
                    Ok(tape.sum(r))
                }),
            ),
            (
                "abs",
                vec![6],
                Box::new(|tape, x| {
                    let r = tape.abs(x);
                    Ok(tape.sum(r))
                }),
            ),
            (
                "log",
                vec![6],
                Box::new(|tape, x| {
                    // keep the argument positive: log(2 + tanh(x)) stays smooth
                    let t = tape.tanh(x);
                    let shifted = tape.add_const(t, 2.0);
                    let l = tape.log(shifted);
                    Ok(tape.sum(l))
                }),
            ),
            (
                "clamp_min",
                vec![6],
                Box::new(|tape, x| {
                    let c = tape.clamp_min(x, 0.0);
                    Ok(tape.sum(c))
                }),
            ),
            ("softmax", vec![6], {
                let o = other.clone();
                Box::new(move |tape, x| {
                    let s = tape.softmax(x);
                    let on = tape.leaf(o.clone());
                    let m = tape.mul(s, on)?;
                    Ok(tape.sum(m))
                })
            }),
            (
                "sum",
                vec![6],
                Box::new(|tape, x| Ok(tape.sum(x))),
            ),
            (
                "pick",
                vec![6],
                Box::new(|tape, x| {
                    let p = tape.pick(x, 3)?;
                    let q = tape.pick(x, 0)?;
                    let m = tape.mul(p, q)?;
                    Ok(tape.sum(m))
                }),
            ),
            (
                "reshape",
                vec![6],
                Box::new(|tape, x| {
                    let r = tape.reshape(x, vec![2, 3])?;
                    let sq = tape.mul(r, r)?;
                    Ok(tape.sum(sq))
                }),
            ),
        ];
        for (name, shape, f) in &cases {
            for trial in 0..100 {
                let p = randn_off_kink(&mut rng, shape.clone(), 1e-3);
                let err = grad_check(f, &p, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn stop_gradient_blocks_backward() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(vec![2], vec![1.0, 2.0]));
        let s = tape.stop_gradient(p);
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(p).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(67);
        let input = randn(&mut rng, vec![2, 5, 5]);
        let kernels = randn(&mut rng, vec![3, 2, 3, 3]);
        let run = || {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone());
            let k = tape.leaf(kernels.clone());
            let c = tape.conv2d(i, k, 1, Padding::Same).unwrap();
            let r = tape.tanh(c);
            let s = tape.sum(r);
            tape.value(s).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_keeps_finite_values_on_finite_inputs() {
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..20 {
            let input = randn(&mut rng, vec![2, 4, 4]);
            let kernels = randn(&mut rng, vec![2, 2, 3, 3]);
            let mut tape = Tape::new();
            let i = tape.leaf(input);
            let k = tape.leaf(kernels);
            let c = tape.conv2d(i, k, 1, Padding::Same).unwrap();
            let r = tape.relu(c);
            let tr = tape.conv2d_transpose(r, k, 1, Padding::Same).unwrap();
            let th = tape.tanh(tr);
            let flat = tape.reshape(th, vec![2, 16]).unwrap();
            let sm = tape.softmax(flat);
            assert!(tape.value(sm).is_all_finite());
        }
    }
}
