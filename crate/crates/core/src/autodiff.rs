//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive's backward rule is expressed with other primitives and is
//! appended to the same tape, so the output of [`Tape::grad`] is itself a set
//! of recorded nodes that can be differentiated again. Differentiating a scalar
//! function of a parameter gradient with respect to the input data is therefore
//! two calls to `grad` on one tape (reverse-over-reverse).
//!
//! Piecewise-linear primitives (ReLU, max-pool) treat their selection pattern
//! as constant: the derivative of the ReLU mask, including at 0, is 0.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, PoolDims, Window};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of each primitive, used for diagnostics and the grad-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Square,
    Sum,
    Expand,
    Affine,
    ScalarMul,
    Powf,
    MatMul,
    BiasAdd,
    ChannelSum,
    ChannelExpand,
    Relu,
    Sigmoid,
    Conv2d,
    Conv2dInputGrad,
    Conv2dKernelGrad,
    AvgPool,
    AvgPoolAdjoint,
    Gather,
    Scatter,
    Reshape,
    Softmax,
    LogSoftmax,
    RowSum,
    RowExpand,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Expand => "expand",
            OpKind::Affine => "affine",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Powf => "powf",
            OpKind::MatMul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::ChannelSum => "channel_sum",
            OpKind::ChannelExpand => "channel_expand",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv2dInputGrad => "conv2d_input_grad",
            OpKind::Conv2dKernelGrad => "conv2d_kernel_grad",
            OpKind::AvgPool => "avg_pool",
            OpKind::AvgPoolAdjoint => "avg_pool_adjoint",
            OpKind::Gather => "gather",
            OpKind::Scatter => "scatter",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::RowSum => "row_sum",
            OpKind::RowExpand => "row_expand",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Sum(Var),
    Expand(Var),
    Affine { x: Var, scale: f64, shift: f64 },
    ScalarMul { s: Var, x: Var },
    Powf { x: Var, p: f64 },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BiasAdd { x: Var, b: Var },
    ChannelSum(Var),
    ChannelExpand(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, k: Var, dims: ConvDims },
    Conv2dInputGrad { g: Var, k: Var, dims: ConvDims },
    Conv2dKernelGrad { x: Var, g: Var, dims: ConvDims },
    AvgPool { x: Var, dims: PoolDims },
    AvgPoolAdjoint { g: Var, dims: PoolDims },
    Gather { x: Var, idx: Rc<[usize]> },
    Scatter { x: Var, idx: Rc<[usize]> },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowSum(Var),
    RowExpand(Var),
    CrossEntropy { logits: Var, targets: Var, probs: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Expand(_) => OpKind::Expand,
            Op::Affine { .. } => OpKind::Affine,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::Powf { .. } => OpKind::Powf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::ChannelSum(_) => OpKind::ChannelSum,
            Op::ChannelExpand(_) => OpKind::ChannelExpand,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv2dInputGrad { .. } => OpKind::Conv2dInputGrad,
            Op::Conv2dKernelGrad { .. } => OpKind::Conv2dKernelGrad,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::AvgPoolAdjoint { .. } => OpKind::AvgPoolAdjoint,
            Op::Gather { .. } => OpKind::Gather,
            Op::Scatter { .. } => OpKind::Scatter,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::RowSum(_) => OpKind::RowSum,
            Op::RowExpand(_) => OpKind::RowExpand,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Square(x)
            | Op::Sum(x)
            | Op::Expand(x)
            | Op::ChannelSum(x)
            | Op::ChannelExpand(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::RowSum(x)
            | Op::RowExpand(x) => vec![x],
            Op::Affine { x, .. } | Op::Powf { x, .. } => vec![x],
            Op::ScalarMul { s, x } => vec![s, x],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::BiasAdd { x, b } => vec![x, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::Conv2dInputGrad { g, k, .. } => vec![g, k],
            Op::Conv2dKernelGrad { x, g, .. } => vec![x, g],
            Op::AvgPool { x, .. } => vec![x],
            Op::AvgPoolAdjoint { g, .. } => vec![g],
            Op::Gather { x, .. } | Op::Scatter { x, .. } => vec![x],
            Op::CrossEntropy { logits, targets, probs } => vec![logits, targets, probs],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

thread_local! {
    static SIGN_FLIP: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` deliberately sign-flipped on this
/// thread. Only meant for testing the grad-check harness.
#[doc(hidden)]
pub fn with_backward_sign_flip<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            SIGN_FLIP.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(SIGN_FLIP.with(|c| c.replace(Some(kind))));
    f()
}

/// Append-only record of primitive operations, topologically ordered by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Records an input. Whether it is differentiated is decided by the `wrt`
    /// argument of [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    /// Replaces the value of a leaf; downstream nodes keep their old values
    /// until [`Tape::replay`] is called.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", format!("{:?}", node.value.shape()), format!("{:?}", value.shape())));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node from its recorded inputs, in order.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].value = self.eval(&op, &shape);
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let value = self.eval(&op, &shape);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn eval(&self, op: &Op, shape: &[usize]) -> Tensor {
        let out = |data: Vec<f64>| Tensor::from_parts(shape.to_vec(), data);
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x + y),
            Op::Sub(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x - y),
            Op::Mul(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x * y),
            Op::Square(x) => self.v(*x).map(|v| v * v),
            Op::Sum(x) => Tensor::scalar(self.v(*x).sum()),
            Op::Expand(x) => Tensor::full(shape, self.v(*x).item()),
            Op::Affine { x, scale, shift } => self.v(*x).map(|v| scale * v + shift),
            Op::ScalarMul { s, x } => {
                let s = self.v(*s).item();
                self.v(*x).map(|v| s * v)
            }
            Op::Powf { x, p } => self.v(*x).map(|v| v.powf(*p)),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let ad = (av.shape()[0], av.shape()[1]);
                let bd = (bv.shape()[0], bv.shape()[1]);
                out(kernels::matmul(av.data(), ad, *ta, bv.data(), bd, *tb).0)
            }
            Op::BiasAdd { x, b } => {
                let (xv, bv) = (self.v(*x), self.v(*b));
                let c = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let mut data = xv.data().to_vec();
                for (i, v) in data.iter_mut().enumerate() {
                    *v += bv.data()[(i / inner) % c];
                }
                out(data)
            }
            Op::ChannelSum(x) => {
                let xv = self.v(*x);
                let c = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let mut data = vec![0.0; c];
                for (i, &v) in xv.data().iter().enumerate() {
                    data[(i / inner) % c] += v;
                }
                out(data)
            }
            Op::ChannelExpand(x) => {
                let xv = self.v(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let n: usize = shape.iter().product();
                out((0..n).map(|i| xv.data()[(i / inner) % c]).collect())
            }
            Op::Relu(x) => self.v(*x).map(|v| v.max(0.0)),
            Op::Sigmoid(x) => self.v(*x).map(kernels::sigmoid),
            Op::Conv2d { x, k, dims } => out(kernels::conv2d(self.v(*x).data(), self.v(*k).data(), dims)),
            Op::Conv2dInputGrad { g, k, dims } => {
                out(kernels::conv2d_input_grad(self.v(*g).data(), self.v(*k).data(), dims))
            }
            Op::Conv2dKernelGrad { x, g, dims } => {
                out(kernels::conv2d_kernel_grad(self.v(*x).data(), self.v(*g).data(), dims))
            }
            Op::AvgPool { x, dims } => out(kernels::avg_pool(self.v(*x).data(), dims)),
            Op::AvgPoolAdjoint { g, dims } => out(kernels::avg_pool_adjoint(self.v(*g).data(), dims)),
            Op::Gather { x, idx } => {
                let xv = self.v(*x).data();
                out(idx.iter().map(|&i| xv[i]).collect())
            }
            Op::Scatter { x, idx } => {
                let mut data = vec![0.0; shape.iter().product()];
                for (&i, &v) in idx.iter().zip(self.v(*x).data()) {
                    data[i] += v;
                }
                out(data)
            }
            Op::Reshape(x) => out(self.v(*x).data().to_vec()),
            Op::Softmax(x) => out(kernels::softmax_rows(self.v(*x).data(), shape[1])),
            Op::LogSoftmax(x) => out(kernels::log_softmax_rows(self.v(*x).data(), shape[1])),
            Op::RowSum(x) => {
                let xv = self.v(*x);
                let cols = xv.shape()[1];
                out(xv.data().chunks(cols).map(|r| r.iter().sum()).collect())
            }
            Op::RowExpand(x) => {
                let xv = self.v(*x).data();
                let cols = shape[1];
                out((0..shape[0] * cols).map(|i| xv[i / cols]).collect())
            }
            Op::CrossEntropy { logits, targets, .. } => {
                let z = self.v(*logits);
                let (b, c) = (z.shape()[0], z.shape()[1]);
                let ls = kernels::log_softmax_rows(z.data(), c);
                let total: f64 = ls.iter().zip(self.v(*targets).data()).map(|(l, y)| l * y).sum();
                Tensor::scalar(-total / b as f64)
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{:?}", sa), format!("{:?}", sb)));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        self.push(Op::Square(x), s)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x), Vec::new())
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.v(x).len() != 1 {
            return Err(Error::shape("expand", "one element", format!("{:?}", self.shape(x))));
        }
        Ok(self.push(Op::Expand(x), shape.to_vec()))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let s = self.shape(x).to_vec();
        self.push(Op::Affine { x, scale, shift }, s)
    }

    pub fn scale(&mut self, x: Var, by: f64) -> Var {
        self.affine(x, by, 0.0)
    }

    /// Multiplies `x` by the one-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.v(s).len() != 1 {
            return Err(Error::shape("scalar_mul", "one element", format!("{:?}", self.shape(s))));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ScalarMul { s, x }, shape))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let s = self.shape(x).to_vec();
        self.push(Op::Powf { x, p }, s)
    }

    /// `op(a) @ op(b)` for 2-D operands, where `op` transposes when its flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", "2-D operands", format!("{:?} and {:?}", sa, sb)));
        }
        let (m, k1) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k1 != k2 {
            return Err(Error::shape("matmul", format!("inner dimension {}", k1), format!("inner dimension {}", k2)));
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds a per-channel bias `[C]` to `x` of shape `[B, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("bias_add", format!("bias of length {:?}", sx.get(1)), format!("{:?}", sb)));
        }
        let s = sx.to_vec();
        Ok(self.push(Op::BiasAdd { x, b }, s))
    }

    fn channel_sum(&mut self, x: Var) -> Var {
        let c = self.shape(x)[1];
        self.push(Op::ChannelSum(x), vec![c])
    }

    fn channel_expand(&mut self, x: Var, shape: &[usize]) -> Var {
        self.push(Op::ChannelExpand(x), shape.to_vec())
    }

    /// Hash of every piecewise selection on the tape: ReLU input signs and
    /// max-pool winners. Two points with equal hashes lie on the same smooth
    /// piece (up to hash collisions).
    pub fn selection_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.v(*x).data().iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                Op::Gather { idx, .. } => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        self.push(Op::Sigmoid(x), s)
    }

    /// 2-D convolution (cross-correlation) of `x: [B, Ci, H, W]` with `k: [Co, Ci, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, win: Window) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input [B, {}, H, W]", sk.get(1).copied().unwrap_or(0)),
                format!("{:?}", sx),
            ));
        }
        let (oh, ow) = match (conv_out(sx[2], sk[2], win), conv_out(sx[3], sk[3], win)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv2d", "input at least as large as the kernel", format!("{:?}", sx))),
        };
        let dims = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sk[0],
            k_h: sk[2],
            k_w: sk[3],
            out_h: oh,
            out_w: ow,
            win,
        };
        Ok(self.push(Op::Conv2d { x, k, dims }, dims.output_shape().to_vec()))
    }

    pub fn avg_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = self.pool_dims("avg_pool", x, size, stride)?;
        let mut s = self.shape(x).to_vec();
        s[2] = dims.out_h;
        s[3] = dims.out_w;
        Ok(self.push(Op::AvgPool { x, dims }, s))
    }

    pub fn max_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = self.pool_dims("max_pool", x, size, stride)?;
        let idx: Rc<[usize]> = kernels::max_pool_argmax(self.v(x).data(), &dims).into();
        let mut s = self.shape(x).to_vec();
        s[2] = dims.out_h;
        s[3] = dims.out_w;
        Ok(self.push(Op::Gather { x, idx }, s))
    }

    fn pool_dims(&self, op: &'static str, x: Var, size: usize, stride: usize) -> Result<PoolDims> {
        let s = self.shape(x);
        if s.len() != 4 || size == 0 || stride == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(op, format!("[B, C, H>={size}, W>={size}]"), format!("{:?}", s)));
        }
        Ok(PoolDims {
            planes: s[0] * s[1],
            in_h: s[2],
            in_w: s[3],
            size,
            stride,
            out_h: (s[2] - size) / stride + 1,
            out_w: (s[3] - size) / stride + 1,
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.v(x).len() {
            return Err(Error::shape("reshape", format!("{} elements", self.v(x).len()), format!("{:?}", shape)));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    /// Flattens `[B, ...]` into `[B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let b = self.v(x).batch();
        let w = self.v(x).row_len();
        self.reshape(x, &[b, w])
    }

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, "[rows, cols]", format!("{:?}", s))),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols("softmax", x)?;
        Ok(self.push(Op::Softmax(x), vec![r, c]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols("log_softmax", x)?;
        Ok(self.push(Op::LogSoftmax(x), vec![r, c]))
    }

    fn row_sum(&mut self, x: Var) -> Var {
        let r = self.shape(x)[0];
        self.push(Op::RowSum(x), vec![r])
    }

    fn row_expand(&mut self, x: Var, cols: usize) -> Var {
        let r = self.shape(x)[0];
        self.push(Op::RowExpand(x), vec![r, cols])
    }

    /// Mean over the batch of `-sum_c targets * log_softmax(logits)`.
    /// `targets` holds one-hot or soft label rows with the shape of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (r, c) = self.rows_cols("cross_entropy", logits)?;
        if self.shape(targets) != [r, c] {
            return Err(Error::shape("cross_entropy", format!("targets [{r}, {c}]"), format!("{:?}", self.shape(targets))));
        }
        let probs = self.push(Op::Softmax(logits), vec![r, c]);
        Ok(self.push(Op::CrossEntropy { logits, targets, probs }, Vec::new()))
    }

    /// Gradients of the one-element node `y` with respect to each of `wrt`.
    ///
    /// The backward computation is recorded on this tape, so the returned
    /// nodes can themselves be differentiated. Inputs that `y` does not depend
    /// on receive a zero constant.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.v(y).len() != 1 {
            return Err(Error::shape("grad", "scalar output", format!("{:?}", self.shape(y))));
        }
        let n = y.0 + 1;
        let mut on_path = vec![false; n];
        for w in wrt {
            if w.0 < n {
                on_path[w.0] = true;
            }
        }
        for i in 0..n {
            if !on_path[i] {
                on_path[i] = self.nodes[i].op.inputs().iter().any(|v| on_path[v.0]);
            }
        }
        let flip = SIGN_FLIP.with(|c| c.get());
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed_shape = self.shape(y).to_vec();
        adj[y.0] = Some(self.leaf(Tensor::ones(&seed_shape)));
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let mut contribs = self.backward(Var(i), &op, g, &on_path)?;
            if flip == Some(op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    *c = self.scale(*c, -1.0);
                }
            }
            for (target, c) in contribs {
                adj[target.0] = Some(match adj[target.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.leaf(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Adjoint contributions of node `out` (with upstream adjoint `g`) to each
    /// of its inputs that lies on a differentiation path.
    fn backward(&mut self, out: Var, op: &Op, g: Var, on_path: &[bool]) -> Result<Vec<(Var, Var)>> {
        let need = |v: Var| on_path[v.0];
        let mut c = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    c.push((a, g));
                }
                if need(b) {
                    c.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    c.push((a, g));
                }
                if need(b) {
                    c.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    c.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    c.push((b, self.mul(g, a)?));
                }
            }
            Op::Square(x) => {
                let two_x = self.scale(x, 2.0);
                c.push((x, self.mul(g, two_x)?));
            }
            Op::Sum(x) => {
                let s = self.shape(x).to_vec();
                c.push((x, self.expand(g, &s)?));
            }
            Op::Expand(x) => {
                let s = self.sum(g);
                let s = if self.shape(x).is_empty() { s } else { self.reshape(s, &self.shape(x).to_vec())? };
                c.push((x, s));
            }
            Op::Affine { x, scale, .. } => c.push((x, self.scale(g, scale))),
            Op::ScalarMul { s, x } => {
                if need(x) {
                    c.push((x, self.scalar_mul(s, g)?));
                }
                if need(s) {
                    let gx = self.mul(g, x)?;
                    let mut d = self.sum(gx);
                    if !self.shape(s).is_empty() {
                        d = self.reshape(d, &self.shape(s).to_vec())?;
                    }
                    c.push((s, d));
                }
            }
            Op::Powf { x, p } => {
                let pm1 = self.powf(x, p - 1.0);
                let d = self.scale(pm1, p);
                c.push((x, self.mul(g, d)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let d = if ta { self.matmul_t(b, g, tb, true)? } else { self.matmul_t(g, b, false, !tb)? };
                    c.push((a, d));
                }
                if need(b) {
                    let d = if tb { self.matmul_t(g, a, true, ta)? } else { self.matmul_t(a, g, !ta, false)? };
                    c.push((b, d));
                }
            }
            Op::BiasAdd { x, b } => {
                if need(x) {
                    c.push((x, g));
                }
                if need(b) {
                    c.push((b, self.channel_sum(g)));
                }
            }
            Op::ChannelSum(x) => {
                let s = self.shape(x).to_vec();
                c.push((x, self.channel_expand(g, &s)));
            }
            Op::ChannelExpand(x) => c.push((x, self.channel_sum(g))),
            Op::Relu(x) => {
                let mask = self.v(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                c.push((x, self.mul(g, mask)?));
            }
            Op::Sigmoid(x) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let d = self.mul(out, one_minus)?;
                c.push((x, self.mul(g, d)?));
            }
            Op::Conv2d { x, k, dims } => {
                if need(x) {
                    c.push((x, self.push(Op::Conv2dInputGrad { g, k, dims }, dims.input_shape().to_vec())));
                }
                if need(k) {
                    c.push((k, self.push(Op::Conv2dKernelGrad { x, g, dims }, dims.kernel_shape().to_vec())));
                }
            }
            Op::Conv2dInputGrad { g: h, k, dims } => {
                if need(h) {
                    c.push((h, self.push(Op::Conv2d { x: g, k, dims }, dims.output_shape().to_vec())));
                }
                if need(k) {
                    c.push((k, self.push(Op::Conv2dKernelGrad { x: g, g: h, dims }, dims.kernel_shape().to_vec())));
                }
            }
            Op::Conv2dKernelGrad { x, g: h, dims } => {
                if need(x) {
                    c.push((x, self.push(Op::Conv2dInputGrad { g: h, k: g, dims }, dims.input_shape().to_vec())));
                }
                if need(h) {
                    c.push((h, self.push(Op::Conv2d { x, k: g, dims }, dims.output_shape().to_vec())));
                }
            }
            Op::AvgPool { x, dims } => {
                let s = self.shape(x).to_vec();
                c.push((x, self.push(Op::AvgPoolAdjoint { g, dims }, s)));
            }
            Op::AvgPoolAdjoint { g: h, dims } => {
                let s = self.shape(h).to_vec();
                c.push((h, self.push(Op::AvgPool { x: g, dims }, s)));
            }
            Op::Gather { x, ref idx } => {
                let s = self.shape(x).to_vec();
                c.push((x, self.push(Op::Scatter { x: g, idx: idx.clone() }, s)));
            }
            Op::Scatter { x, ref idx } => {
                let s = self.shape(x).to_vec();
                c.push((x, self.push(Op::Gather { x: g, idx: idx.clone() }, s)));
            }
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                c.push((x, self.reshape(g, &s)?));
            }
            Op::Softmax(x) => {
                let cols = self.shape(x)[1];
                let gy = self.mul(g, out)?;
                let rs = self.row_sum(gy);
                let re = self.row_expand(rs, cols);
                let centered = self.sub(g, re)?;
                c.push((x, self.mul(out, centered)?));
            }
            Op::LogSoftmax(x) => {
                let cols = self.shape(x)[1];
                let p = self.softmax(x)?;
                let rs = self.row_sum(g);
                let re = self.row_expand(rs, cols);
                let pr = self.mul(p, re)?;
                c.push((x, self.sub(g, pr)?));
            }
            Op::RowSum(x) => {
                let cols = self.shape(x)[1];
                c.push((x, self.row_expand(g, cols)));
            }
            Op::RowExpand(x) => c.push((x, self.row_sum(g))),
            Op::CrossEntropy { logits, targets, probs } => {
                let (b, cols) = (self.shape(logits)[0], self.shape(logits)[1]);
                let inv_b = 1.0 / b as f64;
                if need(logits) || need(probs) {
                    let mass = self.row_sum(targets);
                    let mass = self.row_expand(mass, cols);
                    let pm = self.mul(probs, mass)?;
                    let diff = self.sub(pm, targets)?;
                    let diff = self.scale(diff, inv_b);
                    c.push((logits, self.scalar_mul(g, diff)?));
                }
                if need(targets) {
                    let ls = self.log_softmax(logits)?;
                    let ls = self.scale(ls, -inv_b);
                    c.push((targets, self.scalar_mul(g, ls)?));
                }
            }
        }
        Ok(c)
    }
}

fn conv_out(input: usize, kernel: usize, win: Window) -> Option<usize> {
    kernels::conv_out_len(input, kernel, win)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn first_derivative_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.square(x);
        let y = tape.sum(sq);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.value(g[0]).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube_via_double_grad() {
        // y = sum(x^3); dy/dx = 3x^2; d/dx sum(3x^2) = 6x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -0.5]));
        let c = tape.powf(x, 3.0);
        let y = tape.sum(c);
        let g = tape.grad(y, &[x]).unwrap()[0];
        let s = tape.sum(g);
        let h = tape.grad(s, &[x]).unwrap()[0];
        let hv = tape.value(h).data();
        assert!((hv[0] - 9.0).abs() < 1e-12);
        assert!((hv[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let z = tape.leaf(t(&[2], &[3.0, 4.0]));
        let y = tape.sum(x);
        let g = tape.grad(y, &[x, z]).unwrap();
        assert_eq!(tape.value(g[1]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
        let c = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn replay_reproduces_values_bit_identically() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 4, 4], &(0..16).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>()));
        let k = tape.leaf(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>()));
        let y = tape.conv2d(x, k, Window { stride: 1, pad: 1 }).unwrap();
        let y = tape.sigmoid(y);
        let y = tape.max_pool(y, 2, 2).unwrap();
        let y = tape.sum(y);
        let before: Vec<Tensor> = (0..tape.len()).map(|i| tape.value(Var(i)).clone()).collect();
        tape.replay();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(tape.value(Var(i)).data(), b.data());
        }
        let _ = y;
    }

    #[test]
    fn sign_flip_fixture_is_scoped() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1], &[2.0]));
            let s = tape.square(x);
            let y = tape.sum(s);
            let g = tape.grad(y, &[x]).unwrap()[0];
            tape.value(g).item()
        };
        assert_eq!(with_backward_sign_flip(OpKind::Square, run), -4.0);
        assert_eq!(run(), 4.0);
    }
}
