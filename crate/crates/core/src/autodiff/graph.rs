use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvDims};
use super::{AutodiffError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation tags, as used in error reports and by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv1d,
    MaxPool1d,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Mean,
    Variance,
    Sum,
    Slice,
    Concat,
    DropoutMaskApply,
    Reshape,
}

impl OpTag {
    /// Every differentiable primitive.
    pub const PRIMITIVES: [OpTag; 22] = [
        OpTag::Add,
        OpTag::Sub,
        OpTag::Mul,
        OpTag::Div,
        OpTag::MatMul,
        OpTag::Conv1d,
        OpTag::MaxPool1d,
        OpTag::Sigmoid,
        OpTag::Tanh,
        OpTag::Relu,
        OpTag::Softplus,
        OpTag::Exp,
        OpTag::Log,
        OpTag::Square,
        OpTag::Sqrt,
        OpTag::Mean,
        OpTag::Variance,
        OpTag::Sum,
        OpTag::Slice,
        OpTag::Concat,
        OpTag::DropoutMaskApply,
        OpTag::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpTag::Leaf => "leaf",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Div => "div",
            OpTag::MatMul => "matmul",
            OpTag::Conv1d => "conv1d",
            OpTag::MaxPool1d => "maxpool1d",
            OpTag::Sigmoid => "sigmoid",
            OpTag::Tanh => "tanh",
            OpTag::Relu => "relu",
            OpTag::Softplus => "softplus",
            OpTag::Exp => "exp",
            OpTag::Log => "log",
            OpTag::Square => "square",
            OpTag::Sqrt => "sqrt",
            OpTag::Mean => "mean",
            OpTag::Variance => "variance",
            OpTag::Sum => "sum",
            OpTag::Slice => "slice",
            OpTag::Concat => "concat",
            OpTag::DropoutMaskApply => "dropout-mask-apply",
            OpTag::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpTag {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(OpTag::Leaf)
            .chain(OpTag::PRIMITIVES)
            .find(|t| t.name() == s)
            .ok_or_else(|| AutodiffError::UnknownOp(s.to_string()))
    }
}

/// Attributes for [`Graph::apply`]. Only the fields an op reads matter.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    /// Reduction, slice or concat axis. `None` reduces over everything.
    pub axis: Option<usize>,
    pub start: usize,
    pub end: usize,
    pub pool: usize,
    pub ddof: usize,
    pub mask: Option<Tensor>,
    pub shape: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum ReduceKind {
    Sum,
    Mean,
    Variance { ddof: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    MatMul { a: Var, b: Var },
    Conv1d { input: Var, kernel: Var, bias: Option<Var>, dims: ConvDims },
    MaxPool1d { input: Var, argmax: Vec<usize> },
    Unary { kind: UnaryKind, x: Var },
    Reduce { kind: ReduceKind, x: Var, axis: Option<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Mask { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse-mode tape. Nodes are appended in topological order; `backward`
/// walks them in reverse and then releases every non-leaf value.
///
/// Each graph owns a seeded RNG so noise and dropout masks drawn while
/// building it can be replayed exactly.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
    rng: ChaCha8Rng,
    consumed: bool,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Forward value of a node.
    ///
    /// Panics if the node is a non-leaf whose value was released by
    /// [`Graph::backward`]; see [`Graph::try_value`].
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v).expect("node value released by backward")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or(AutodiffError::Released { node: v.0 })
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of a `requires_grad` leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, tag: OpTag, op: Op, inputs: &[Var], value: Tensor) -> Result<Var, AutodiffError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: tag, node });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(node))
    }

    fn check_live(&self) -> Result<(), AutodiffError> {
        if self.consumed {
            Err(AutodiffError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    /// Dispatches a primitive by tag.
    pub fn apply(&mut self, tag: OpTag, inputs: &[Var], attrs: &OpAttrs) -> Result<Var, AutodiffError> {
        let arity = |n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity { op: tag, expected: n, got: inputs.len() })
            }
        };
        match tag {
            OpTag::Add | OpTag::Sub | OpTag::Mul | OpTag::Div | OpTag::MatMul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match tag {
                    OpTag::Add => self.add(a, b),
                    OpTag::Sub => self.sub(a, b),
                    OpTag::Mul => self.mul(a, b),
                    OpTag::Div => self.div(a, b),
                    _ => self.matmul(a, b),
                }
            }
            OpTag::Conv1d => match inputs.len() {
                2 => self.conv1d(inputs[0], inputs[1], None),
                3 => self.conv1d(inputs[0], inputs[1], Some(inputs[2])),
                got => Err(AutodiffError::Arity { op: tag, expected: 3, got }),
            },
            OpTag::MaxPool1d => {
                arity(1)?;
                self.maxpool1d(inputs[0], attrs.pool)
            }
            OpTag::Sigmoid => self.unary_tagged(tag, UnaryKind::Sigmoid, inputs),
            OpTag::Tanh => self.unary_tagged(tag, UnaryKind::Tanh, inputs),
            OpTag::Relu => self.unary_tagged(tag, UnaryKind::Relu, inputs),
            OpTag::Softplus => self.unary_tagged(tag, UnaryKind::Softplus, inputs),
            OpTag::Exp => self.unary_tagged(tag, UnaryKind::Exp, inputs),
            OpTag::Log => self.unary_tagged(tag, UnaryKind::Log, inputs),
            OpTag::Square => self.unary_tagged(tag, UnaryKind::Square, inputs),
            OpTag::Sqrt => self.unary_tagged(tag, UnaryKind::Sqrt, inputs),
            OpTag::Sum => {
                arity(1)?;
                self.reduce(OpTag::Sum, ReduceKind::Sum, inputs[0], attrs.axis)
            }
            OpTag::Mean => {
                arity(1)?;
                self.reduce(OpTag::Mean, ReduceKind::Mean, inputs[0], attrs.axis)
            }
            OpTag::Variance => {
                arity(1)?;
                self.reduce(
                    OpTag::Variance,
                    ReduceKind::Variance { ddof: attrs.ddof },
                    inputs[0],
                    attrs.axis,
                )
            }
            OpTag::Slice => {
                arity(1)?;
                self.slice(inputs[0], attrs.axis.unwrap_or(0), attrs.start, attrs.end)
            }
            OpTag::Concat => self.concat(inputs, attrs.axis.unwrap_or(0)),
            OpTag::DropoutMaskApply => {
                arity(1)?;
                let mask = attrs.mask.clone().ok_or_else(|| AutodiffError::InvalidAttr {
                    op: tag,
                    detail: "missing mask".into(),
                })?;
                self.apply_mask(inputs[0], mask)
            }
            OpTag::Reshape => {
                arity(1)?;
                let shape = attrs.shape.clone().ok_or_else(|| AutodiffError::InvalidAttr {
                    op: tag,
                    detail: "missing shape".into(),
                })?;
                self.reshape(inputs[0], shape)
            }
            OpTag::Leaf => Err(AutodiffError::UnsupportedOp(tag)),
        }
    }

    fn unary_tagged(&mut self, tag: OpTag, kind: UnaryKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if inputs.len() != 1 {
            return Err(AutodiffError::Arity { op: tag, expected: 1, got: inputs.len() });
        }
        self.unary(tag, kind, inputs[0])
    }

    // ----- elementwise binary -------------------------------------------------

    fn binary(&mut self, tag: OpTag, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let va = self.value(a);
        let vb = self.value(b);
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            AutodiffError::ShapeMismatch {
                op: tag,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            }
        })?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            kernels::for_each_broadcast(&out_shape, va.shape(), vb.shape(), |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
            out
        };
        self.push(tag, Op::Binary { kind, a, b }, &[a, b], Tensor::from_parts(out_shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(OpTag::Add, BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(OpTag::Sub, BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(OpTag::Mul, BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(OpTag::Div, BinaryKind::Div, a, b)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var, AutodiffError> {
        let s = self.scalar(c);
        self.sub(s, a)
    }

    // ----- linear algebra -----------------------------------------------------

    /// `[m, k] @ [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: OpTag::MatMul,
                detail: format!("{sa:?} @ {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        self.push(OpTag::MatMul, Op::MatMul { a, b }, &[a, b], Tensor::from_parts(vec![m, n], data))
    }

    /// Stride-1 convolution with "same" zero padding.
    ///
    /// `input: [batch, in_ch, len]`, `kernel: [out_ch, in_ch, k]`, `bias: [out_ch]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (si, sk) = (vi.shape(), vk.shape());
        let mismatch = |detail: String| AutodiffError::ShapeMismatch { op: OpTag::Conv1d, detail };
        if si.len() != 3 || sk.len() != 3 || si[1] != sk[1] {
            return Err(mismatch(format!("input {si:?}, kernel {sk:?}")));
        }
        let dims = ConvDims {
            batch: si[0],
            in_channels: si[1],
            out_channels: sk[0],
            length: si[2],
            kernel: sk[2],
        };
        let bias_data = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [dims.out_channels] {
                    return Err(mismatch(format!("bias {:?}", vb.shape())));
                }
                Some(vb.data())
            }
            None => None,
        };
        let data = kernels::conv1d(vi.data(), vk.data(), bias_data, dims);
        let shape = vec![dims.batch, dims.out_channels, dims.length];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            OpTag::Conv1d,
            Op::Conv1d { input, kernel, bias, dims },
            &inputs,
            Tensor::from_parts(shape, data),
        )
    }

    /// Non-overlapping max pooling along the last axis. The last axis must be
    /// divisible by `size`.
    pub fn maxpool1d(&mut self, input: Var, size: usize) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vi = self.value(input);
        let shape = vi.shape();
        let len = *shape.last().expect("non-empty shape");
        if size == 0 || len % size != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: OpTag::MaxPool1d,
                detail: format!("length {len} not divisible by pool {size}"),
            });
        }
        let rows = vi.len() / len;
        let (data, argmax) = kernels::maxpool1d(vi.data(), rows, len, size);
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len / size;
        self.push(
            OpTag::MaxPool1d,
            Op::MaxPool1d { input, argmax },
            &[input],
            Tensor::from_parts(out_shape, data),
        )
    }

    // ----- elementwise unary --------------------------------------------------

    fn unary(&mut self, tag: OpTag, kind: UnaryKind, x: Var) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vx = self.value(x);
        let f = |v: f64| match kind {
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
        };
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(tag, Op::Unary { kind, x }, &[x], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Sigmoid, UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Tanh, UnaryKind::Tanh, x)
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Relu, UnaryKind::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Softplus, UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Exp, UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Log, UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Square, UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(OpTag::Sqrt, UnaryKind::Sqrt, x)
    }

    // ----- reductions ---------------------------------------------------------

    fn reduce(&mut self, tag: OpTag, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vx = self.value(x);
        let (outer, n, inner, out_shape) = match axis {
            None => (1, vx.len(), 1, vec![1]),
            Some(ax) if ax < vx.ndim() => {
                let (o, n, i) = kernels::axis_split(vx.shape(), ax);
                let mut s = vx.shape().to_vec();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (o, n, i, s)
            }
            Some(ax) => {
                return Err(AutodiffError::InvalidAttr {
                    op: tag,
                    detail: format!("axis {ax} out of range for {:?}", vx.shape()),
                })
            }
        };
        if let ReduceKind::Variance { ddof } = kind {
            if ddof >= n {
                return Err(AutodiffError::InvalidAttr {
                    op: tag,
                    detail: format!("ddof {ddof} leaves no degrees of freedom over {n} values"),
                });
            }
        }
        let d = vx.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let sum: f64 = (0..n).map(at).sum();
                out.push(match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum / n as f64,
                    ReduceKind::Variance { ddof } => {
                        let mean = sum / n as f64;
                        let ss: f64 = (0..n).map(|j| (at(j) - mean).powi(2)).sum();
                        ss / (n - ddof) as f64
                    }
                });
            }
        }
        self.push(tag, Op::Reduce { kind, x, axis }, &[x], Tensor::from_parts(out_shape, out))
    }

    /// Sum over all elements, or over one axis (which is removed).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, AutodiffError> {
        self.reduce(OpTag::Sum, ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, AutodiffError> {
        self.reduce(OpTag::Mean, ReduceKind::Mean, x, axis)
    }

    /// Variance with divisor `n - ddof` (0 for population, 1 for unbiased).
    pub fn variance(&mut self, x: Var, axis: Option<usize>, ddof: usize) -> Result<Var, AutodiffError> {
        self.reduce(OpTag::Variance, ReduceKind::Variance { ddof }, x, axis)
    }

    // ----- structural ---------------------------------------------------------

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vx = self.value(x);
        if axis >= vx.ndim() || start >= end || end > vx.shape()[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: OpTag::Slice,
                detail: format!("axis {axis} range {start}..{end} of {:?}", vx.shape()),
            });
        }
        let (outer, n, inner) = kernels::axis_split(vx.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + width * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = width;
        self.push(OpTag::Slice, Op::Slice { x, axis, start }, &[x], Tensor::from_parts(shape, data))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let first = inputs.first().ok_or_else(|| AutodiffError::ShapeMismatch {
            op: OpTag::Concat,
            detail: "no inputs".into(),
        })?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpTag::Concat,
                detail: format!("axis {axis} for {base_shape:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpTag::Concat,
                    detail: format!("{s:?} vs {base_shape:?} on axis {axis}"),
                });
            }
            total += s[axis];
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            OpTag::Concat,
            Op::Concat { inputs: inputs.to_vec(), axis },
            inputs,
            Tensor::from_parts(shape, data),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vx = self.value(x).clone();
        let out = vx.reshaped(shape).map_err(|e| AutodiffError::ShapeMismatch {
            op: OpTag::Reshape,
            detail: e.to_string(),
        })?;
        self.push(OpTag::Reshape, Op::Reshape { x }, &[x], out)
    }

    /// Multiplies by a mask drawn outside the graph (already carrying any
    /// inverse-keep-probability scaling).
    pub fn apply_mask(&mut self, x: Var, mask: Tensor) -> Result<Var, AutodiffError> {
        self.check_live()?;
        let vx = self.value(x);
        if vx.shape() != mask.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpTag::DropoutMaskApply,
                detail: format!("{:?} vs mask {:?}", vx.shape(), mask.shape()),
            });
        }
        let data = vx.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let mask = mask.into_data();
        self.push(OpTag::DropoutMaskApply, Op::Mask { x, mask }, &[x], out)
    }

    // ----- backward -----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf, then
    /// releases all non-leaf values. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        self.check_live()?;
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, local) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, l)| *a += l),
                    slot => *slot = Some(local),
                }
            }
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    let shape = node.value.as_ref().expect("leaf value").shape().to_vec();
                    let data = grads
                        .get_mut(idx)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                    node.grad = Some(Tensor::from_parts(shape, data));
                }
            } else {
                node.value = None;
            }
        }
        self.consumed = true;
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("live value");
        let val = |v: Var| self.nodes[v.0].value.as_ref().expect("live value");
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                let (da, db) = (va.data(), vb.data());
                let mut visit = |i: usize, ia: usize, ib: usize| {
                    let gi = g[i];
                    match kind {
                        BinaryKind::Add => {
                            ga[ia] += gi;
                            gb[ib] += gi;
                        }
                        BinaryKind::Sub => {
                            ga[ia] += gi;
                            gb[ib] -= gi;
                        }
                        BinaryKind::Mul => {
                            ga[ia] += gi * db[ib];
                            gb[ib] += gi * da[ia];
                        }
                        BinaryKind::Div => {
                            ga[ia] += gi / db[ib];
                            gb[ib] -= gi * da[ia] / (db[ib] * db[ib]);
                        }
                    }
                };
                if va.shape() == vb.shape() {
                    (0..g.len()).for_each(|i| visit(i, i, i));
                } else {
                    kernels::for_each_broadcast(out.shape(), va.shape(), vb.shape(), visit);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut res = Vec::new();
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(g, vb.data(), m, k, n, &mut ga);
                    res.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(va.data(), g, m, k, n, &mut gb);
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv1d { input, kernel, bias, dims } => {
                let (vi, vk) = (val(*input), val(*kernel));
                let mut gi = wants(*input).then(|| vec![0.0; vi.len()]);
                let mut gk = wants(*kernel).then(|| vec![0.0; vk.len()]);
                let mut gbias = bias.filter(|b| wants(*b)).map(|_| vec![0.0; dims.out_channels]);
                kernels::conv1d_backward(
                    g,
                    vi.data(),
                    vk.data(),
                    *dims,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gbias.as_deref_mut(),
                );
                let mut res = Vec::new();
                if let Some(gi) = gi {
                    res.push((*input, gi));
                }
                if let Some(gk) = gk {
                    res.push((*kernel, gk));
                }
                if let (Some(b), Some(gb)) = (bias, gbias) {
                    res.push((*b, gb));
                }
                res
            }
            Op::MaxPool1d { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gi[src] += gv;
                }
                vec![(*input, gi)]
            }
            Op::Unary { kind, x } => {
                let xs = val(*x).data();
                let ys = out.data();
                let gi = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&xv, &yv))| {
                        gv * match kind {
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Tanh => 1.0 - yv * yv,
                            UnaryKind::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Softplus => sigmoid(xv),
                            UnaryKind::Exp => yv,
                            UnaryKind::Log => 1.0 / xv,
                            UnaryKind::Square => 2.0 * xv,
                            UnaryKind::Sqrt => 0.5 / yv,
                        }
                    })
                    .collect();
                vec![(*x, gi)]
            }
            Op::Reduce { kind, x, axis } => {
                let vx = val(*x);
                let (outer, n, inner) = match axis {
                    None => (1, vx.len(), 1),
                    Some(ax) => kernels::axis_split(vx.shape(), *ax),
                };
                let d = vx.data();
                let mut gi = vec![0.0; vx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        let pos = |j: usize| (o * n + j) * inner + i;
                        match kind {
                            ReduceKind::Sum => (0..n).for_each(|j| gi[pos(j)] = gv),
                            ReduceKind::Mean => (0..n).for_each(|j| gi[pos(j)] = gv / n as f64),
                            ReduceKind::Variance { ddof } => {
                                let mean = (0..n).map(|j| d[pos(j)]).sum::<f64>() / n as f64;
                                let scale = 2.0 / (n - ddof) as f64;
                                (0..n).for_each(|j| gi[pos(j)] = gv * scale * (d[pos(j)] - mean));
                            }
                        }
                    }
                }
                vec![(*x, gi)]
            }
            Op::Slice { x, axis, start } => {
                let vx = val(*x);
                let (outer, n, inner) = kernels::axis_split(vx.shape(), *axis);
                let width = out.shape()[*axis];
                let mut gi = vec![0.0; vx.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * width * inner;
                    gi[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                vec![(*x, gi)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let w = val(*v).shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[src..src + w * inner]);
                    }
                    offset += w;
                    res.push((*v, gi));
                }
                res
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Mask { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())]
            }
        }
    }
}
