use std::collections::HashMap;

use crate::kernels::ConvGeom;
use crate::tensor::validate_shape;
use crate::{GradError, Tensor};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Free input, bound by name at evaluation time.
    Input { name: String, trainable: bool },
    Constant(Tensor),
    /// `[m, k] @ [k, n]`
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `[m, n] + [n]`, the bias added to every row.
    AddRowBias(NodeId, NodeId),
    /// Tensor times a one-element node.
    ScaleBy(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Mean(NodeId),
    /// `[C, H, W] * [O, C, kh, kw] (+ [O])`
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    /// `[C, H, W] -> [C]`
    GlobalAvgPool(NodeId),
    /// Non-overlapping `k x k` average pooling of `[C, H, W]`.
    AvgPool { x: NodeId, k: usize },
    UpsampleNearest { x: NodeId, factor: usize },
    ConcatChannels(Vec<NodeId>),
    Reshape(NodeId),
    /// Columns `start..end` of a `[m, n]` matrix.
    SliceCols { x: NodeId, start: usize, end: usize },
    /// Log-softmax along the last axis.
    LogSoftmax(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRowBias(..) => "add_row_bias",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRowBias(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Clamp { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GlobalAvgPool(x)
            | Op::AvgPool { x, .. }
            | Op::UpsampleNearest { x, .. }
            | Op::Reshape(x)
            | Op::SliceCols { x, .. }
            | Op::LogSoftmax(x) => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ConcatChannels(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

/// A topologically ordered computation graph.
///
/// Nodes can only reference nodes created before them, so insertion order is
/// a valid evaluation order. Shapes are fixed when a node is added.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: HashMap<String, NodeId>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Id of an input node by name.
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// Names and shapes of every trainable input, in insertion order.
    pub fn trainable_inputs(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input {
                    name,
                    trainable: true,
                } => Some((name.clone(), n.shape.clone())),
                _ => None,
            })
            .collect()
    }

    /// Names of every input node, in insertion order.
    pub fn input_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Constant(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GradError {
        GradError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check(&self, id: NodeId) -> Result<&[usize], GradError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(GradError::UnknownNode(id.0))
    }

    fn add_input(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId, GradError> {
        validate_shape(shape)?;
        if self.inputs.contains_key(name) {
            return Err(GradError::DuplicateInput(name.to_string()));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Non-trainable input (data, targets, frozen weights).
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GradError> {
        self.add_input(name, shape, false)
    }

    /// Trainable input; `backward` returns a gradient for it.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GradError> {
        self.add_input(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} @ {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GradError> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        let (sx, sb) = (self.check(x)?.to_vec(), self.check(bias)?.to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(self.mismatch("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        Ok(self.push(Op::AddRowBias(x, bias), sx))
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, GradError> {
        let (sx, ss) = (self.check(x)?.to_vec(), self.check(s)?.to_vec());
        if ss.iter().product::<usize>() != 1 {
            return Err(self.mismatch("scale_by", format!("scale factor has shape {ss:?}")));
        }
        Ok(self.push(Op::ScaleBy(x, s), sx))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Scale(x, k), s))
    }

    pub fn offset(&mut self, x: NodeId, k: f64) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Offset(x, k), s))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(op, s))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.unary(x, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.unary(x, Op::Log(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, GradError> {
        if !(lo <= hi) {
            return Err(self.mismatch("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary(x, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), vec![1]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.check(x)?;
        Ok(self.push(Op::Mean(x), vec![1]))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GradError> {
        let sx = self.check(x)?.to_vec();
        let sw = self.check(w)?.to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(self.mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        if sx[1] + 2 * pad < sw[2] || sx[2] + 2 * pad < sw[3] {
            return Err(self.mismatch("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        if let Some(b) = b {
            let sb = self.check(b)?.to_vec();
            if sb != [sw[0]] {
                return Err(self.mismatch("conv2d", format!("bias {sb:?} for {} filters", sw[0])));
            }
        }
        let geom = conv_geom(&sx, &sw, stride, pad);
        Ok(self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![sw[0], geom.out_h(), geom.out_w()],
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        if s.len() != 3 {
            return Err(self.mismatch("global_avg_pool", format!("expected [C, H, W], got {s:?}")));
        }
        Ok(self.push(Op::GlobalAvgPool(x), vec![s[0]]))
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(self.mismatch("avg_pool", format!("{s:?} not divisible into {k}x{k} blocks")));
        }
        Ok(self.push(Op::AvgPool { x, k }, vec![s[0], s[1] / k, s[2] / k]))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(self.mismatch("upsample_nearest", format!("{s:?} by {factor}")));
        }
        Ok(self.push(
            Op::UpsampleNearest { x, factor },
            vec![s[0], s[1] * factor, s[2] * factor],
        ))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, GradError> {
        if xs.is_empty() {
            return Err(self.mismatch("concat_channels", "no inputs".into()));
        }
        let first = self.check(xs[0])?.to_vec();
        if first.len() != 3 {
            return Err(self.mismatch("concat_channels", format!("expected [C, H, W], got {first:?}")));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.check(x)?.to_vec();
            if s.len() != 3 || s[1..] != first[1..] {
                return Err(self.mismatch("concat_channels", format!("{s:?} vs {first:?}")));
            }
            channels += s[0];
        }
        Ok(self.push(Op::ConcatChannels(xs.to_vec()), vec![channels, first[1], first[2]]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        validate_shape(shape)?;
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(self.mismatch("slice_cols", format!("{s:?}[:, {start}..{end}]")));
        }
        Ok(self.push(Op::SliceCols { x, start, end }, vec![s[0], end - start]))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let s = self.check(x)?.to_vec();
        if s.len() > 2 {
            return Err(self.mismatch("log_softmax", format!("expected rank 1 or 2, got {s:?}")));
        }
        Ok(self.push(Op::LogSoftmax(x), s))
    }

    /// `x @ w + b` for a `[m, in]` input and `[in, out]` weight.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }
}

pub(crate) fn conv_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        in_channels: sx[0],
        in_h: sx[1],
        in_w: sx[2],
        out_channels: sw[0],
        kernel_h: sw[2],
        kernel_w: sw[3],
        stride,
        pad,
    }
}
