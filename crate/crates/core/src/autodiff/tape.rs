use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::kernels::{self, ConvGeometry};
use super::{Tensor, TensorError};

/// Boundary handling for the 2-D convolutions. `Zero` and `Replicate` keep
/// the spatial size (odd kernels only); `Valid` shrinks it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
    Valid,
}

/// Every differentiable (or explicitly non-differentiable) operation the
/// tape can record. Attribute-carrying variants hold their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum of two tensors; ties select the first operand.
    Max,
    /// Elementwise minimum of two tensors; ties select the first operand.
    Min,
    Scale(f64),
    AddScalar(f64),
    /// `a + b` where `b` is a trailing-shape suffix of `a` or a single value.
    AddBroadcast,
    /// `a * b` with the same broadcasting rule as [`Primitive::AddBroadcast`].
    MulBroadcast,
    /// `a[..., c] * b[...]`: one factor per row of the last axis.
    ScaleRows,
    /// `a[..., k] · b[k, n]`.
    MatMul,
    /// `a[B, m, k] · b[B, k, n]`.
    BatchMatMul,
    /// `x[h, w, cin] ⊛ k[kh, kw, cin, cout]`, stride 1.
    Conv2d(Padding),
    /// `x[h, w, c] ⊛ k[kh, kw, c]` applied per channel.
    DepthwiseConv2d(Padding),
    Softmax,
    Sigmoid,
    Gelu,
    Softplus,
    Abs,
    Exp,
    /// Non-differentiable; gradient is zero.
    Sign,
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    /// Inputs `x[..., c]`, `gamma[c]`, `beta[c]`.
    LayerNorm(f64),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Cyclic shift over the two leading axes.
    Roll2d(isize, isize),
    /// Average consecutive groups of `g` channels on the last axis.
    GroupAverage(usize),
    /// Gather rows along axis 0.
    GatherRows(Vec<usize>),
    /// Keep masked entries, set the rest to `-inf`.
    TopKMask(Vec<bool>),
    /// Elementwise `mask ? a : b`.
    Where(Vec<bool>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Max => "max",
            Min => "min",
            Scale(_) => "scale",
            AddScalar(_) => "add_scalar",
            AddBroadcast => "add_broadcast",
            MulBroadcast => "mul_broadcast",
            ScaleRows => "scale_rows",
            MatMul => "matmul",
            BatchMatMul => "batch_matmul",
            Conv2d(_) => "conv2d",
            DepthwiseConv2d(_) => "depthwise_conv2d",
            Softmax => "softmax",
            Sigmoid => "sigmoid",
            Gelu => "gelu",
            Softplus => "softplus",
            Abs => "abs",
            Exp => "exp",
            Sign => "sign",
            SumAll => "sum",
            MeanAll => "mean",
            SumAxis(_) => "sum_axis",
            MeanAxis(_) => "mean_axis",
            LayerNorm(_) => "layer_norm",
            Concat(_) => "concat",
            Slice { .. } => "slice",
            Reshape(_) => "reshape",
            Permute(_) => "permute",
            Roll2d(..) => "roll2d",
            GroupAverage(_) => "group_average",
            GatherRows(_) => "gather_rows",
            TopKMask(_) => "topk_mask",
            Where(_) => "where",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the attribute-free primitives by name.
impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Primitive::*;
        Ok(match s {
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "div" => Div,
            "max" => Max,
            "min" => Min,
            "add_broadcast" => AddBroadcast,
            "mul_broadcast" => MulBroadcast,
            "scale_rows" => ScaleRows,
            "matmul" => MatMul,
            "batch_matmul" => BatchMatMul,
            "softmax" => Softmax,
            "sigmoid" => Sigmoid,
            "gelu" => Gelu,
            "softplus" => Softplus,
            "abs" => Abs,
            "exp" => Exp,
            "sign" => Sign,
            "sum" => SumAll,
            "mean" => MeanAll,
            other => return Err(TensorError::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Deliberate gradient corruption, used only to prove that the gradient
/// checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultInjection {
    SigmoidDerivative,
}

enum Saved {
    None,
    Cols(Vec<f64>),
    Norm { xhat: Vec<f64>, rstd: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
    needs_grad: bool,
}

/// Records primitive applications for one forward pass. Discarded after
/// [`Tape::backward`]; nodes are appended in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<FaultInjection>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: BTreeMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.entries.get(&var.id)
    }

    pub fn get_id(&self, node_id: usize) -> Option<&Tensor> {
        self.entries.get(&node_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("operands {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn broadcast_inner(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize, TensorError> {
    if b.numel() == 1 || a.shape().ends_with(b.shape()) {
        Ok(b.numel())
    } else {
        Err(mismatch(op, format!("{:?} is not a trailing suffix of {:?}", b.shape(), a.shape())))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(mismatch(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn arity(op: &Primitive) -> Option<usize> {
    use Primitive::*;
    Some(match op {
        Add | Sub | Mul | Div | Max | Min | AddBroadcast | MulBroadcast | ScaleRows | MatMul | BatchMatMul
        | Conv2d(_) | DepthwiseConv2d(_) | Where(_) => 2,
        LayerNorm(_) => 3,
        Concat(_) => return None,
        _ => 1,
    })
}

fn forward(op: &Primitive, xs: &[&Tensor]) -> Result<(Tensor, Saved), TensorError> {
    use Primitive::*;
    if let Some(n) = arity(op) {
        if xs.len() != n {
            return Err(mismatch(op.name(), format!("expected {} inputs, got {}", n, xs.len())));
        }
    }
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Add => {
            same_shape("add", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| a + b)?)
        }
        Sub => {
            same_shape("sub", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| a - b)?)
        }
        Mul => {
            same_shape("mul", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| a * b)?)
        }
        Div => {
            same_shape("div", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| a / b)?)
        }
        Max => {
            same_shape("max", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| if a >= b { a } else { b })?)
        }
        Min => {
            same_shape("min", xs[0], xs[1])?;
            plain(xs[0].zip_map(xs[1], |a, b| if a <= b { a } else { b })?)
        }
        Scale(s) => plain(xs[0].map(|v| v * s)),
        AddScalar(s) => plain(xs[0].map(|v| v + s)),
        AddBroadcast | MulBroadcast => {
            let inner = broadcast_inner(op.name(), xs[0], xs[1])?;
            let b = xs[1].data();
            let add = *op == AddBroadcast;
            let data = xs[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| if add { a + b[i % inner] } else { a * b[i % inner] })
                .collect();
            plain(Tensor::from_parts(xs[0].shape().to_vec(), data))
        }
        ScaleRows => {
            let (a, b) = (xs[0], xs[1]);
            let c = *a.shape().last().ok_or_else(|| mismatch("scale_rows", "rank-0 operand".into()))?;
            if b.numel() * c != a.numel() {
                return Err(mismatch("scale_rows", format!("rows of {:?} vs factors {:?}", a.shape(), b.shape())));
            }
            let bd = b.data();
            let data = a.data().iter().enumerate().map(|(i, &v)| v * bd[i / c]).collect();
            plain(Tensor::from_parts(a.shape().to_vec(), data))
        }
        MatMul => {
            let (a, b) = (xs[0], xs[1]);
            if b.rank() != 2 || a.rank() == 0 || a.shape()[a.rank() - 1] != b.shape()[0] {
                return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let k = b.shape()[0];
            let n = b.shape()[1];
            let m = a.numel() / k;
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            plain(Tensor::from_parts(shape, out))
        }
        BatchMatMul => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                return Err(mismatch("batch_matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            plain(Tensor::from_parts(vec![bs, m, n], out))
        }
        Conv2d(padding) => {
            let (x, k) = (xs[0], xs[1]);
            if x.rank() != 3 || k.rank() != 4 || k.shape()[2] != x.shape()[2] {
                return Err(mismatch("conv2d", format!("input {:?} kernel {:?}", x.shape(), k.shape())));
            }
            let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
            let g = ConvGeometry::new(h, w, kh, kw, *padding)
                .ok_or_else(|| mismatch("conv2d", format!("kernel {}x{} on {}x{} with {:?}", kh, kw, h, w, padding)))?;
            let cols = kernels::im2col(x.data(), cin, &g);
            let rows = g.out_h * g.out_w;
            let mut out = vec![0.0; rows * cout];
            kernels::gemm(rows, kh * kw * cin, cout, &cols, false, k.data(), false, &mut out, false);
            Ok((Tensor::from_parts(vec![g.out_h, g.out_w, cout], out), Saved::Cols(cols)))
        }
        DepthwiseConv2d(padding) => {
            let (x, k) = (xs[0], xs[1]);
            if x.rank() != 3 || k.rank() != 3 || k.shape()[2] != x.shape()[2] {
                return Err(mismatch("depthwise_conv2d", format!("input {:?} kernel {:?}", x.shape(), k.shape())));
            }
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let g = ConvGeometry::new(h, w, k.shape()[0], k.shape()[1], *padding).ok_or_else(|| {
                mismatch("depthwise_conv2d", format!("kernel {:?} on {}x{} with {:?}", k.shape(), h, w, padding))
            })?;
            let out = kernels::depthwise_forward(x.data(), k.data(), c, &g);
            plain(Tensor::from_parts(vec![g.out_h, g.out_w, c], out))
        }
        Softmax => {
            let n = *xs[0].shape().last().ok_or_else(|| mismatch("softmax", "rank-0 operand".into()))?;
            plain(Tensor::from_parts(xs[0].shape().to_vec(), kernels::softmax_rows(xs[0].data(), n)))
        }
        Sigmoid => plain(xs[0].map(kernels::sigmoid)),
        Gelu => plain(xs[0].map(kernels::gelu)),
        Softplus => plain(xs[0].map(kernels::softplus)),
        Abs => plain(xs[0].map(f64::abs)),
        Exp => plain(xs[0].map(f64::exp)),
        Sign => plain(xs[0].map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })),
        SumAll => plain(Tensor::scalar(xs[0].sum())),
        MeanAll => plain(Tensor::scalar(xs[0].mean())),
        SumAxis(axis) | MeanAxis(axis) => {
            check_axis(op.name(), xs[0].shape(), *axis)?;
            let (outer, len, inner) = split_dims(xs[0].shape(), *axis);
            let scale = if matches!(op, MeanAxis(_)) { 1.0 / len as f64 } else { 1.0 };
            let d = xs[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[src + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut shape = xs[0].shape().to_vec();
            shape.remove(*axis);
            plain(Tensor::from_parts(shape, out))
        }
        LayerNorm(eps) => {
            let (x, gamma, beta) = (xs[0], xs[1], xs[2]);
            let c = *x.shape().last().ok_or_else(|| mismatch("layer_norm", "rank-0 operand".into()))?;
            if gamma.shape() != [c] || beta.shape() != [c] {
                return Err(mismatch(
                    "layer_norm",
                    format!("x {:?} gamma {:?} beta {:?}", x.shape(), gamma.shape(), beta.shape()),
                ));
            }
            let rows = x.numel() / c;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            let (gd, bd) = (gamma.data(), beta.data());
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..c {
                    let xh = (row[j] - mean) * s;
                    xhat[r * c + j] = xh;
                    out[r * c + j] = xh * gd[j] + bd[j];
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Norm { xhat, rstd }))
        }
        Concat(axis) => {
            let first = xs.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
            check_axis("concat", first.shape(), *axis)?;
            for x in xs.iter().skip(1) {
                let ok = x.rank() == first.rank()
                    && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(mismatch("concat", format!("{:?} vs {:?} on axis {}", first.shape(), x.shape(), axis)));
                }
            }
            let (outer, _, inner) = split_dims(first.shape(), *axis);
            let total: usize = xs.iter().map(|x| x.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let len = x.shape()[*axis] * inner;
                    out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            plain(Tensor::from_parts(shape, out))
        }
        Slice { axis, start, len } => {
            check_axis("slice", xs[0].shape(), *axis)?;
            let (outer, full, inner) = split_dims(xs[0].shape(), *axis);
            if *len == 0 || start + len > full {
                return Err(mismatch("slice", format!("[{}, {}) of axis {} in {:?}", start, start + len, axis, xs[0].shape())));
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&xs[0].data()[base..base + len * inner]);
            }
            let mut shape = xs[0].shape().to_vec();
            shape[*axis] = *len;
            plain(Tensor::from_parts(shape, out))
        }
        Reshape(shape) => plain(xs[0].reshape(shape.clone())?),
        Permute(axes) => {
            let rank = xs[0].rank();
            let mut seen = vec![false; rank];
            let valid = axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(mismatch("permute", format!("axes {:?} for {:?}", axes, xs[0].shape())));
            }
            let (shape, data) = kernels::permute(xs[0].data(), xs[0].shape(), axes);
            plain(Tensor::from_parts(shape, data))
        }
        Roll2d(dy, dx) => {
            let s = xs[0].shape();
            if s.len() < 2 {
                return Err(mismatch("roll2d", format!("needs rank >= 2, got {:?}", s)));
            }
            let inner = s[2..].iter().product();
            plain(Tensor::from_parts(s.to_vec(), kernels::roll2d(xs[0].data(), s[0], s[1], inner, *dy, *dx)))
        }
        GroupAverage(g) => {
            let s = xs[0].shape();
            let c = *s.last().ok_or_else(|| mismatch("group_average", "rank-0 operand".into()))?;
            if *g == 0 || c % g != 0 {
                return Err(mismatch("group_average", format!("{} channels not divisible by group {}", c, g)));
            }
            // shifted mean: exact when a group is constant
            let out: Vec<f64> = xs[0]
                .data()
                .chunks_exact(*g)
                .map(|grp| grp[0] + grp.iter().map(|v| v - grp[0]).sum::<f64>() / *g as f64)
                .collect();
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = c / g;
            plain(Tensor::from_parts(shape, out))
        }
        GatherRows(idx) => {
            let s = xs[0].shape();
            if s.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
                return Err(mismatch("gather_rows", format!("indices out of range for {:?}", s)));
            }
            let inner: usize = s[1..].iter().product();
            let mut out = Vec::with_capacity(idx.len() * inner);
            for &i in idx {
                out.extend_from_slice(&xs[0].data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            plain(Tensor::from_parts(shape, out))
        }
        TopKMask(mask) => {
            if mask.len() != xs[0].numel() {
                return Err(mismatch("topk_mask", format!("mask of {} for {:?}", mask.len(), xs[0].shape())));
            }
            let data = xs[0].data().iter().zip(mask).map(|(&v, &m)| if m { v } else { f64::NEG_INFINITY }).collect();
            plain(Tensor::from_parts(xs[0].shape().to_vec(), data))
        }
        Where(mask) => {
            same_shape("where", xs[0], xs[1])?;
            if mask.len() != xs[0].numel() {
                return Err(mismatch("where", format!("mask of {} for {:?}", mask.len(), xs[0].shape())));
            }
            let (a, b) = (xs[0].data(), xs[1].data());
            let data = mask.iter().enumerate().map(|(i, &m)| if m { a[i] } else { b[i] }).collect();
            plain(Tensor::from_parts(xs[0].shape().to_vec(), data))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        let tape = Self::default();
        tape.fault.set(Some(fault));
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiated leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.input(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.input(value, false)
    }

    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
            needs_grad: requires_grad,
        })
    }

    /// Applies `op` to `inputs` and records it.
    pub fn apply<'t>(&'t self, op: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let (value, saved, needs_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let (value, saved) = forward(&op, &values)?;
            let needs_grad = op != Primitive::Sign && inputs.iter().any(|v| nodes[v.id].needs_grad);
            (value, saved, needs_grad)
        };
        let saved = if needs_grad { saved } else { Saved::None };
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.id).collect(),
            saved,
            requires_grad: false,
            needs_grad,
        }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradMap, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || node.op.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
            let contributions = backward_node(node, &nodes, &g, &wants, fault);
            for (slot, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    match &mut grads[*slot] {
                        Some(existing) => existing.add_assign(&c),
                        empty => *empty = Some(c),
                    }
                }
            }
            // keep leaf grads only; interior grads were consumed above
        }
        let mut entries = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.op.is_none() {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                entries.insert(id, g);
            }
        }
        Ok(GradMap { entries })
    }
}

fn backward_node(
    node: &Node,
    nodes: &[Node],
    g: &Tensor,
    wants: &[bool],
    fault: Option<FaultInjection>,
) -> Vec<Option<Tensor>> {
    use Primitive::*;
    let input = |i: usize| &nodes[node.inputs[i]].value;
    let out = &node.value;
    let shape_of = |i: usize| input(i).shape().to_vec();
    let gd = g.data();
    let op = node.op.as_ref().expect("interior node");
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(shape_of(0), (0..gd.len()).map(f).collect()))]
    };
    match op {
        Add => vec![wants[0].then(|| g.clone()), wants[1].then(|| g.clone())],
        Sub => vec![wants[0].then(|| g.clone()), wants[1].then(|| g.map(|v| -v))],
        Mul => {
            let (a, b) = (input(0), input(1));
            vec![
                wants[0].then(|| g.zip_map(b, |x, y| x * y).unwrap()),
                wants[1].then(|| g.zip_map(a, |x, y| x * y).unwrap()),
            ]
        }
        Div => {
            let (a, b) = (input(0).data(), input(1).data());
            vec![
                wants[0].then(|| Tensor::from_parts(shape_of(0), (0..gd.len()).map(|i| gd[i] / b[i]).collect())),
                wants[1].then(|| {
                    Tensor::from_parts(shape_of(1), (0..gd.len()).map(|i| -gd[i] * a[i] / (b[i] * b[i])).collect())
                }),
            ]
        }
        Max | Min => {
            let (a, b) = (input(0).data(), input(1).data());
            let first = |i: usize| if *op == Max { a[i] >= b[i] } else { a[i] <= b[i] };
            vec![
                wants[0].then(|| Tensor::from_parts(shape_of(0), (0..gd.len()).map(|i| if first(i) { gd[i] } else { 0.0 }).collect())),
                wants[1].then(|| Tensor::from_parts(shape_of(1), (0..gd.len()).map(|i| if first(i) { 0.0 } else { gd[i] }).collect())),
            ]
        }
        Scale(s) => vec![Some(g.map(|v| v * s))],
        AddScalar(_) => vec![Some(g.clone())],
        AddBroadcast | MulBroadcast => {
            let (a, b) = (input(0), input(1));
            let inner = b.numel();
            let add = *op == AddBroadcast;
            let ga = wants[0].then(|| if add { g.clone() } else { Tensor::from_parts(shape_of(0), (0..gd.len()).map(|i| gd[i] * b.data()[i % inner]).collect()) });
            let gb = wants[1].then(|| {
                let mut acc = vec![0.0; inner];
                for i in 0..gd.len() {
                    acc[i % inner] += if add { gd[i] } else { gd[i] * a.data()[i] };
                }
                Tensor::from_parts(shape_of(1), acc)
            });
            vec![ga, gb]
        }
        ScaleRows => {
            let (a, b) = (input(0), input(1));
            let c = a.numel() / b.numel();
            let ga = wants[0].then(|| Tensor::from_parts(shape_of(0), (0..gd.len()).map(|i| gd[i] * b.data()[i / c]).collect()));
            let gb = wants[1].then(|| {
                let mut acc = vec![0.0; b.numel()];
                for i in 0..gd.len() {
                    acc[i / c] += gd[i] * a.data()[i];
                }
                Tensor::from_parts(shape_of(1), acc)
            });
            vec![ga, gb]
        }
        MatMul => {
            let (a, b) = (input(0), input(1));
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.numel() / k;
            let ga = wants[0].then(|| {
                let mut d = vec![0.0; m * k];
                kernels::gemm(m, n, k, gd, false, b.data(), true, &mut d, false);
                Tensor::from_parts(shape_of(0), d)
            });
            let gb = wants[1].then(|| {
                let mut d = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, gd, false, &mut d, false);
                Tensor::from_parts(shape_of(1), d)
            });
            vec![ga, gb]
        }
        BatchMatMul => {
            let (a, b) = (input(0), input(1));
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let ga = wants[0].then(|| {
                let mut d = vec![0.0; bs * m * k];
                for i in 0..bs {
                    kernels::gemm(m, n, k, &gd[i * m * n..(i + 1) * m * n], false, &b.data()[i * k * n..(i + 1) * k * n], true, &mut d[i * m * k..(i + 1) * m * k], false);
                }
                Tensor::from_parts(shape_of(0), d)
            });
            let gb = wants[1].then(|| {
                let mut d = vec![0.0; bs * k * n];
                for i in 0..bs {
                    kernels::gemm(k, m, n, &a.data()[i * m * k..(i + 1) * m * k], true, &gd[i * m * n..(i + 1) * m * n], false, &mut d[i * k * n..(i + 1) * k * n], false);
                }
                Tensor::from_parts(shape_of(1), d)
            });
            vec![ga, gb]
        }
        Conv2d(padding) => {
            let (x, k) = (input(0), input(1));
            let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
            let geo = ConvGeometry::new(h, w, kh, kw, *padding).expect("validated in forward");
            let rows = geo.out_h * geo.out_w;
            let patch = kh * kw * cin;
            let Saved::Cols(cols) = &node.saved else { unreachable!("conv2d saves its columns") };
            let gx = wants[0].then(|| {
                let mut dcols = vec![0.0; rows * patch];
                kernels::gemm(rows, cout, patch, gd, false, k.data(), true, &mut dcols, false);
                Tensor::from_parts(shape_of(0), kernels::col2im(&dcols, cin, &geo))
            });
            let gk = wants[1].then(|| {
                let mut dk = vec![0.0; patch * cout];
                kernels::gemm(patch, rows, cout, cols, true, gd, false, &mut dk, false);
                Tensor::from_parts(shape_of(1), dk)
            });
            vec![gx, gk]
        }
        DepthwiseConv2d(padding) => {
            let (x, k) = (input(0), input(1));
            let geo = ConvGeometry::new(x.shape()[0], x.shape()[1], k.shape()[0], k.shape()[1], *padding).expect("validated in forward");
            let (dx, dk) = kernels::depthwise_backward(x.data(), k.data(), gd, x.shape()[2], &geo, wants[0], wants[1]);
            vec![dx.map(|d| Tensor::from_parts(shape_of(0), d)), dk.map(|d| Tensor::from_parts(shape_of(1), d))]
        }
        Softmax => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let row = r * n..(r + 1) * n;
                let dot: f64 = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                for i in row {
                    d[i] = y[i] * (gd[i] - dot);
                }
            }
            vec![Some(Tensor::from_parts(shape_of(0), d))]
        }
        Sigmoid => {
            let y = out.data();
            let factor = if fault == Some(FaultInjection::SigmoidDerivative) { 1.1 } else { 1.0 };
            unary(&|i| gd[i] * y[i] * (1.0 - y[i]) * factor)
        }
        Gelu => {
            let x = input(0).data();
            unary(&|i| gd[i] * kernels::gelu_grad(x[i]))
        }
        Softplus => {
            let x = input(0).data();
            unary(&|i| gd[i] * kernels::sigmoid(x[i]))
        }
        Abs => {
            let x = input(0).data();
            unary(&|i| if x[i] > 0.0 { gd[i] } else if x[i] < 0.0 { -gd[i] } else { 0.0 })
        }
        Exp => {
            let y = out.data();
            unary(&|i| gd[i] * y[i])
        }
        Sign => vec![None],
        SumAll => {
            let s = gd[0];
            vec![Some(Tensor::full(shape_of(0), s))]
        }
        MeanAll => {
            let s = gd[0] / input(0).numel() as f64;
            vec![Some(Tensor::full(shape_of(0), s))]
        }
        SumAxis(axis) | MeanAxis(axis) => {
            let (outer, len, inner) = split_dims(input(0).shape(), *axis);
            let scale = if matches!(op, MeanAxis(_)) { 1.0 / len as f64 } else { 1.0 };
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        d[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape_of(0), d))]
        }
        LayerNorm(_) => {
            let Saved::Norm { xhat, rstd } = &node.saved else { unreachable!("layer_norm saves statistics") };
            let gamma = input(1).data();
            let c = gamma.len();
            let rows = rstd.len();
            let gx = wants[0].then(|| {
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    let base = r * c;
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..c {
                        let dxh = gd[base + j] * gamma[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[base + j];
                    }
                    mean_dxh /= c as f64;
                    mean_dxh_xh /= c as f64;
                    for j in 0..c {
                        let dxh = gd[base + j] * gamma[j];
                        d[base + j] = rstd[r] * (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh);
                    }
                }
                Tensor::from_parts(shape_of(0), d)
            });
            let gg = wants[1].then(|| {
                let mut d = vec![0.0; c];
                for (i, &v) in gd.iter().enumerate() {
                    d[i % c] += v * xhat[i];
                }
                Tensor::from_parts(vec![c], d)
            });
            let gb = wants[2].then(|| {
                let mut d = vec![0.0; c];
                for (i, &v) in gd.iter().enumerate() {
                    d[i % c] += v;
                }
                Tensor::from_parts(vec![c], d)
            });
            vec![gx, gg, gb]
        }
        Concat(axis) => {
            let (outer, total, inner) = split_dims(out.shape(), *axis);
            let mut offset = 0;
            let mut result = Vec::with_capacity(node.inputs.len());
            for (idx, &want) in wants.iter().enumerate() {
                let len = input(idx).shape()[*axis];
                if want {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    result.push(Some(Tensor::from_parts(shape_of(idx), d)));
                } else {
                    result.push(None);
                }
                offset += len;
            }
            result
        }
        Slice { axis, start, len } => {
            let (outer, full, inner) = split_dims(input(0).shape(), *axis);
            let mut d = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(Tensor::from_parts(shape_of(0), d))]
        }
        Reshape(_) => vec![Some(g.reshape(shape_of(0)).expect("same element count"))],
        Permute(axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (shape, data) = kernels::permute(gd, g.shape(), &inverse);
            vec![Some(Tensor::from_parts(shape, data))]
        }
        Roll2d(dy, dx) => {
            let s = g.shape();
            let inner = s[2..].iter().product();
            vec![Some(Tensor::from_parts(s.to_vec(), kernels::roll2d(gd, s[0], s[1], inner, -dy, -dx)))]
        }
        GroupAverage(gs) => {
            let inv = 1.0 / *gs as f64;
            let d = (0..input(0).numel()).map(|i| gd[i / gs] * inv).collect();
            vec![Some(Tensor::from_parts(shape_of(0), d))]
        }
        GatherRows(idx) => {
            let s = input(0).shape();
            let inner: usize = s[1..].iter().product();
            let mut d = vec![0.0; input(0).numel()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..inner {
                    d[i * inner + j] += gd[r * inner + j];
                }
            }
            vec![Some(Tensor::from_parts(shape_of(0), d))]
        }
        TopKMask(mask) => {
            unary(&|i| if mask[i] { gd[i] } else { 0.0 })
        }
        Where(mask) => vec![
            wants[0].then(|| Tensor::from_parts(shape_of(0), (0..gd.len()).map(|i| if mask[i] { gd[i] } else { 0.0 }).collect())),
            wants[1].then(|| Tensor::from_parts(shape_of(1), (0..gd.len()).map(|i| if mask[i] { 0.0 } else { gd[i] }).collect())),
        ],
    }
}

macro_rules! binary {
    ($($(#[$doc:meta])* $name:ident => $prim:expr;)*) => {
        $(
            $(#[$doc])*
            pub fn $name(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
                self.tape.apply($prim, &[self, other])
            }
        )*
    };
}

macro_rules! unary {
    ($($name:ident => $prim:expr;)*) => {
        $(
            pub fn $name(self) -> Result<Var<'t>, TensorError> {
                self.tape.apply($prim, &[self])
            }
        )*
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    binary! {
        add => Primitive::Add;
        sub => Primitive::Sub;
        mul => Primitive::Mul;
        div => Primitive::Div;
        maximum => Primitive::Max;
        minimum => Primitive::Min;
        add_broadcast => Primitive::AddBroadcast;
        mul_broadcast => Primitive::MulBroadcast;
        scale_rows => Primitive::ScaleRows;
        matmul => Primitive::MatMul;
        batch_matmul => Primitive::BatchMatMul;
    }

    unary! {
        softmax => Primitive::Softmax;
        sigmoid => Primitive::Sigmoid;
        gelu => Primitive::Gelu;
        softplus => Primitive::Softplus;
        abs => Primitive::Abs;
        exp => Primitive::Exp;
        sign => Primitive::Sign;
        sum => Primitive::SumAll;
        mean => Primitive::MeanAll;
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Scale(factor), &[self])
    }

    pub fn add_scalar(self, value: f64) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::AddScalar(value), &[self])
    }

    pub fn square(self) -> Result<Var<'t>, TensorError> {
        self.mul(self)
    }

    pub fn conv2d(self, kernel: Var<'t>, padding: Padding) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Conv2d(padding), &[self, kernel])
    }

    pub fn depthwise_conv2d(self, kernel: Var<'t>, padding: Padding) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::DepthwiseConv2d(padding), &[self, kernel])
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::SumAxis(axis), &[self])
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::MeanAxis(axis), &[self])
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::LayerNorm(eps), &[self, gamma, beta])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        first.tape.apply(Primitive::Concat(axis), parts)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Slice { axis, start, len }, &[self])
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>, TensorError> {
        let shape = self.shape();
        check_axis("split", &shape, axis)?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(mismatch("split", format!("sizes {:?} do not cover axis {} of {:?}", sizes, axis, shape)));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.slice(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Reshape(shape.to_vec()), &[self])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Permute(axes.to_vec()), &[self])
    }

    /// Swaps the two axes of a rank-2 var.
    pub fn transpose2d(self) -> Result<Var<'t>, TensorError> {
        if self.shape().len() != 2 {
            return Err(mismatch("transpose2d", format!("needs rank 2, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    pub fn roll2d(self, dy: isize, dx: isize) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::Roll2d(dy, dx), &[self])
    }

    pub fn group_average(self, group: usize) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::GroupAverage(group), &[self])
    }

    pub fn gather_rows(self, indices: Vec<usize>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::GatherRows(indices), &[self])
    }

    pub fn topk_mask(self, keep: Vec<bool>) -> Result<Var<'t>, TensorError> {
        self.tape.apply(Primitive::TopKMask(keep), &[self])
    }

    pub fn select(mask: Vec<bool>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        a.tape.apply(Primitive::Where(mask), &[a, b])
    }
}
