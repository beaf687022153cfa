//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application; [`Tape::backward`] replays
//! the recording in reverse to accumulate gradients. Tensors are cheap handles
//! (`Copy`) into the tape, so a fresh tape is built for every training step
//! and dropped afterwards.
//!
//! Forward values are deterministic: primitives iterate buffers in a fixed
//! order, so identical inputs produce bit-identical outputs within one build.

use std::cell::RefCell;
use std::fmt::{Debug, Display};

use crate::error::{Error, Result};

/// Element type of every tensor: `f32` for training, `f64` for gradient
/// checking and golden-value generation.
pub trait Scalar: num_traits::Float + Debug + Display + Default + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// A primitive applicable through [`Tape::apply`]. Parameters that are not
/// tensors (scale factors, gather indices, ...) ride along in the variant.
#[derive(Debug, Clone)]
pub enum Primitive<F: Scalar> {
    Matmul,
    Add,
    ElementwiseMul,
    ConcatLastAxis,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    MeanOverRows,
    SumAll,
    ScalarScale(F),
    ScalarOffset(F),
    Clamp(F, F),
    GatherRows(Vec<usize>),
    GatherElements(Vec<usize>),
    SliceLastAxis { start: usize, len: usize },
    Softmax { axis: usize },
    Reshape(Vec<usize>),
    Transpose,
}

impl<F: Scalar> Primitive<F> {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::ElementwiseMul => "elementwise_mul",
            Primitive::ConcatLastAxis => "concat_last_axis",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::MeanOverRows => "mean_over_rows",
            Primitive::SumAll => "sum_all",
            Primitive::ScalarScale(_) => "scalar_scale",
            Primitive::ScalarOffset(_) => "scalar_offset",
            Primitive::Clamp(_, _) => "clamp",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::GatherElements(_) => "gather_elements",
            Primitive::SliceLastAxis { .. } => "slice_last_axis",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
        }
    }
}

/// Recorded operation: which primitive produced a node and from which parents.
#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize, broadcast: AddBroadcast },
    Mul { a: usize, b: usize, scalar: Option<MulScalarSide> },
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Log { x: usize },
    Exp { x: usize },
    MeanRows { x: usize },
    SumAll { x: usize },
    Scale { x: usize, factor: F },
    Offset { x: usize },
    Clamp { x: usize, lo: F, hi: F },
    GatherRows { x: usize, indices: Vec<usize> },
    GatherElements { x: usize, indices: Vec<usize> },
    SliceLast { x: usize, start: usize, len: usize },
    Softmax { x: usize, axis: usize },
    Reshape { x: usize },
    Transpose { x: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AddBroadcast {
    None,
    Row,    // rhs is one row broadcast over the rows of lhs
    Scalar, // rhs has a single element
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MulScalarSide {
    Left,
    Right,
}

struct Node<F: Scalar> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<F>,
}

/// Records primitive applications for one forward/backward cycle.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node on a [`Tape`]. Copyable; values live on the tape.
pub struct Tensor<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> Clone for Tensor<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Scalar> Copy for Tensor<'_, F> {}

impl<F: Scalar> Debug for Tensor<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn shape_err(op: &'static str, details: String) -> Error {
    Error::Shape { op, details }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err(op, format!("dimensions must be positive, got {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(shape_err(
            op,
            format!("shape {shape:?} implies {numel} elements, buffer has {len}"),
        ));
    }
    Ok(())
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<F>, shape: Vec<usize>, op: Op<F>, needs_grad: bool) -> Tensor<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { data, shape, grad: None, requires_grad: false, needs_grad, op });
        Tensor { tape: self, id }
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&self, data: Vec<F>, shape: &[usize]) -> Tensor<'_, F> {
        check_shape("leaf", shape, data.len()).expect("leaf shape");
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// Differentiable input; `backward` accumulates its gradient.
    pub fn leaf_grad(&self, data: Vec<F>, shape: &[usize]) -> Tensor<'_, F> {
        check_shape("leaf", shape, data.len()).expect("leaf shape");
        let t = self.push(data, shape.to_vec(), Op::Leaf, true);
        self.nodes.borrow_mut()[t.id].requires_grad = true;
        t
    }

    pub fn scalar(&self, value: F) -> Tensor<'_, F> {
        self.leaf(vec![value], &[1])
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_, F> {
        let numel: usize = shape.iter().product();
        self.leaf(vec![F::zero(); numel], shape)
    }

    /// Concatenate along the last axis. All inputs must agree on the leading
    /// dimension (or all be vectors).
    pub fn concat<'t>(&'t self, inputs: &[Tensor<'t, F>]) -> Tensor<'t, F> {
        self.apply(Primitive::ConcatLastAxis, inputs).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Apply a primitive to tensor inputs, recording it on the tape.
    pub fn apply<'t>(&'t self, prim: Primitive<F>, inputs: &[Tensor<'t, F>]) -> Result<Tensor<'t, F>> {
        let arity_err = |want: usize| {
            shape_err(prim.name(), format!("expected {want} input(s), got {}", inputs.len()))
        };
        match &prim {
            Primitive::Matmul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                self.matmul_impl(inputs[0], inputs[1])
            }
            Primitive::Add => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                self.add_impl(inputs[0], inputs[1])
            }
            Primitive::ElementwiseMul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                self.mul_impl(inputs[0], inputs[1])
            }
            Primitive::ConcatLastAxis => {
                if inputs.is_empty() {
                    return Err(shape_err("concat_last_axis", "no inputs".into()));
                }
                self.concat_impl(inputs)
            }
            Primitive::Relu
            | Primitive::Sigmoid
            | Primitive::Tanh
            | Primitive::Log
            | Primitive::Exp
            | Primitive::MeanOverRows
            | Primitive::SumAll
            | Primitive::ScalarScale(_)
            | Primitive::ScalarOffset(_)
            | Primitive::Clamp(_, _)
            | Primitive::GatherRows(_)
            | Primitive::GatherElements(_)
            | Primitive::SliceLastAxis { .. }
            | Primitive::Softmax { .. }
            | Primitive::Reshape(_)
            | Primitive::Transpose => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.unary_impl(prim, inputs[0])
            }
        }
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node<F>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id])
    }

    fn matmul_impl<'t>(&'t self, a: Tensor<'t, F>, b: Tensor<'t, F>) -> Result<Tensor<'t, F>> {
        let (ad, ash, an) = (a.to_vec(), a.shape(), a.needs_grad());
        let (bd, bsh, bn) = (b.to_vec(), b.shape(), b.needs_grad());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(shape_err("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = mm_nn(&ad, &bd, m, k, n);
        Ok(self.push(out, vec![m, n], Op::Matmul { a: a.id, b: b.id }, an || bn))
    }

    fn add_impl<'t>(&'t self, a: Tensor<'t, F>, b: Tensor<'t, F>) -> Result<Tensor<'t, F>> {
        let (ad, ash, an) = (a.to_vec(), a.shape(), a.needs_grad());
        let (bd, bsh, bn) = (b.to_vec(), b.shape(), b.needs_grad());
        let broadcast = if ash == bsh {
            AddBroadcast::None
        } else if bd.len() == 1 {
            AddBroadcast::Scalar
        } else if ash.len() == 2 && bd.len() == ash[1] {
            AddBroadcast::Row
        } else {
            return Err(shape_err("add", format!("{ash:?} + {bsh:?}")));
        };
        let mut out = ad;
        match broadcast {
            AddBroadcast::None => {
                for (o, &x) in out.iter_mut().zip(bd.iter()) {
                    *o = *o + x;
                }
            }
            AddBroadcast::Scalar => {
                for o in out.iter_mut() {
                    *o = *o + bd[0];
                }
            }
            AddBroadcast::Row => {
                let cols = ash[1];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = *o + bd[i % cols];
                }
            }
        }
        Ok(self.push(out, ash, Op::Add { a: a.id, b: b.id, broadcast }, an || bn))
    }

    fn mul_impl<'t>(&'t self, a: Tensor<'t, F>, b: Tensor<'t, F>) -> Result<Tensor<'t, F>> {
        let (ad, ash, an) = (a.to_vec(), a.shape(), a.needs_grad());
        let (bd, bsh, bn) = (b.to_vec(), b.shape(), b.needs_grad());
        let scalar = if ash == bsh {
            None
        } else if ad.len() == 1 && bd.len() != 1 {
            Some(MulScalarSide::Left)
        } else if bd.len() == 1 && ad.len() != 1 {
            Some(MulScalarSide::Right)
        } else {
            return Err(shape_err("elementwise_mul", format!("{ash:?} * {bsh:?}")));
        };
        let (out, shape) = match scalar {
            Some(MulScalarSide::Left) => {
                (bd.iter().map(|&x| ad[0] * x).collect::<Vec<F>>(), bsh)
            }
            Some(MulScalarSide::Right) => {
                (ad.iter().map(|&x| x * bd[0]).collect::<Vec<F>>(), ash)
            }
            None => (
                ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect::<Vec<F>>(),
                ash,
            ),
        };
        Ok(self.push(out, shape, Op::Mul { a: a.id, b: b.id, scalar }, an || bn))
    }

    fn concat_impl<'t>(&'t self, inputs: &[Tensor<'t, F>]) -> Result<Tensor<'t, F>> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape()).collect();
        let rank = shapes[0].len();
        if rank > 2 || shapes.iter().any(|s| s.len() != rank) {
            return Err(shape_err("concat_last_axis", format!("mixed ranks: {shapes:?}")));
        }
        let rows = if rank == 2 { shapes[0][0] } else { 1 };
        if rank == 2 && shapes.iter().any(|s| s[0] != rows) {
            return Err(shape_err("concat_last_axis", format!("row counts differ: {shapes:?}")));
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[rank - 1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        let datas: Vec<Vec<F>> = inputs.iter().map(|t| t.to_vec()).collect();
        for r in 0..rows {
            for (d, &w) in datas.iter().zip(widths.iter()) {
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let needs = inputs.iter().any(|t| t.needs_grad());
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(out, shape, Op::Concat { inputs: ids, widths }, needs))
    }

    fn unary_impl<'t>(&'t self, prim: Primitive<F>, x: Tensor<'t, F>) -> Result<Tensor<'t, F>> {
        let (xd, xsh, xn) = (x.to_vec(), x.shape(), x.needs_grad());
        let map = |f: &dyn Fn(F) -> F| xd.iter().map(|&v| f(v)).collect::<Vec<F>>();
        match prim {
            Primitive::Relu => Ok(self.push(
                map(&|v| if v > F::zero() { v } else { F::zero() }),
                xsh,
                Op::Relu { x: x.id },
                xn,
            )),
            Primitive::Sigmoid => Ok(self.push(
                map(&|v| F::one() / (F::one() + (-v).exp())),
                xsh,
                Op::Sigmoid { x: x.id },
                xn,
            )),
            Primitive::Tanh => Ok(self.push(map(&|v| v.tanh()), xsh, Op::Tanh { x: x.id }, xn)),
            Primitive::Log => Ok(self.push(map(&|v| v.ln()), xsh, Op::Log { x: x.id }, xn)),
            Primitive::Exp => Ok(self.push(map(&|v| v.exp()), xsh, Op::Exp { x: x.id }, xn)),
            Primitive::MeanOverRows => {
                if xsh.len() != 2 {
                    return Err(shape_err("mean_over_rows", format!("need a matrix, got {xsh:?}")));
                }
                let (rows, cols) = (xsh[0], xsh[1]);
                let inv = F::from_f64(1.0 / rows as f64);
                let mut out = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c] = out[c] + xd[r * cols + c];
                    }
                }
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
                Ok(self.push(out, vec![cols], Op::MeanRows { x: x.id }, xn))
            }
            Primitive::SumAll => {
                let mut s = F::zero();
                for &v in &xd {
                    s = s + v;
                }
                Ok(self.push(vec![s], vec![1], Op::SumAll { x: x.id }, xn))
            }
            Primitive::ScalarScale(c) => Ok(self.push(
                xd.iter().map(|&v| v * c).collect(),
                xsh,
                Op::Scale { x: x.id, factor: c },
                xn,
            )),
            Primitive::ScalarOffset(c) => Ok(self.push(
                xd.iter().map(|&v| v + c).collect(),
                xsh,
                Op::Offset { x: x.id },
                xn,
            )),
            Primitive::Clamp(lo, hi) => {
                if lo > hi {
                    return Err(shape_err("clamp", format!("lo {lo} > hi {hi}")));
                }
                let out = xd
                    .iter()
                    .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
                    .collect();
                Ok(self.push(out, xsh, Op::Clamp { x: x.id, lo, hi }, xn))
            }
            Primitive::GatherRows(indices) => {
                if xsh.len() != 2 {
                    return Err(shape_err("gather_rows", format!("need a matrix, got {xsh:?}")));
                }
                let (rows, cols) = (xsh[0], xsh[1]);
                if indices.is_empty() {
                    return Err(shape_err("gather_rows", "no indices".into()));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                    return Err(shape_err(
                        "gather_rows",
                        format!("index {bad} out of range for {rows} rows"),
                    ));
                }
                let mut out = Vec::with_capacity(indices.len() * cols);
                for &i in &indices {
                    out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
                }
                let k = indices.len();
                Ok(self.push(out, vec![k, cols], Op::GatherRows { x: x.id, indices }, xn))
            }
            Primitive::GatherElements(indices) => {
                if indices.is_empty() {
                    return Err(shape_err("gather_elements", "no indices".into()));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
                    return Err(shape_err(
                        "gather_elements",
                        format!("index {bad} out of range for {} elements", xd.len()),
                    ));
                }
                let out: Vec<F> = indices.iter().map(|&i| xd[i]).collect();
                let k = indices.len();
                Ok(self.push(out, vec![k], Op::GatherElements { x: x.id, indices }, xn))
            }
            Primitive::SliceLastAxis { start, len } => {
                let width = *xsh.last().unwrap();
                if len == 0 || start + len > width {
                    return Err(shape_err(
                        "slice_last_axis",
                        format!("slice {start}..{} of width {width}", start + len),
                    ));
                }
                let rows = if xsh.len() == 2 { xsh[0] } else { 1 };
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&xd[r * width + start..r * width + start + len]);
                }
                let shape = if xsh.len() == 2 { vec![rows, len] } else { vec![len] };
                Ok(self.push(out, shape, Op::SliceLast { x: x.id, start, len }, xn))
            }
            Primitive::Softmax { axis } => {
                if xd.iter().any(|v| !v.is_finite()) {
                    return Err(shape_err("softmax", "non-finite input".into()));
                }
                if axis >= xsh.len() {
                    return Err(shape_err("softmax", format!("axis {axis} for shape {xsh:?}")));
                }
                let out = softmax_forward(&xd, &xsh, axis);
                Ok(self.push(out, xsh, Op::Softmax { x: x.id, axis }, xn))
            }
            Primitive::Reshape(new_shape) => {
                check_shape("reshape", &new_shape, xd.len())?;
                Ok(self.push(xd, new_shape, Op::Reshape { x: x.id }, xn))
            }
            Primitive::Transpose => {
                if xsh.len() != 2 {
                    return Err(shape_err("transpose", format!("need a matrix, got {xsh:?}")));
                }
                let (rows, cols) = (xsh[0], xsh[1]);
                let mut out = vec![F::zero(); xd.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c * rows + r] = xd[r * cols + c];
                    }
                }
                Ok(self.push(out, vec![cols, rows], Op::Transpose { x: x.id }, xn))
            }
            _ => unreachable!("binary primitive routed to unary_impl"),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls;
    /// leaves never reached by this loss keep (or get) zero gradients.
    pub fn backward(&self, loss: Tensor<'_, F>) -> Result<()> {
        let node_count = self.len();
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.id].data.len() != 1 {
                return Err(shape_err(
                    "backward",
                    format!("loss must be scalar, got shape {:?}", nodes[loss.id].shape),
                ));
            }
        }
        // Propagate in a scratch buffer, then fold into persistent grads so
        // repeated backward calls accumulate instead of double-counting.
        let mut scratch: Vec<Option<Vec<F>>> = vec![None; node_count];
        scratch[loss.id] = Some(vec![F::one()]);

        for id in (0..=loss.id).rev() {
            let (op, needs) = self.with_node(id, |n| (n.op.clone(), n.needs_grad));
            if !needs {
                continue;
            }
            let Some(gout) = scratch[id].clone() else { continue };
            self.propagate(&op, id, &gout, &mut scratch);
        }

        let mut nodes = self.nodes.borrow_mut();
        for (id, s) in scratch.into_iter().enumerate() {
            if let Some(s) = s {
                let node = &mut nodes[id];
                let grad = node.grad.get_or_insert_with(|| vec![F::zero(); node.data.len()]);
                for (g, v) in grad.iter_mut().zip(s.iter()) {
                    *g = *g + *v;
                }
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Vec<F>>], id: usize, len: usize, add: impl Fn(&mut [F])) {
        let slot = scratch[id].get_or_insert_with(|| vec![F::zero(); len]);
        add(slot);
    }

    fn propagate(&self, op: &Op<F>, id: usize, gout: &[F], scratch: &mut [Option<Vec<F>>]) {
        let nodes = self.nodes.borrow();
        let data = |i: usize| -> &[F] { &nodes[i].data };
        let wants = |i: usize| nodes[i].needs_grad;
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if wants(*a) {
                    let da = mm_nt(gout, data(*b), m, n, k);
                    Self::accumulate(scratch, *a, m * k, |s| axpy(s, &da));
                }
                if wants(*b) {
                    let db = mm_tn(data(*a), gout, m, k, n);
                    Self::accumulate(scratch, *b, k * n, |s| axpy(s, &db));
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    Self::accumulate(scratch, *a, gout.len(), |s| axpy(s, gout));
                }
                if wants(*b) {
                    match broadcast {
                        AddBroadcast::None => {
                            Self::accumulate(scratch, *b, gout.len(), |s| axpy(s, gout));
                        }
                        AddBroadcast::Scalar => {
                            let mut total = F::zero();
                            for &g in gout {
                                total = total + g;
                            }
                            Self::accumulate(scratch, *b, 1, |s| s[0] = s[0] + total);
                        }
                        AddBroadcast::Row => {
                            let cols = nodes[*b].data.len();
                            Self::accumulate(scratch, *b, cols, |s| {
                                for (i, &g) in gout.iter().enumerate() {
                                    s[i % cols] = s[i % cols] + g;
                                }
                            });
                        }
                    }
                }
            }
            Op::Mul { a, b, scalar } => {
                let (ad, bd) = (data(*a), data(*b));
                match scalar {
                    None => {
                        if wants(*a) {
                            Self::accumulate(scratch, *a, ad.len(), |s| {
                                for i in 0..s.len() {
                                    s[i] = s[i] + gout[i] * bd[i];
                                }
                            });
                        }
                        if wants(*b) {
                            Self::accumulate(scratch, *b, bd.len(), |s| {
                                for i in 0..s.len() {
                                    s[i] = s[i] + gout[i] * ad[i];
                                }
                            });
                        }
                    }
                    Some(MulScalarSide::Left) => {
                        if wants(*a) {
                            let mut total = F::zero();
                            for (g, &x) in gout.iter().zip(bd.iter()) {
                                total = total + *g * x;
                            }
                            Self::accumulate(scratch, *a, 1, |s| s[0] = s[0] + total);
                        }
                        if wants(*b) {
                            let c = ad[0];
                            Self::accumulate(scratch, *b, bd.len(), |s| {
                                for i in 0..s.len() {
                                    s[i] = s[i] + gout[i] * c;
                                }
                            });
                        }
                    }
                    Some(MulScalarSide::Right) => {
                        if wants(*b) {
                            let mut total = F::zero();
                            for (g, &x) in gout.iter().zip(ad.iter()) {
                                total = total + *g * x;
                            }
                            Self::accumulate(scratch, *b, 1, |s| s[0] = s[0] + total);
                        }
                        if wants(*a) {
                            let c = bd[0];
                            Self::accumulate(scratch, *a, ad.len(), |s| {
                                for i in 0..s.len() {
                                    s[i] = s[i] + gout[i] * c;
                                }
                            });
                        }
                    }
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gout.len() / total;
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths.iter()) {
                    if wants(inp) {
                        let off = offset;
                        Self::accumulate(scratch, inp, rows * w, |s| {
                            for r in 0..rows {
                                for c in 0..w {
                                    s[r * w + c] = s[r * w + c] + gout[r * total + off + c];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xd = data(*x);
                    Self::accumulate(scratch, *x, xd.len(), |s| {
                        for i in 0..s.len() {
                            if xd[i] > F::zero() {
                                s[i] = s[i] + gout[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                if wants(*x) {
                    let y = &nodes[id].data;
                    Self::accumulate(scratch, *x, y.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + gout[i] * y[i] * (F::one() - y[i]);
                        }
                    });
                }
            }
            Op::Tanh { x } => {
                if wants(*x) {
                    let y = &nodes[id].data;
                    Self::accumulate(scratch, *x, y.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + gout[i] * (F::one() - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Log { x } => {
                if wants(*x) {
                    let xd = data(*x);
                    Self::accumulate(scratch, *x, xd.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + gout[i] / xd[i];
                        }
                    });
                }
            }
            Op::Exp { x } => {
                if wants(*x) {
                    let y = &nodes[id].data;
                    Self::accumulate(scratch, *x, y.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + gout[i] * y[i];
                        }
                    });
                }
            }
            Op::MeanRows { x } => {
                if wants(*x) {
                    let (rows, cols) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    let inv = F::from_f64(1.0 / rows as f64);
                    Self::accumulate(scratch, *x, rows * cols, |s| {
                        for r in 0..rows {
                            for c in 0..cols {
                                s[r * cols + c] = s[r * cols + c] + gout[c] * inv;
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if wants(*x) {
                    let len = nodes[*x].data.len();
                    let g = gout[0];
                    Self::accumulate(scratch, *x, len, |s| {
                        for v in s.iter_mut() {
                            *v = *v + g;
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let c = *factor;
                    Self::accumulate(scratch, *x, gout.len(), |s| {
                        for i in 0..s.len() {
                            s[i] = s[i] + gout[i] * c;
                        }
                    });
                }
            }
            Op::Offset { x } => {
                if wants(*x) {
                    Self::accumulate(scratch, *x, gout.len(), |s| axpy(s, gout));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    let xd = data(*x);
                    let (lo, hi) = (*lo, *hi);
                    Self::accumulate(scratch, *x, xd.len(), |s| {
                        for i in 0..s.len() {
                            if xd[i] >= lo && xd[i] <= hi {
                                s[i] = s[i] + gout[i];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, indices } => {
                if wants(*x) {
                    let cols = nodes[*x].shape[1];
                    let len = nodes[*x].data.len();
                    Self::accumulate(scratch, *x, len, |s| {
                        for (k, &row) in indices.iter().enumerate() {
                            for c in 0..cols {
                                s[row * cols + c] = s[row * cols + c] + gout[k * cols + c];
                            }
                        }
                    });
                }
            }
            Op::GatherElements { x, indices } => {
                if wants(*x) {
                    let len = nodes[*x].data.len();
                    Self::accumulate(scratch, *x, len, |s| {
                        for (k, &i) in indices.iter().enumerate() {
                            s[i] = s[i] + gout[k];
                        }
                    });
                }
            }
            Op::SliceLast { x, start, len } => {
                if wants(*x) {
                    let xsh = &nodes[*x].shape;
                    let width = *xsh.last().unwrap();
                    let rows = if xsh.len() == 2 { xsh[0] } else { 1 };
                    let total = nodes[*x].data.len();
                    let (start, len) = (*start, *len);
                    Self::accumulate(scratch, *x, total, |s| {
                        for r in 0..rows {
                            for c in 0..len {
                                s[r * width + start + c] = s[r * width + start + c] + gout[r * len + c];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = &nodes[id].data;
                    let shape = &nodes[id].shape;
                    let dx = softmax_backward(y, gout, shape, *axis);
                    Self::accumulate(scratch, *x, y.len(), |s| axpy(s, &dx));
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    Self::accumulate(scratch, *x, gout.len(), |s| axpy(s, gout));
                }
            }
            Op::Transpose { x } => {
                if wants(*x) {
                    let (rows, cols) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    Self::accumulate(scratch, *x, rows * cols, |s| {
                        for r in 0..rows {
                            for c in 0..cols {
                                s[r * cols + c] = s[r * cols + c] + gout[c * rows + r];
                            }
                        }
                    });
                }
            }
        }
    }
}

impl<'t, F: Scalar> Tensor<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.tape.with_node(self.id, |n| n.data.clone())
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> F {
        self.tape.with_node(self.id, |n| {
            assert!(n.data.len() == 1, "value() on tensor of shape {:?}", n.shape);
            n.data[0]
        })
    }

    /// Accumulated gradient; zeros if backward never reached this tensor.
    pub fn grad(&self) -> Vec<F> {
        self.tape
            .with_node(self.id, |n| n.grad.clone().unwrap_or_else(|| vec![F::zero(); n.data.len()]))
    }

    fn needs_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.needs_grad)
    }

    fn apply1(self, prim: Primitive<F>) -> Self {
        self.tape.apply(prim, &[self]).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn matmul(self, rhs: Self) -> Self {
        self.tape.apply(Primitive::Matmul, &[self, rhs]).unwrap_or_else(|e| panic!("{e}"))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Self) -> Self {
        self.tape.apply(Primitive::Add, &[self, rhs]).unwrap_or_else(|e| panic!("{e}"))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Self) -> Self {
        self.tape
            .apply(Primitive::ElementwiseMul, &[self, rhs])
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn relu(self) -> Self {
        self.apply1(Primitive::Relu)
    }
    pub fn sigmoid(self) -> Self {
        self.apply1(Primitive::Sigmoid)
    }
    pub fn tanh(self) -> Self {
        self.apply1(Primitive::Tanh)
    }
    pub fn log(self) -> Self {
        self.apply1(Primitive::Log)
    }
    pub fn exp(self) -> Self {
        self.apply1(Primitive::Exp)
    }
    pub fn mean_rows(self) -> Self {
        self.apply1(Primitive::MeanOverRows)
    }
    pub fn sum(self) -> Self {
        self.apply1(Primitive::SumAll)
    }
    pub fn scale(self, c: F) -> Self {
        self.apply1(Primitive::ScalarScale(c))
    }
    pub fn offset(self, c: F) -> Self {
        self.apply1(Primitive::ScalarOffset(c))
    }
    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Self {
        self.scale(-F::one()).offset(F::one())
    }
    pub fn clamp(self, lo: F, hi: F) -> Self {
        self.apply1(Primitive::Clamp(lo, hi))
    }
    pub fn gather_rows(self, indices: &[usize]) -> Self {
        self.apply1(Primitive::GatherRows(indices.to_vec()))
    }
    pub fn gather_elements(self, indices: &[usize]) -> Self {
        self.apply1(Primitive::GatherElements(indices.to_vec()))
    }
    pub fn slice_last(self, start: usize, len: usize) -> Self {
        self.apply1(Primitive::SliceLastAxis { start, len })
    }
    pub fn softmax(self, axis: usize) -> Self {
        self.apply1(Primitive::Softmax { axis })
    }
    pub fn reshape(self, shape: &[usize]) -> Self {
        self.apply1(Primitive::Reshape(shape.to_vec()))
    }
    pub fn transpose(self) -> Self {
        self.apply1(Primitive::Transpose)
    }
}

fn axpy<F: Scalar>(acc: &mut [F], x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x.iter()) {
        *a = *a + v;
    }
}

fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `x [m,n] @ y^T` where `y` is `[k,n]`; result `[m,k]`.
fn mm_nt<F: Scalar>(x: &[F], y: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = F::zero();
            for j in 0..n {
                s = s + x[i * n + j] * y[p * n + j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `x^T @ y` where `x` is `[m,k]`, `y` is `[m,n]`; result `[k,n]`.
fn mm_tn<F: Scalar>(x: &[F], y: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let xv = x[i * k + p];
            let yrow = &y[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + xv * yrow[j];
            }
        }
    }
    out
}

/// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
fn softmax_forward<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (slices, len, stride, base_stride) = softmax_layout(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for s in 0..slices {
        let base = s * base_stride;
        let mut max = x[base];
        for i in 1..len {
            let v = x[base + i * stride];
            if v > max {
                max = v;
            }
        }
        let mut denom = F::zero();
        for i in 0..len {
            let e = (x[base + i * stride] - max).exp();
            out[base + i * stride] = e;
            denom = denom + e;
        }
        for i in 0..len {
            out[base + i * stride] = out[base + i * stride] / denom;
        }
    }
    out
}

fn softmax_backward<F: Scalar>(y: &[F], gout: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (slices, len, stride, base_stride) = softmax_layout(shape, axis);
    let mut dx = vec![F::zero(); y.len()];
    for s in 0..slices {
        let base = s * base_stride;
        let mut dot = F::zero();
        for i in 0..len {
            let idx = base + i * stride;
            dot = dot + gout[idx] * y[idx];
        }
        for i in 0..len {
            let idx = base + i * stride;
            dx[idx] = y[idx] * (gout[idx] - dot);
        }
    }
    dx
}

/// (number of slices, slice length, element stride, slice base stride).
fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1, 0),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => panic!("softmax layout: shape {shape:?} axis {axis}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_matches_definition() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape: Tape<f64> = Tape::new();
        let i2 = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(i2.matmul(m).to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![0.0], &[1]);
        assert_eq!(x.sigmoid().to_vec(), vec![0.5]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![0.0, 0.0], &[2]).softmax(0);
        assert_eq!(a.to_vec(), vec![0.5, 0.5]);

        let b = tape.leaf(vec![0.0f64, 3.0f64.ln()], &[2]).softmax(0);
        let bv = b.to_vec();
        assert!((bv[0] - 0.25).abs() < 1e-12 && (bv[1] - 0.75).abs() < 1e-12);

        let c = tape.leaf(vec![1000.0, 1000.0], &[2]).softmax(0);
        assert_eq!(c.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape: Tape<f64> = Tape::new();
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.7];
        let y = tape.leaf(logits.clone(), &[2, 3]).softmax(1).to_vec();
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
        let y2 = tape.leaf(shifted, &[2, 3]).softmax(1).to_vec();
        for (a, b) in y.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![f64::NAN, 0.0], &[2]);
        assert!(tape.apply(Primitive::Softmax { axis: 0 }, &[x]).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf_grad(vec![1.0, 2.0], &[2]);
        let loss = x.mul(x).sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_log_sigmoid() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf_grad(vec![0.0], &[1]);
        let loss = w.sigmoid().log().sum();
        tape.backward(loss).unwrap();
        let g = w.grad();
        assert!((g[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf_grad(vec![1.0, 2.0], &[2]);
        let y = x.relu();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf_grad(vec![3.0], &[1]);
        let loss = x.mul(x).sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad(), vec![12.0]);
    }

    #[test]
    fn unreachable_grad_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf_grad(vec![1.0], &[1]);
        let y = tape.leaf_grad(vec![5.0], &[1]);
        let loss = x.mul(x).sum();
        tape.backward(loss).unwrap();
        assert_eq!(y.grad(), vec![0.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0], &[1, 3]);
        let b = tape.leaf(vec![1.0, 2.0], &[2, 1]);
        let err = tape.apply(Primitive::Matmul, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[1, 3]") && err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let tape: Tape<f64> = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert!(tape.apply(Primitive::GatherRows(vec![2]), &[t]).is_err());
        assert!(tape.apply(Primitive::GatherElements(vec![4]), &[t]).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 5.0, 6.0], &[2, 2]);
        let b = tape.leaf(vec![3.0, 7.0], &[2, 1]);
        let c = tape.concat(&[a, b]);
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.slice_last(2, 1).to_vec(), vec![3.0, 7.0]);
        assert_eq!(c.slice_last(0, 2).to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn add_row_broadcast() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let bias = tape.leaf(vec![10.0, 20.0], &[2]);
        assert_eq!(a.add(bias).to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape: Tape<f32> = Tape::new();
            let a = tape.leaf(vec![0.1, -0.4, 0.33, 0.25, -0.9, 1.5], &[2, 3]);
            let b = tape.leaf(vec![0.7, -0.2, 0.05, 0.6, -1.1, 0.8], &[3, 2]);
            a.matmul(b).tanh().softmax(1).to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
