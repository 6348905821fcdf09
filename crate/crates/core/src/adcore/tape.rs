//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly, appends a node to its
//! [`Tape`], and fails with [`AdError::NonFinite`] if it produced NaN or
//! infinity. [`Tape::backward`] then walks the nodes in reverse order and
//! accumulates gradients into the [`ParamStore`].

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::kernels;
use super::tensor::{broadcast_shapes, broadcast_strides, for_each_broadcast};
use super::{AdError, ParamId, ParamStore, Tensor};

type Result<T> = std::result::Result<T, AdError>;

/// A differentiable operation whose forward pass is computed by the caller.
///
/// Used for fused kernels (such as feature aggregation) whose reverse rule
/// is cheaper written by hand than composed from primitives.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input; `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Elu,
    Sigmoid,
    Softplus,
    Scale(f64),
    AddScalar,
}

enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    SumAll(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Select { mask: Rc<[bool]>, a: usize, b: usize },
    CumsumExclusive(usize),
    Gather { x: usize, rows: Rc<[[u32; 4]]>, weights: Rc<[[f64; 4]]> },
    /// `cols` is the forward patch matrix.
    Conv2d { x: usize, w: usize, cols: Vec<f64> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single reverse pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of leaf nodes produced by a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf or parameter node.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Places a parameter's current value on the tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_unchecked(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Records an externally computed operation.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        let name = op.name();
        let requires_grad = self.any_requires_grad(inputs.iter().map(|v| v.id));
        let inputs = inputs.iter().map(|v| v.id).collect();
        self.push(name, output, Op::Custom { inputs, op }, requires_grad)
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if xs.is_empty() {
            return Err(AdError::InvalidArgument("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let parts: Vec<&Tensor> = xs.iter().map(|v| &nodes[v.id].value).collect();
            kernels::concat(&parts, axis)?
        };
        let requires_grad = self.any_requires_grad(xs.iter().map(|v| v.id));
        let ids = xs.iter().map(|v| v.id).collect();
        self.push("concat", value, Op::Concat { xs: ids, axis }, requires_grad)
    }

    /// Element-wise `mask ? a : b` with a precomputed mask.
    pub fn select<'t>(&'t self, mask: Rc<[bool]>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape() != tb.shape() || mask.len() != ta.numel() {
                return Err(AdError::ShapeMismatch {
                    op: "select",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let data = mask
                .iter()
                .zip(ta.data().iter().zip(tb.data()))
                .map(|(&m, (&x, &y))| if m { x } else { y })
                .collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        let requires_grad = self.any_requires_grad([a.id, b.id]);
        self.push(
            "select",
            value,
            Op::Select {
                mask,
                a: a.id,
                b: b.id,
            },
            requires_grad,
        )
    }

    fn any_requires_grad(&self, ids: impl IntoIterator<Item = usize>) -> bool {
        let nodes = self.nodes.borrow();
        ids.into_iter().any(|id| nodes[id].requires_grad)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Runs the reverse pass from a scalar `root` and adds the resulting
    /// parameter gradients into `store`.
    pub fn backward(&self, root: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
        self.reverse(root, Some(store))
    }

    /// Reverse pass that only reports leaf gradients.
    pub fn gradients(&self, root: Var<'_>) -> Result<Gradients> {
        self.reverse(root, None)
    }

    fn reverse(&self, root: Var<'_>, mut store: Option<&mut ParamStore>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(AdError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(AdError::TapeConsumed);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |to: usize, grad: Tensor| {
                if !nodes[to].requires_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let value_of = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => leaf_grads[id] = Some(g),
                Op::Param(pid) => {
                    if let Some(store) = store.as_deref_mut() {
                        store.accumulate(*pid, &g);
                    }
                    leaf_grads[id] = Some(g);
                }
                Op::Binary(kind, a, b) => {
                    let need = (nodes[*a].requires_grad, nodes[*b].requires_grad);
                    let (ga, gb) = binary_backward(*kind, value_of(*a), value_of(*b), &g, need);
                    if let Some(ga) = ga {
                        send(*a, ga);
                    }
                    if let Some(gb) = gb {
                        send(*b, gb);
                    }
                }
                Op::Unary(kind, x) => {
                    send(*x, unary_backward(*kind, value_of(*x), &node.value, &g));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (value_of(*a), value_of(*b));
                    if nodes[*a].requires_grad {
                        send(*a, kernels::matmul_grad_lhs(&g, tb, ta.shape()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, kernels::matmul_grad_rhs(ta, &g));
                    }
                }
                Op::SumAxis { x, axis } => {
                    send(*x, kernels::expand_axis(&g, value_of(*x).shape(), *axis, 1.0));
                }
                Op::MeanAxis { x, axis } => {
                    let shape = value_of(*x).shape();
                    let scale = 1.0 / shape[*axis] as f64;
                    send(*x, kernels::expand_axis(&g, shape, *axis, scale));
                }
                Op::SumAll(x) => {
                    send(*x, Tensor::full(value_of(*x).shape(), g.item()));
                }
                Op::BroadcastTo(x) => {
                    send(*x, reduce_to_shape(&g, value_of(*x).shape()));
                }
                Op::Reshape(x) => {
                    let shape = value_of(*x).shape().to_vec();
                    send(*x, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Concat { xs, axis } => {
                    let mut start = 0;
                    for &x in xs {
                        let len = value_of(x).shape()[*axis];
                        if nodes[x].requires_grad {
                            send(x, kernels::slice(&g, *axis, start, len));
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    send(*x, kernels::unslice(&g, value_of(*x).shape(), *axis, *start));
                }
                Op::Select { mask, a, b } => {
                    let shape = g.shape().to_vec();
                    let (mut ga, mut gb) = (Vec::with_capacity(g.numel()), Vec::with_capacity(g.numel()));
                    for (&m, &gv) in mask.iter().zip(g.data()) {
                        ga.push(if m { gv } else { 0.0 });
                        gb.push(if m { 0.0 } else { gv });
                    }
                    send(*a, Tensor::from_parts(shape.clone(), ga));
                    send(*b, Tensor::from_parts(shape, gb));
                }
                Op::CumsumExclusive(x) => send(*x, kernels::cumsum_exclusive_grad(&g)),
                Op::Gather { x, rows, weights } => {
                    send(*x, kernels::gather_rows_grad(&g, value_of(*x).shape(), rows, weights));
                }
                Op::Conv2d { x, w, cols } => {
                    let (tx, tw) = (value_of(*x), value_of(*w));
                    let (gx, gw) = kernels::conv2d_grad(
                        tx,
                        tw,
                        cols,
                        &g,
                        nodes[*x].requires_grad,
                    );
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    send(*w, gw);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| value_of(i)).collect();
                    let input_grads = op.backward(&values, &node.value, &g);
                    for (&i, gi) in inputs.iter().zip(input_grads) {
                        if let Some(gi) = gi {
                            send(i, gi);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let sa = broadcast_strides(shape, out);
    let mut acc = Tensor::zeros(shape);
    let data = acc.data_mut();
    let gd = g.data();
    for_each_broadcast(out, &sa, &sa, |o, ia, _| data[ia] += gd[o]);
    acc
}

fn binary_forward(kind: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| AdError::ShapeMismatch {
        op: binary_name(kind),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| apply_binary(kind, x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let numel = out.iter().product();
    let mut data = vec![0.0; numel];
    {
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
            data[o] = apply_binary(kind, ad[ia], bd[ib]);
        });
    }
    Ok(Tensor::from_parts(out, data))
}

#[inline]
fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

/// Gradients of a binary op; an input whose flag is off gets `None`.
fn binary_backward(
    kind: Binary,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let grad_a = |go: f64, y: f64| match kind {
        Binary::Add | Binary::Sub => go,
        Binary::Mul => go * y,
        Binary::Div => go / y,
    };
    let grad_b = |go: f64, x: f64, y: f64| match kind {
        Binary::Add => go,
        Binary::Sub => -go,
        Binary::Mul => go * x,
        Binary::Div => -go * x / (y * y),
    };
    if a.shape() == g.shape() && b.shape() == g.shape() {
        let ga = need.0.then(|| {
            let data = gd.iter().zip(bd).map(|(&go, &y)| grad_a(go, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        });
        let gb = need.1.then(|| {
            let data = gd
                .iter()
                .zip(ad)
                .zip(bd)
                .map(|((&go, &x), &y)| grad_b(go, x, y))
                .collect();
            Tensor::from_parts(b.shape().to_vec(), data)
        });
        return (ga, gb);
    }
    let out = g.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = need.0.then(|| Tensor::zeros(a.shape()));
    let mut gb = need.1.then(|| Tensor::zeros(b.shape()));
    {
        let mut gad = ga.as_mut().map(|t| t.data_mut());
        let mut gbd = gb.as_mut().map(|t| t.data_mut());
        for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
            let go = gd[o];
            if let Some(d) = gad.as_deref_mut() {
                d[ia] += grad_a(go, bd[ib]);
            }
            if let Some(d) = gbd.as_deref_mut() {
                d[ib] += grad_b(go, ad[ia], bd[ib]);
            }
        });
    }
    (ga, gb)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Relu => x.max(0.0),
        Unary::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Scale(c) => c * x,
        Unary::AddScalar => unreachable!("handled by add_scalar"),
    }
}

fn unary_name(kind: Unary) -> &'static str {
    match kind {
        Unary::Neg => "neg",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Sqrt => "sqrt",
        Unary::Square => "square",
        Unary::Relu => "relu",
        Unary::Elu => "elu",
        Unary::Sigmoid => "sigmoid",
        Unary::Softplus => "softplus",
        Unary::Scale(_) => "scale",
        Unary::AddScalar => "add_scalar",
    }
}

fn unary_backward(kind: Unary, x: &Tensor, out: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(out.data())
        .zip(g.data())
        .map(|((&x, &y), &g)| match kind {
            Unary::Neg => -g,
            Unary::Exp => g * y,
            Unary::Log => g / x,
            Unary::Sqrt => g / (2.0 * y),
            Unary::Square => 2.0 * x * g,
            Unary::Relu => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    g
                } else {
                    g * (y + 1.0)
                }
            }
            Unary::Sigmoid => g * y * (1.0 - y),
            Unary::Softplus => g * sigmoid(x),
            Unary::Scale(c) => g * c,
            Unary::AddScalar => g,
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Copy of this value as a constant (no gradient flows through it).
    pub fn detach(&self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.constant(value)
    }

    fn binary(self, kind: Binary, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            binary_forward(kind, &nodes[self.id].value, &nodes[rhs.id].value)?
        };
        let rg = self.tape.any_requires_grad([self.id, rhs.id]);
        self.tape
            .push(binary_name(kind), value, Op::Binary(kind, self.id, rhs.id), rg)
    }

    fn unary(self, kind: Unary) -> Result<Var<'t>> {
        let value = self.value().map(|x| unary_forward(kind, x));
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push(unary_name(kind), value, Op::Unary(kind, self.id), rg)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, rhs)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(self) -> Result<Var<'t>> {
        self.unary(Unary::Elu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().map(|x| x + c);
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push("add_scalar", value, Op::Unary(Unary::AddScalar, self.id), rg)
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        let rg = self.tape.any_requires_grad([self.id, rhs.id]);
        self.tape
            .push("matmul", value, Op::MatMul(self.id, rhs.id), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = kernels::reduce_axis(&self.value(), axis, 1.0, "sum_axis")?;
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push("sum_axis", value, Op::SumAxis { x: self.id, axis }, rg)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let n = *v.shape().get(axis).ok_or(AdError::InvalidArgument(format!(
                "axis {axis} out of range for {:?}",
                v.shape()
            )))?;
            kernels::reduce_axis(&v, axis, 1.0 / n as f64, "mean_axis")?
        };
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push("mean_axis", value, Op::MeanAxis { x: self.id, axis }, rg)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape.push("sum_all", value, Op::SumAll(self.id), rg)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            match broadcast_shapes(v.shape(), shape) {
                Some(s) if s == shape => {}
                _ => {
                    return Err(AdError::ShapeMismatch {
                        op: "broadcast_to",
                        lhs: v.shape().to_vec(),
                        rhs: shape.to_vec(),
                    })
                }
            }
            let sa = broadcast_strides(v.shape(), shape);
            let mut data = vec![0.0; shape.iter().product()];
            let vd = v.data();
            for_each_broadcast(shape, &sa, &sa, |o, ia, _| data[o] = vd[ia]);
            Tensor::from_parts(shape.to_vec(), data)
        };
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push("broadcast_to", value, Op::BroadcastTo(self.id), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshaped(shape)?;
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape.push("reshape", value, Op::Reshape(self.id), rg)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return Err(AdError::InvalidArgument(format!(
                    "slice {start}..{} of axis {axis} out of range for {:?}",
                    start + len,
                    v.shape()
                )));
            }
            kernels::slice(&v, axis, start, len)
        };
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape.push(
            "slice",
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        )
    }

    /// Exclusive prefix sum along the last axis.
    pub fn cumsum_exclusive(self) -> Result<Var<'t>> {
        let value = kernels::cumsum_exclusive(&self.value());
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape
            .push("cumsum_exclusive", value, Op::CumsumExclusive(self.id), rg)
    }

    /// Weighted combination of up to four rows of a `[rows, channels]`
    /// matrix per output row; the bilinear-interpolation primitive.
    pub fn gather_rows(self, rows: Rc<[[u32; 4]]>, weights: Rc<[[f64; 4]]>) -> Result<Var<'t>> {
        let value = kernels::gather_rows(&self.value(), &rows, &weights)?;
        let rg = self.tape.any_requires_grad([self.id]);
        self.tape.push(
            "gather_rows",
            value,
            Op::Gather {
                x: self.id,
                rows,
                weights,
            },
            rg,
        )
    }

    /// Same-padded, stride-1 convolution of an `[B, H, W, Cin]` input with a
    /// `[k, k, Cin, Cout]` kernel.
    pub fn conv2d(self, weight: Var<'t>) -> Result<Var<'t>> {
        let (value, cols) = {
            let nodes = self.tape.nodes.borrow();
            kernels::conv2d(&nodes[self.id].value, &nodes[weight.id].value)?
        };
        let rg = self.tape.any_requires_grad([self.id, weight.id]);
        let cols = if rg { cols } else { Vec::new() };
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                cols,
            },
            rg,
        )
    }
}
