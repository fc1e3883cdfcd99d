//! Computation graph recording and reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Node ids are
//! assigned in creation order, which is also a topological order, so a
//! backward pass is a single reverse scan. Backward rules are written in terms
//! of the same differentiable operations, so gradients computed with
//! `create_graph = true` are graph nodes themselves and can be differentiated
//! again. Hessian-vector products use exactly that double-backward path.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Recip(usize),
    /// `x * mask` with a constant mask; realizes ReLU and every masked backward.
    MaskMul(usize, Rc<Tensor>),
    /// `clamp(x, 0, 6)`; the mask is 1 strictly inside (0, 6).
    Relu6(usize, Rc<Tensor>),
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Conv {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    ConvGradInput {
        gy: usize,
        k: usize,
        geom: ConvGeom,
    },
    ConvGradKernel {
        x: usize,
        gy: usize,
        geom: ConvGeom,
    },
    Resize(usize),
    ResizeAdjoint(usize),
    AvgPool2(usize),
    AvgPool2Adjoint(usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::MaskMul(..) => "mask_mul",
            Op::Relu6(..) => "relu6",
            Op::Matmul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumTo(..) => "sum_to",
            Op::Conv { .. } => "conv2d",
            Op::ConvGradInput { .. } => "conv2d_grad_input",
            Op::ConvGradKernel { .. } => "conv2d_grad_kernel",
            Op::Resize(..) => "bilinear_resize",
            Op::ResizeAdjoint(..) => "bilinear_resize_adjoint",
            Op::AvgPool2(..) => "avg_pool2",
            Op::AvgPool2Adjoint(..) => "avg_pool2_adjoint",
        }
    }

    fn parents(&self) -> ([usize; 2], usize) {
        match *self {
            Op::Leaf => ([0, 0], 0),
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::MaskMul(a, _)
            | Op::Relu6(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Resize(a)
            | Op::ResizeAdjoint(a)
            | Op::AvgPool2(a)
            | Op::AvgPool2Adjoint(a) => ([a, 0], 1),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul { a, b, .. }
            | Op::Conv { x: a, k: b, .. }
            | Op::ConvGradInput { gy: a, k: b, .. }
            | Op::ConvGradKernel { x: a, gy: b, .. } => ([a, b], 2),
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

struct Inner {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    strict: Cell<bool>,
    fault: Cell<Option<(&'static str, usize)>>,
}

/// A recording of tensor operations. Cheap to clone (shared handle).
///
/// A graph is confined to the thread that created it; independent graphs can
/// be built and differentiated on different threads.
#[derive(Clone)]
pub struct Graph(Rc<Inner>);

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(Inner {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
            strict: Cell::new(false),
            fault: Cell::new(None),
        }))
    }

    /// In strict mode the first operation producing a NaN or infinity is
    /// remembered and reported by [`Graph::check_finite`] and [`grad`].
    pub fn strict() -> Self {
        let g = Self::new();
        g.0.strict.set(true);
        g
    }

    pub fn len(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, false)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.fault.get() {
            Some((op, node)) => Err(AutodiffError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push_node(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.0.nodes.borrow_mut();
        let id = nodes.len();
        if self.0.strict.get() && self.0.fault.get().is_none() && !value.all_finite() {
            self.0.fault.set(Some((op.name(), id)));
        }
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Appends the result of an operation whose parents are `parents`.
    pub(crate) fn record(&self, op: Op, value: Tensor) -> Var {
        let (p, n) = op.parents();
        let requires_grad = !self.0.no_grad.get() && {
            let nodes = self.0.nodes.borrow();
            p[..n].iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(op, value, requires_grad)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        self.0.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// A handle to a node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Var {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.0.nodes.borrow()[self.id].requires_grad
    }

    /// The value as a fresh constant, cutting the gradient path.
    pub fn detach(&self) -> Var {
        self.graph.constant((*self.value()).clone())
    }

    pub(crate) fn check_graph(&self, other: &Var) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignGraph)
        }
    }
}

struct NoGradGuard<'a> {
    graph: &'a Graph,
    previous: bool,
}

impl<'a> NoGradGuard<'a> {
    fn new(graph: &'a Graph, on: bool) -> Self {
        let previous = graph.0.no_grad.replace(on);
        Self { graph, previous }
    }
}

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.graph.0.no_grad.set(self.previous);
    }
}

/// Reverse-mode gradients of the scalar `f` with respect to each of `wrt`.
///
/// With `create_graph` the returned variables are recorded in the same graph
/// and can be differentiated again; otherwise they are constants. A variable
/// that `f` does not depend on gets a zero gradient.
pub fn grad(f: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let graph = f.graph.clone();
    graph.check_finite()?;
    for w in wrt {
        f.check_graph(w)?;
    }
    let fval = f.value();
    if fval.len() != 1 {
        return Err(AutodiffError::NotScalar(fval.shape().to_vec()));
    }

    let n = f.id + 1;
    // needed[i]: node i lies on a path from some `wrt` node up to `f`.
    let mut needed = vec![false; n];
    let mut is_target = vec![false; n];
    for w in wrt {
        if w.id < n {
            needed[w.id] = true;
            is_target[w.id] = true;
        }
    }
    let ops: Vec<(Op, bool)> = {
        let nodes = graph.0.nodes.borrow();
        nodes[..n]
            .iter()
            .map(|node| (node.op.clone(), node.requires_grad))
            .collect()
    };
    for (i, (op, _)) in ops.iter().enumerate() {
        if !needed[i] {
            let (p, k) = op.parents();
            needed[i] = p[..k].iter().any(|&j| needed[j]);
        }
    }

    let _guard = NoGradGuard::new(&graph, !create_graph);
    let mut grads: Vec<Option<Var>> = vec![None; n];
    if needed[f.id] {
        grads[f.id] = Some(graph.constant(Tensor::ones(fval.shape())));
    }
    for i in (0..n).rev() {
        if !needed[i] {
            continue;
        }
        let Some(gy) = grads[i].clone() else { continue };
        let (op, _) = &ops[i];
        let (p, k) = op.parents();
        if k == 0 {
            continue;
        }
        let wanted = [needed[p[0]], k > 1 && needed[p[1]]];
        if !wanted[0] && !wanted[1] {
            continue;
        }
        let contribs = backward(&graph, i, op, &gy, wanted)?;
        for (slot, c) in contribs.into_iter().enumerate() {
            if let Some(c) = c {
                let pid = p[slot];
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
        if !is_target[i] {
            grads[i] = None;
        }
    }
    let out = wrt
        .iter()
        .map(|w| {
            grads
                .get(w.id)
                .cloned()
                .flatten()
                .unwrap_or_else(|| graph.constant(Tensor::zeros(w.value().shape())))
        })
        .collect();
    Ok(out)
}

/// Gradient contributions of node `id` to its (up to two) parents.
fn backward(
    graph: &Graph,
    id: usize,
    op: &Op,
    gy: &Var,
    wanted: [bool; 2],
) -> Result<[Option<Var>; 2]> {
    let v = |i: usize| graph.var(i);
    let shape_of = |i: usize| graph.value(i).shape().to_vec();
    let mut out: [Option<Var>; 2] = [None, None];
    match op {
        Op::Leaf => {}
        Op::Add(..) => {
            out = [wanted[0].then(|| gy.clone()), wanted[1].then(|| gy.clone())];
        }
        Op::Sub(..) => {
            out[0] = wanted[0].then(|| gy.clone());
            if wanted[1] {
                out[1] = Some(gy.neg());
            }
        }
        Op::Mul(a, b) => {
            if wanted[0] {
                out[0] = Some(gy.mul(&v(*b))?);
            }
            if wanted[1] {
                out[1] = Some(gy.mul(&v(*a))?);
            }
        }
        Op::Scale(_, c) => out[0] = Some(gy.scale(*c)),
        Op::Exp(_) => out[0] = Some(gy.mul(&v(id))?),
        Op::Log(a) => out[0] = Some(gy.mul(&v(*a).recip())?),
        Op::Recip(_) => {
            let y = v(id);
            out[0] = Some(gy.mul(&y.mul(&y)?)?.neg());
        }
        Op::MaskMul(_, mask) | Op::Relu6(_, mask) => out[0] = Some(gy.mask_mul(mask.clone())?),
        Op::Matmul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (v(*a), v(*b), *ta, *tb);
            if wanted[0] {
                out[0] = Some(if ta {
                    b.matmul_t(gy, tb, true)?
                } else {
                    gy.matmul_t(&b, false, !tb)?
                });
            }
            if wanted[1] {
                out[1] = Some(if tb {
                    gy.matmul_t(&a, true, ta)?
                } else {
                    a.matmul_t(gy, !ta, false)?
                });
            }
        }
        Op::Reshape(a) => out[0] = Some(gy.reshape(&shape_of(*a))?),
        Op::BroadcastTo(a) => out[0] = Some(gy.sum_to(&shape_of(*a))?),
        Op::SumTo(a) => out[0] = Some(gy.broadcast_to(&shape_of(*a))?),
        Op::Conv { x, k, geom } => {
            let (x, k) = (v(*x), v(*k));
            if wanted[0] {
                out[0] = Some(gy.conv2d_grad_input(&k, &x.shape(), *geom)?);
            }
            if wanted[1] {
                out[1] = Some(x.conv2d_grad_kernel(gy, &k.shape(), *geom)?);
            }
        }
        Op::ConvGradInput { gy: g, k, geom } => {
            // z = A(k)^T g  =>  dz/dg^T gz = conv(gz, k), dz/dk^T gz = kgrad(gz, g)
            let (g, k) = (v(*g), v(*k));
            if wanted[0] {
                out[0] = Some(gy.conv2d(&k, *geom)?);
            }
            if wanted[1] {
                out[1] = Some(gy.conv2d_grad_kernel(&g, &k.shape(), *geom)?);
            }
        }
        Op::ConvGradKernel { x, gy: g, geom } => {
            let (x, g) = (v(*x), v(*g));
            if wanted[0] {
                out[0] = Some(g.conv2d_grad_input(gy, &x.shape(), *geom)?);
            }
            if wanted[1] {
                out[1] = Some(x.conv2d(gy, *geom)?);
            }
        }
        Op::Resize(a) => {
            let s = shape_of(*a);
            out[0] = Some(gy.bilinear_resize_adjoint(s[2], s[3])?);
        }
        Op::ResizeAdjoint(a) => {
            let s = shape_of(*a);
            out[0] = Some(gy.bilinear_resize(s[2], s[3])?);
        }
        Op::AvgPool2(a) => {
            let s = shape_of(*a);
            out[0] = Some(gy.avg_pool2_adjoint(s[2], s[3])?);
        }
        Op::AvgPool2Adjoint(_) => out[0] = Some(gy.avg_pool2()?),
    }
    Ok(out)
}
