//! Eager, tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] executes immediately and appends one node to
//! its [`Tape`]. Node order is creation order, which is a topological order,
//! so [`Tape::backward`] is a single reverse sweep.
// Arithmetic on `Var` is fallible (shape checks), so it cannot be the std ops traits.
#![allow(clippy::should_implement_trait, clippy::needless_range_loop)]

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    MulAxis { x: usize, v: usize, axis: usize },
    AddAxis { x: usize, v: usize, axis: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize),
    Normalize { x: usize, axis: usize, inv_std: Vec<T> },
    Gelu(usize),
    LeakyRelu(usize),
    Abs(usize),
    Square(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    DwConv3x3 { x: usize, w: usize },
    AvgPool(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of the leaves reachable from a loss.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that gradients are collected for when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
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

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate when a value
    /// feeds several nodes; only leaves keep theirs.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.id];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        let mut out = Gradients {
            grads: (0..=loss.id).map(|_| None).collect(),
        };
        if !ln.requires_grad {
            return Ok(out);
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            if let Op::Leaf = node.op {
                out.grads[id] = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(out)
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in &[*a, *b] {
                if let Some(d) = slot(grads, nodes, i) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(bv) {
                    *d = *d + g * o;
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * o;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s)[0];
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * sv);
            }
            if nodes[*s].requires_grad {
                let acc: T = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).sum();
                let d = slot(grads, nodes, *s).unwrap();
                d[0] = d[0] + acc;
            }
        }
        Op::DivScalar(a, s) => {
            let sv = val(*s)[0];
            let inv = T::one() / sv;
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * inv);
            }
            if nodes[*s].requires_grad {
                let acc: T = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).sum();
                let d = slot(grads, nodes, *s).unwrap();
                d[0] = d[0] - acc * inv * inv;
            }
        }
        Op::MulAxis { x, v, axis } => {
            let (outer, n, inner) = kernels::axis_split(nodes[*x].value.shape(), *axis);
            let (xv, vv) = (val(*x), val(*v));
            if let Some(d) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        let s = vv[j];
                        for k in base..base + inner {
                            d[k] = d[k] + g[k] * s;
                        }
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *v) {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        let s: T = (base..base + inner).map(|k| g[k] * xv[k]).sum();
                        d[j] = d[j] + s;
                    }
                }
            }
        }
        Op::AddAxis { x, v, axis } => {
            let (outer, n, inner) = kernels::axis_split(nodes[*x].value.shape(), *axis);
            if let Some(d) = slot(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = slot(grads, nodes, *v) {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        let s: T = g[base..base + inner].iter().copied().sum();
                        d[j] = d[j] + s;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, bv, d, m, k, n);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                kernels::matmul_tn_acc(av, g, d, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            // output is s[0]×s[1]; its transpose is the input layout
            let t = kernels::transpose(g, s[0], s[1]);
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(&t).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::Softmax(a) => {
            let cols = *node.value.shape().last().unwrap();
            let y = node.value.data();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((dr, gr), yr) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + y * (g - dot);
                    }
                }
            }
        }
        Op::Normalize { x, axis, inv_std } => {
            let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
            let xhat = node.value.data();
            if let Some(d) = slot(grads, nodes, *x) {
                let nf = T::from_f64(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for j in 0..n {
                            sg = sg + g[idx(j)];
                            sgx = sgx + g[idx(j)] * xhat[idx(j)];
                        }
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            let k = idx(j);
                            d[k] = d[k] + is / nf * (nf * g[k] - sg - xhat[k] * sgx);
                        }
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * kernels::gelu_grad(x);
                }
            }
        }
        Op::LeakyRelu(a) => {
            let av = val(*a);
            let slope = T::from_f64(kernels::LEAKY_SLOPE);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + if x >= T::zero() { g } else { g * slope };
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    let s = if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *d = *d + g * s;
                }
            }
        }
        Op::Square(a) => {
            let av = val(*a);
            let two = T::from_f64(2.0);
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * two * x;
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let xs = nodes[*x].value.shape();
            let ws = nodes[*w].value.shape();
            let (c, h, wd) = (xs[0], xs[1], xs[2]);
            let (co, k) = (ws[0], ws[2]);
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let ck = c * k * k;
            let cols = kernels::im2col(val(*x), c, h, wd, k, *stride, *pad, oh, ow);
            if let Some(d) = slot(grads, nodes, *w) {
                kernels::matmul_nt_acc(g, &cols, d, co, ck, oh * ow);
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![T::zero(); ck * oh * ow];
                kernels::matmul_tn_acc(val(*w), g, &mut dcols, co, ck, oh * ow);
                let d = slot(grads, nodes, *x).unwrap();
                kernels::col2im_acc(&dcols, d, c, h, wd, k, *stride, *pad, oh, ow);
            }
        }
        Op::DwConv3x3 { x, w } => {
            let xs = nodes[*x].value.shape();
            let (c, h, wd) = (xs[0], xs[1], xs[2]);
            let xv = val(*x);
            let wv = val(*w);
            let mut dx = if nodes[*x].requires_grad {
                Some(vec![T::zero(); xv.len()])
            } else {
                None
            };
            let mut dw = if nodes[*w].requires_grad {
                Some(vec![T::zero(); wv.len()])
            } else {
                None
            };
            kernels::dwconv3x3_backward(xv, wv, g, c, h, wd, dx.as_deref_mut(), dw.as_deref_mut());
            if let (Some(src), Some(d)) = (dx, slot(grads, nodes, *x)) {
                d.iter_mut().zip(&src).for_each(|(d, &s)| *d = *d + s);
            }
            if let (Some(src), Some(d)) = (dw, slot(grads, nodes, *w)) {
                d.iter_mut().zip(&src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        Op::AvgPool(a) => {
            let xs = nodes[*a].value.shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (th, tw) = (node.value.shape()[1], node.value.shape()[2]);
            if let Some(d) = slot(grads, nodes, *a) {
                for ci in 0..c {
                    for i in 0..th {
                        let (y0, y1) = kernels::pool_range(i, h, th);
                        for j in 0..tw {
                            let (x0, x1) = kernels::pool_range(j, w, tw);
                            let cnt = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let gv = g[(ci * th + i) * tw + j] / cnt;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let k = (ci * h + y) * w + xx;
                                    d[k] = d[k] + gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2(a) => {
            let xs = nodes[*a].value.shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            if let Some(d) = slot(grads, nodes, *a) {
                let w2 = 2 * w;
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            let k = (ci * h + y / 2) * w + xx / 2;
                            d[k] = d[k] + g[(ci * 2 * h + y) * w2 + xx];
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(d) = slot(grads, nodes, p) {
                    d.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, &g)| *d = *d + g);
                }
                off += n;
            }
        }
        Op::Slice { x, start } => {
            let inner: usize = node.value.shape()[1..].iter().product();
            let off = start * inner;
            if let Some(d) = slot(grads, nodes, *x) {
                d[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean(a) => {
            let n = T::from_f64(nodes[*a].value.len() as f64);
            if let Some(d) = slot(grads, nodes, *a) {
                let gv = g[0] / n;
                d.iter_mut().for_each(|d| *d = *d + gv);
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> T {
        self.tape.value(self.id).data()[0]
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Self {
        let out = f(&self.tape.value(self.id));
        self.tape.push(out, op, &[self.id])
    }

    fn same_shape(self, other: Self, op: &'static str) -> Result<()> {
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            a.zip_map(&b, |x, y| x + y)?
        };
        Ok(self.tape.push(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            a.zip_map(&b, |x, y| x - y)?
        };
        Ok(self.tape.push(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            a.zip_map(&b, |x, y| x * y)?
        };
        Ok(self.tape.push(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    fn check_scalar(s: &Tensor<T>, op: &'static str) -> Result<()> {
        if s.len() != 1 {
            return Err(Error::shape(op, s.shape(), &[1]));
        }
        Ok(())
    }

    /// Multiply by a one-element variable.
    pub fn mul_scalar(self, s: Self) -> Result<Self> {
        let out = {
            let sv = self.tape.value(s.id);
            Self::check_scalar(&sv, "mul_scalar")?;
            let c = sv.data()[0];
            self.tape.value(self.id).map(|x| x * c)
        };
        Ok(self.tape.push(out, Op::MulScalar(self.id, s.id), &[self.id, s.id]))
    }

    /// Divide by a one-element variable.
    pub fn div_scalar(self, s: Self) -> Result<Self> {
        let out = {
            let sv = self.tape.value(s.id);
            Self::check_scalar(&sv, "div_scalar")?;
            let c = sv.data()[0];
            self.tape.value(self.id).map(|x| x / c)
        };
        Ok(self.tape.push(out, Op::DivScalar(self.id, s.id), &[self.id, s.id]))
    }

    fn axis_broadcast(self, v: Self, axis: usize, mul: bool) -> Result<Self> {
        let op_name = if mul { "mul_axis" } else { "add_axis" };
        let out = {
            let x = self.tape.value(self.id);
            let vv = self.tape.value(v.id);
            if axis >= x.rank() || vv.len() != x.shape()[axis] {
                return Err(Error::shape(op_name, x.shape(), vv.shape()));
            }
            let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for j in 0..n {
                    let s = vv.data()[j];
                    let base = (o * n + j) * inner;
                    for d in &mut data[base..base + inner] {
                        *d = if mul { *d * s } else { *d + s };
                    }
                }
            }
            Tensor::new(x.shape(), data)?
        };
        let op = if mul {
            Op::MulAxis {
                x: self.id,
                v: v.id,
                axis,
            }
        } else {
            Op::AddAxis {
                x: self.id,
                v: v.id,
                axis,
            }
        };
        Ok(self.tape.push(out, op, &[self.id, v.id]))
    }

    /// Scale every slice `i` along `axis` by `v[i]`.
    pub fn mul_axis(self, v: Self, axis: usize) -> Result<Self> {
        self.axis_broadcast(v, axis, true)
    }

    /// Shift every slice `i` along `axis` by `v[i]`.
    pub fn add_axis(self, v: Self, axis: usize) -> Result<Self> {
        self.axis_broadcast(v, axis, false)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut data = vec![T::zero(); m * n];
            kernels::matmul_acc(a.data(), b.data(), &mut data, m, k, n);
            Tensor::new(&[m, n], data)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Self> {
        let out = {
            let a = self.tape.value(self.id);
            if a.rank() != 2 {
                return Err(Error::invalid("transpose", "expects a matrix"));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::new(&[c, r], kernels::transpose(a.data(), r, c))?
        };
        Ok(self.tape.push(out, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.tape.value(self.id).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Self {
        self.unary(Op::Softmax(self.id), |a| {
            let cols = *a.shape().last().unwrap();
            Tensor::new(a.shape(), kernels::softmax_rows(a.data(), cols)).unwrap()
        })
    }

    /// Standardize each slice along `axis` to zero mean and unit variance,
    /// dividing by `sqrt(var + eps)`.
    pub fn normalize(self, axis: usize, eps: f64) -> Result<Self> {
        let (out, inv_std) = {
            let x = self.tape.value(self.id);
            if axis >= x.rank() {
                return Err(Error::invalid("normalize", "axis out of range"));
            }
            let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
            let xd = x.data();
            let mut data = vec![T::zero(); xd.len()];
            let mut inv_std = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let mean = (0..n).map(|j| xd[idx(j)].as_f64()).sum::<f64>() / n as f64;
                    let var = (0..n)
                        .map(|j| {
                            let d = xd[idx(j)].as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / n as f64;
                    let is = 1.0 / num_traits::Float::sqrt(var + eps);
                    inv_std[o * inner + i] = T::from_f64(is);
                    for j in 0..n {
                        data[idx(j)] = T::from_f64((xd[idx(j)].as_f64() - mean) * is);
                    }
                }
            }
            (Tensor::new(x.shape(), data)?, inv_std)
        };
        Ok(self.tape.push(
            out,
            Op::Normalize {
                x: self.id,
                axis,
                inv_std,
            },
            &[self.id],
        ))
    }

    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), |a| a.map(kernels::gelu))
    }

    pub fn leaky_relu(self) -> Self {
        self.unary(Op::LeakyRelu(self.id), |a| a.map(kernels::leaky_relu))
    }

    pub fn abs(self) -> Self {
        self.unary(Op::Abs(self.id), |a| a.map(|x| x.abs()))
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    /// Dense 2-D convolution (cross-correlation) of a C×H×W input with
    /// `[C_out × C × k × k]` weights.
    pub fn conv2d(self, w: Self, stride: usize, pad: usize) -> Result<Self> {
        let out = {
            let x = self.tape.value(self.id);
            let wt = self.tape.value(w.id);
            if x.rank() != 3 || wt.rank() != 4 || wt.shape()[1] != x.shape()[0] || wt.shape()[2] != wt.shape()[3] {
                return Err(Error::shape("conv2d", x.shape(), wt.shape()));
            }
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (co, k) = (wt.shape()[0], wt.shape()[2]);
            if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
                return Err(Error::invalid("conv2d", "kernel larger than padded input"));
            }
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (wd + 2 * pad - k) / stride + 1;
            let cols = kernels::im2col(x.data(), c, h, wd, k, stride, pad, oh, ow);
            let mut data = vec![T::zero(); co * oh * ow];
            kernels::matmul_acc(wt.data(), &cols, &mut data, co, c * k * k, oh * ow);
            Tensor::new(&[co, oh, ow], data)?
        };
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            &[self.id, w.id],
        ))
    }

    /// Depthwise 3×3 convolution with zero padding; `w` is `[C × 3 × 3]`.
    pub fn dwconv3x3(self, w: Self) -> Result<Self> {
        let out = {
            let x = self.tape.value(self.id);
            let wt = self.tape.value(w.id);
            if x.rank() != 3 || wt.shape() != [x.shape()[0], 3, 3] {
                return Err(Error::shape("dwconv3x3", x.shape(), wt.shape()));
            }
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            Tensor::new(x.shape(), kernels::dwconv3x3(x.data(), wt.data(), c, h, wd))?
        };
        Ok(self.tape.push(out, Op::DwConv3x3 { x: self.id, w: w.id }, &[self.id, w.id]))
    }

    /// Adaptive average pooling of a C×H×W input to C×th×tw.
    pub fn adaptive_avg_pool(self, th: usize, tw: usize) -> Result<Self> {
        let out = {
            let x = self.tape.value(self.id);
            if x.rank() != 3 {
                return Err(Error::invalid("adaptive_avg_pool", "expects C×H×W"));
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if th == 0 || tw == 0 || th > h || tw > w {
                return Err(Error::invalid(
                    "adaptive_avg_pool",
                    alloc::format!("target {}x{} invalid for {}x{}", th, tw, h, w),
                ));
            }
            Tensor::new(&[c, th, tw], kernels::adaptive_avg_pool(x.data(), c, h, w, th, tw))?
        };
        Ok(self.tape.push(out, Op::AvgPool(self.id), &[self.id]))
    }

    /// Nearest-neighbour 2× upsampling of a C×H×W input.
    pub fn upsample2(self) -> Result<Self> {
        let out = {
            let x = self.tape.value(self.id);
            if x.rank() != 3 {
                return Err(Error::invalid("upsample2", "expects C×H×W"));
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let xd = x.data();
            Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
                let xx = i % (2 * w);
                let y = (i / (2 * w)) % (2 * h);
                let ci = i / (4 * h * w);
                xd[(ci * h + y / 2) * w + xx / 2]
            })
        };
        Ok(self.tape.push(out, Op::Upsample2(self.id), &[self.id]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat0(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::Concat(ids.clone()), &ids))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(self, start: usize, len: usize) -> Result<Self> {
        let out = self.tape.value(self.id).slice0(start, len)?;
        Ok(self.tape.push(out, Op::Slice { x: self.id, start }, &[self.id]))
    }

    pub fn sum(self) -> Self {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(T::from_f64(kernels::sum_f64(a.data()))))
    }

    pub fn mean(self) -> Self {
        self.unary(Op::Mean(self.id), |a| {
            Tensor::scalar(T::from_f64(kernels::sum_f64(a.data()) / a.len() as f64))
        })
    }
}

/// Layers composed from the primitive ops above.
impl<'t, T: Real> Var<'t, T> {
    /// Per-pixel linear map across channels: `w` is `[C_out × C]`, `b` is `[C_out]`.
    pub fn conv1x1(self, w: Self, b: Option<Self>) -> Result<Self> {
        let s = self.shape();
        let ws = w.shape();
        if s.len() != 3 || ws.len() != 2 || ws[1] != s[0] {
            return Err(Error::shape("conv1x1", &s, &ws));
        }
        let (h, wd) = (s[1], s[2]);
        let y = w.matmul(self.reshape(&[s[0], h * wd])?)?;
        let y = match b {
            Some(b) => y.add_axis(b, 0)?,
            None => y,
        };
        y.reshape(&[ws[0], h, wd])
    }

    /// Normalize over `axis`, then apply per-entry gain and bias along it.
    pub fn layer_norm(self, axis: usize, gain: Self, bias: Self, eps: f64) -> Result<Self> {
        self.normalize(axis, eps)?.mul_axis(gain, axis)?.add_axis(bias, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_produce_no_gradients() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let loss = c.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.count(), 0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x + 3x) → grad 5
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = x.add(x).unwrap().add(x.scale(3.0)).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.id())),
        }
    }
}
