//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! inputs it needs for the backward sweep. A tape is single-threaded and
//! meant to live for one forward/backward pass.

use std::cell::RefCell;

use super::conv::{self, ConvGeom};
use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnKind {
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqr,
    Sqrt,
    Softplus,
    Abs,
}

enum Op<T> {
    Leaf,
    Binary(BinKind, usize, usize),
    Unary(UnKind, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    SumAll(usize),
    SumKeep(usize),
    Reshape(usize),
    Narrow { a: usize, dim: usize, start: usize },
    Concat { parts: Vec<usize>, dim: usize },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AvgPool { a: usize, k: usize },
    BoxFilter { a: usize, k: usize },
    MaxPool2 { a: usize, argmax: Vec<usize> },
    Upsample2(usize),
    BatchNorm { a: usize, xhat: Vec<T>, inv_std: Vec<T> },
    GatherRows { table: usize, idx: Vec<usize> },
    LogSoftmax(usize),
    SelectRows { a: usize, idx: Vec<usize> },
    MaxLast { a: usize, argmax: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients from one backward sweep, indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub fn concat(&self, parts: &[Var<'_, T>], dim: usize) -> Var<'_, T> {
        assert!(!parts.is_empty());
        let values: Vec<Tensor<T>> = parts.iter().map(|p| self.value(p.id)).collect();
        let base = values[0].shape().to_vec();
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let total_dim: usize = values.iter().map(|v| v.shape()[dim]).sum();
        let mut out = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for v in &values {
                let d = v.shape()[dim];
                assert_eq!(v.shape()[..dim], base[..dim]);
                assert_eq!(v.shape()[dim + 1..], base[dim + 1..]);
                out.extend_from_slice(&v.data()[o * d * inner..][..d * inner]);
            }
        }
        let mut shape = base;
        shape[dim] = total_dim;
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(Tensor::new(shape, out), Op::Concat { parts: parts.iter().map(|p| p.id).collect(), dim }, needs)
    }

    /// Rows of `table` (shape `K x E`) selected by `idx`.
    pub fn gather_rows<'t>(&'t self, table: Var<'t, T>, idx: &[usize]) -> Var<'t, T> {
        let t = self.value(table.id);
        assert_eq!(t.shape().len(), 2);
        let e = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            assert!(i < t.shape()[0], "row {i} out of range for table {:?}", t.shape());
            out.extend_from_slice(&t.data()[i * e..][..e]);
        }
        self.push(
            Tensor::new(vec![idx.len(), e], out),
            Op::GatherRows { table: table.id, idx: idx.to_vec() },
            self.needs(table.id),
        )
    }

    /// Gradient of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
        }
        Grads { grads }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// When `small` broadcasts against `full` only along trailing axes, returns
/// the leading shape, the strides of `small` over it and the trailing run
/// length, so each element of `small` pairs with one contiguous run.
fn trailing_broadcast(full: &[usize], small: &[usize]) -> Option<(Vec<usize>, Vec<usize>, usize)> {
    let nd = full.len();
    if small.len() > nd {
        return None;
    }
    let mut padded = vec![1; nd - small.len()];
    padded.extend_from_slice(small);
    let mut k = 0;
    while k < nd && padded[nd - 1 - k] == 1 {
        k += 1;
    }
    let run: usize = full[nd - k..].iter().product();
    if run < 2 {
        return None;
    }
    let lead = full[..nd - k].to_vec();
    let strides = broadcast_strides(&padded[..nd - k], &lead);
    Some((lead, strides, run))
}

fn backward_node<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let oshape = out.shape();
            let (xa, xb) = (va.data(), vb.data());
            let da = |gv: T, _x: T, y: T| match kind {
                BinKind::Add | BinKind::Sub => gv,
                BinKind::Mul => gv * y,
                BinKind::Div => gv / y,
            };
            let db = |gv: T, x: T, y: T| match kind {
                BinKind::Add => gv,
                BinKind::Sub => -gv,
                BinKind::Mul => gv * x,
                BinKind::Div => -gv * x / (y * y),
            };
            let (na, nb) = (nodes[*a].needs_grad, nodes[*b].needs_grad);
            if va.shape() == oshape && vb.shape() == oshape {
                if na {
                    let d = (0..gd.len()).map(|i| da(gd[i], xa[i], xb[i])).collect();
                    accumulate(grads, nodes, *a, Tensor::new(oshape.to_vec(), d));
                }
                if nb {
                    let d = (0..gd.len()).map(|i| db(gd[i], xa[i], xb[i])).collect();
                    accumulate(grads, nodes, *b, Tensor::new(oshape.to_vec(), d));
                }
            } else if let Some((lead, ss, run)) =
                (va.shape() == oshape).then(|| trailing_broadcast(oshape, vb.shape())).flatten()
            {
                let lc = broadcast_strides(&lead, &lead);
                let mut ga = na.then(|| vec![T::zero(); gd.len()]);
                let mut gb = nb.then(|| vec![T::zero(); vb.numel()]);
                for_each_broadcast(&lead, &lc, &ss, |c, _, j| {
                    let r = c * run..(c + 1) * run;
                    let y = xb[j];
                    if let Some(ga) = ga.as_mut() {
                        for ((d, &gv), &x) in ga[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xa[r.clone()]) {
                            *d = da(gv, x, y);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let mut s = T::zero();
                        for (&gv, &x) in gd[r.clone()].iter().zip(&xa[r]) {
                            s += db(gv, x, y);
                        }
                        gb[j] += s;
                    }
                });
                if let Some(d) = ga {
                    accumulate(grads, nodes, *a, Tensor::new(oshape.to_vec(), d));
                }
                if let Some(d) = gb {
                    accumulate(grads, nodes, *b, Tensor::new(vb.shape().to_vec(), d));
                }
            } else {
                let sa = broadcast_strides(va.shape(), oshape);
                let sb = broadcast_strides(vb.shape(), oshape);
                let mut acc_a = na.then(|| vec![T::zero(); va.numel()]);
                let mut acc_b = nb.then(|| vec![T::zero(); vb.numel()]);
                for_each_broadcast(oshape, &sa, &sb, |o, i, j| {
                    if let Some(acc) = acc_a.as_mut() {
                        acc[i] += da(gd[o], xa[i], xb[j]);
                    }
                    if let Some(acc) = acc_b.as_mut() {
                        acc[j] += db(gd[o], xa[i], xb[j]);
                    }
                });
                if let Some(acc) = acc_a {
                    accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), acc));
                }
                if let Some(acc) = acc_b {
                    accumulate(grads, nodes, *b, Tensor::new(vb.shape().to_vec(), acc));
                }
            }
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let d: Vec<T> = (0..x.len())
                .map(|i| {
                    let gv = gd[i];
                    match kind {
                        UnKind::Neg => -gv,
                        UnKind::Relu => {
                            if x[i] > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        UnKind::LeakyRelu(s) => {
                            if x[i] > T::zero() {
                                gv
                            } else {
                                gv * T::c(*s)
                            }
                        }
                        UnKind::Sigmoid => gv * y[i] * (T::one() - y[i]),
                        UnKind::Tanh => gv * (T::one() - y[i] * y[i]),
                        UnKind::Exp => gv * y[i],
                        UnKind::Log => gv / x[i],
                        UnKind::Sqr => gv * T::c(2.0) * x[i],
                        UnKind::Sqrt => gv / (T::c(2.0) * y[i]),
                        UnKind::Softplus => gv * sigmoid(x[i]),
                        UnKind::Abs => gv * x[i].signum() * T::c(if x[i] == T::zero() { 0.0 } else { 1.0 }),
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(x_shape(nodes, *a), d));
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.reshape(x_shape(nodes, *a))),
        Op::MulScalar(a, s) => accumulate(grads, nodes, *a, g.map(|v| v * *s).reshape(x_shape(nodes, *a))),
        Op::SumAll(a) => {
            let shape = x_shape(nodes, *a);
            accumulate(grads, nodes, *a, Tensor::full(shape, gd[0]));
        }
        Op::SumKeep(a) => {
            let shape = x_shape(nodes, *a);
            let sx = broadcast_strides(&shape, &shape);
            let so = broadcast_strides(out.shape(), &shape);
            let mut d = vec![T::zero(); shape.iter().product()];
            for_each_broadcast(&shape, &sx, &so, |_, i, o| d[i] = gd[o]);
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.reshape(x_shape(nodes, *a))),
        Op::Narrow { a, dim, start } => {
            let shape = x_shape(nodes, *a);
            let outer: usize = shape[..*dim].iter().product();
            let inner: usize = shape[dim + 1..].iter().product();
            let (full, len) = (shape[*dim], out.shape()[*dim]);
            let mut d = vec![T::zero(); shape.iter().product()];
            for o in 0..outer {
                d[(o * full + start) * inner..][..len * inner].copy_from_slice(&gd[o * len * inner..][..len * inner]);
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::Concat { parts, dim } => {
            let oshape = out.shape();
            let outer: usize = oshape[..*dim].iter().product();
            let inner: usize = oshape[dim + 1..].iter().product();
            let total = oshape[*dim];
            let mut offset = 0;
            for &p in parts {
                let shape = x_shape(nodes, p);
                let len = shape[*dim];
                let mut d = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    d.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                }
                accumulate(grads, nodes, p, Tensor::new(shape, d));
                offset += len;
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let k = if *ta { va.shape()[0] } else { va.shape()[1] };
            if nodes[*a].needs_grad {
                let mut d = vec![T::zero(); va.numel()];
                if !*ta {
                    T::gemm(m, n, k, T::one(), gd, false, vb.data(), !*tb, T::zero(), &mut d);
                } else {
                    T::gemm(k, n, m, T::one(), vb.data(), *tb, gd, true, T::zero(), &mut d);
                }
                accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), d));
            }
            if nodes[*b].needs_grad {
                let mut d = vec![T::zero(); vb.numel()];
                if !*tb {
                    T::gemm(k, m, n, T::one(), va.data(), !*ta, gd, false, T::zero(), &mut d);
                } else {
                    T::gemm(n, m, k, T::one(), gd, true, va.data(), *ta, T::zero(), &mut d);
                }
                accumulate(grads, nodes, *b, Tensor::new(vb.shape().to_vec(), d));
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (dx, dw) =
                conv::conv2d_backward(geom, vx.data(), vw.data(), gd, nodes[*x].needs_grad, nodes[*w].needs_grad);
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, Tensor::new(vw.shape().to_vec(), dw));
            }
        }
        Op::AvgPool { a, k } => {
            let shape = x_shape(nodes, *a);
            let d = conv::avg_pool_backward(&shape, gd, *k);
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::BoxFilter { a, k } => {
            let shape = x_shape(nodes, *a);
            let d = conv::box_filter_backward(&shape, gd, *k);
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::MaxPool2 { a, argmax } => {
            let shape = x_shape(nodes, *a);
            let mut d = vec![T::zero(); shape.iter().product()];
            for (o, &i) in argmax.iter().enumerate() {
                d[i] += gd[o];
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::Upsample2(a) => {
            let shape = x_shape(nodes, *a);
            let d = conv::upsample2_backward(&shape, gd);
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::BatchNorm { a, xhat, inv_std } => {
            let shape = x_shape(nodes, *a);
            let (n, c) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let m = T::c((n * s) as f64);
            let mut d = vec![T::zero(); shape.iter().product()];
            for ch in 0..c {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    for i in off..off + s {
                        sg += gd[i];
                        sgx += gd[i] * xhat[i];
                    }
                }
                let k = inv_std[ch] / m;
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    for i in off..off + s {
                        d[i] = k * (m * gd[i] - sg - xhat[i] * sgx);
                    }
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::GatherRows { table, idx } => {
            let shape = x_shape(nodes, *table);
            let e = shape[1];
            let mut d = vec![T::zero(); shape[0] * e];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..e {
                    d[i * e + j] += gd[r * e + j];
                }
            }
            accumulate(grads, nodes, *table, Tensor::new(shape, d));
        }
        Op::LogSoftmax(a) => {
            let shape = x_shape(nodes, *a);
            let k = *shape.last().unwrap();
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for r in 0..y.len() / k {
                let row = r * k..(r + 1) * k;
                let sg: T = gd[row.clone()].iter().copied().sum();
                for i in row {
                    d[i] = gd[i] - y[i].exp() * sg;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::SelectRows { a, idx } => {
            let shape = x_shape(nodes, *a);
            let k = shape[1];
            let mut d = vec![T::zero(); shape[0] * k];
            for (r, &i) in idx.iter().enumerate() {
                d[r * k + i] = gd[r];
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
        Op::MaxLast { a, argmax } => {
            let shape = x_shape(nodes, *a);
            let mut d = vec![T::zero(); shape.iter().product()];
            for (r, &i) in argmax.iter().enumerate() {
                d[i] = gd[r];
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, d));
        }
    }
}

fn x_shape<T: Float>(nodes: &[Node<T>], id: usize) -> Vec<usize> {
    nodes[id].value.shape().to_vec()
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn same_tape(&self, o: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, o.tape), "vars from different tapes");
    }

    fn binary(self, o: Var<'t, T>, kind: BinKind) -> Var<'t, T> {
        self.same_tape(&o);
        let (va, vb) = (self.value(), o.value());
        let shape = broadcast_shape(va.shape(), vb.shape())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()));
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if let Some((lead, ss, run)) = (va.shape() == &shape[..]).then(|| trailing_broadcast(&shape, vb.shape())).flatten() {
            let (xa, xb) = (va.data(), vb.data());
            let mut out = vec![T::zero(); xa.len()];
            for_each_broadcast(&lead, &broadcast_strides(&lead, &lead), &ss, |c, _, j| {
                let y = xb[j];
                for (o, &x) in out[c * run..(c + 1) * run].iter_mut().zip(&xa[c * run..(c + 1) * run]) {
                    *o = f(x, y);
                }
            });
            out
        } else {
            let sa = broadcast_strides(va.shape(), &shape);
            let sb = broadcast_strides(vb.shape(), &shape);
            let mut out = vec![T::zero(); shape.iter().product()];
            let (xa, xb) = (va.data(), vb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(xa[i], xb[j]));
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(o.id);
        self.tape.push(Tensor::new(shape, data), Op::Binary(kind, self.id, o.id), needs)
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, BinKind::Add)
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, BinKind::Sub)
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, BinKind::Mul)
    }

    pub fn div(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(o, BinKind::Div)
    }

    fn unary(self, kind: UnKind) -> Var<'t, T> {
        let v = self.value();
        let y = v.map(|x| match kind {
            UnKind::Neg => -x,
            UnKind::Relu => x.max(T::zero()),
            UnKind::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::c(s)
                }
            }
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Tanh => x.tanh(),
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Sqr => x * x,
            UnKind::Sqrt => x.sqrt(),
            UnKind::Softplus => softplus(x),
            UnKind::Abs => x.abs(),
        });
        self.tape.push(y, Op::Unary(kind, self.id), self.tape.needs(self.id))
    }

    pub fn neg(self) -> Self {
        self.unary(UnKind::Neg)
    }
    pub fn relu(self) -> Self {
        self.unary(UnKind::Relu)
    }
    pub fn leaky_relu(self, slope: f64) -> Self {
        self.unary(UnKind::LeakyRelu(slope))
    }
    pub fn sigmoid(self) -> Self {
        self.unary(UnKind::Sigmoid)
    }
    pub fn tanh(self) -> Self {
        self.unary(UnKind::Tanh)
    }
    pub fn exp(self) -> Self {
        self.unary(UnKind::Exp)
    }
    pub fn log(self) -> Self {
        self.unary(UnKind::Log)
    }
    pub fn sqr(self) -> Self {
        self.unary(UnKind::Sqr)
    }
    pub fn sqrt(self) -> Self {
        self.unary(UnKind::Sqrt)
    }
    /// `log(1 + exp(x))`, computed without overflow.
    pub fn softplus(self) -> Self {
        self.unary(UnKind::Softplus)
    }
    pub fn abs(self) -> Self {
        self.unary(UnKind::Abs)
    }

    pub fn add_scalar(self, s: T) -> Self {
        let y = self.value().map(|x| x + s);
        self.tape.push(y, Op::AddScalar(self.id), self.tape.needs(self.id))
    }

    pub fn mul_scalar(self, s: T) -> Self {
        let y = self.value().map(|x| x * s);
        self.tape.push(y, Op::MulScalar(self.id, s), self.tape.needs(self.id))
    }

    pub fn sum_all(self) -> Self {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), self.tape.needs(self.id))
    }

    pub fn mean_all(self) -> Self {
        let n = self.value().numel();
        self.sum_all().mul_scalar(T::one() / T::c(n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keep(self, axes: &[usize]) -> Self {
        let v = self.value();
        let shape = v.shape().to_vec();
        let mut oshape = shape.clone();
        for &a in axes {
            oshape[a] = 1;
        }
        let mut out = vec![T::zero(); oshape.iter().product()];
        let sx = broadcast_strides(&shape, &shape);
        let so = broadcast_strides(&oshape, &shape);
        let x = v.data();
        for_each_broadcast(&shape, &sx, &so, |_, i, o| out[o] += x[i]);
        self.tape.push(Tensor::new(oshape, out), Op::SumKeep(self.id), self.tape.needs(self.id))
    }

    pub fn mean_keep(self, axes: &[usize]) -> Self {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keep(axes).mul_scalar(T::one() / T::c(n as f64))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let v = self.value().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id), self.tape.needs(self.id))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Self {
        let s = self.shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(vec![n, rest])
    }

    pub fn narrow(self, dim: usize, start: usize, len: usize) -> Self {
        let v = self.value();
        let shape = v.shape();
        assert!(start + len <= shape[dim], "narrow {start}+{len} beyond {}", shape[dim]);
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let full = shape[dim];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[dim] = len;
        self.tape.push(Tensor::new(oshape, out), Op::Narrow { a: self.id, dim, start }, self.tape.needs(self.id))
    }

    fn matmul_impl(self, b: Var<'t, T>, ta: bool, tb: bool) -> Self {
        self.same_tape(&b);
        let (va, vb) = (self.value(), b.value());
        assert!(va.shape().len() == 2 && vb.shape().len() == 2, "matmul needs 2-D operands");
        let (m, k) = if ta { (va.shape()[1], va.shape()[0]) } else { (va.shape()[0], va.shape()[1]) };
        let (k2, n) = if tb { (vb.shape()[1], vb.shape()[0]) } else { (vb.shape()[0], vb.shape()[1]) };
        assert_eq!(k, k2, "matmul inner dimensions {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), ta, vb.data(), tb, T::zero(), &mut out);
        let needs = self.tape.needs(self.id) || self.tape.needs(b.id);
        self.tape.push(Tensor::new(vec![m, n], out), Op::MatMul { a: self.id, b: b.id, ta, tb }, needs)
    }

    pub fn matmul(self, b: Var<'t, T>) -> Self {
        self.matmul_impl(b, false, false)
    }

    /// `self * b^T`.
    pub fn matmul_t(self, b: Var<'t, T>) -> Self {
        self.matmul_impl(b, false, true)
    }

    /// Cross-correlation of NCHW input with `(c_out, c_in, kh, kw)` weights.
    pub fn conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Self {
        let (vx, vw) = (self.value(), w.value());
        let (xs, ws) = (vx.shape(), vw.shape());
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects NCHW input and OIHW weights");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = conv::conv2d_forward(&geom, vx.data(), vw.data());
        let shape = vec![geom.n, geom.c_out, geom.out_h(), geom.out_w()];
        let needs = self.tape.needs(self.id) || self.tape.needs(w.id);
        self.tape.push(Tensor::new(shape, out), Op::Conv2d { x: self.id, w: w.id, geom }, needs)
    }

    pub fn avg_pool(self, k: usize) -> Self {
        let v = self.value();
        let (shape, out) = conv::avg_pool_forward(v.shape(), v.data(), k);
        self.tape.push(Tensor::new(shape, out), Op::AvgPool { a: self.id, k }, self.tape.needs(self.id))
    }

    /// Stride-1 `k x k` window means over valid positions.
    pub fn box_filter(self, k: usize) -> Self {
        let v = self.value();
        let (shape, out) = conv::box_filter_forward(v.shape(), v.data(), k);
        self.tape.push(Tensor::new(shape, out), Op::BoxFilter { a: self.id, k }, self.tape.needs(self.id))
    }

    pub fn max_pool2(self) -> Self {
        let v = self.value();
        let (shape, out, argmax) = conv::max_pool2_forward(v.shape(), v.data());
        self.tape.push(Tensor::new(shape, out), Op::MaxPool2 { a: self.id, argmax }, self.tape.needs(self.id))
    }

    pub fn upsample2(self) -> Self {
        let v = self.value();
        let (shape, out) = conv::upsample2_forward(v.shape(), v.data());
        self.tape.push(Tensor::new(shape, out), Op::Upsample2(self.id), self.tape.needs(self.id))
    }

    /// Normalizes each channel with the statistics of this batch (biased
    /// variance). No affine part.
    pub fn batch_norm(self, eps: f64) -> (Self, BatchStats<T>) {
        let v = self.value();
        let shape = v.shape();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let x = v.data();
        let m = T::c((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                sum += x[(b * c + ch) * s..][..s].iter().copied().sum();
            }
            let mu = sum / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &xv in &x[(b * c + ch) * s..][..s] {
                    sq += (xv - mu) * (xv - mu);
                }
            }
            let va = sq / m;
            let is = T::one() / (va + T::c(eps)).sqrt();
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (x[i] - mu) * is;
                }
            }
            mean[ch] = mu;
            var[ch] = va;
            inv_std[ch] = is;
        }
        let out = Tensor::new(shape.to_vec(), xhat.clone());
        let y = self.tape.push(out, Op::BatchNorm { a: self.id, xhat, inv_std }, self.tape.needs(self.id));
        (y, BatchStats { mean, var })
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(self) -> Self {
        let v = self.value();
        let k = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        self.tape.push(Tensor::new(v.shape().to_vec(), out), Op::LogSoftmax(self.id), self.tape.needs(self.id))
    }

    /// Picks column `idx[r]` of each row of an `N x K` matrix.
    pub fn select_rows(self, idx: &[usize]) -> Self {
        let v = self.value();
        let (n, k) = (v.shape()[0], v.shape()[1]);
        assert_eq!(n, idx.len());
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &i)| v.data()[r * k + i]).collect();
        self.tape.push(
            Tensor::new(vec![n], out),
            Op::SelectRows { a: self.id, idx: idx.to_vec() },
            self.tape.needs(self.id),
        )
    }

    /// Row maxima of an `N x K` matrix (first maximum wins).
    pub fn max_last(self) -> Self {
        let v = self.value();
        let (n, k) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for r in 0..n {
            let row = &v.data()[r * k..][..k];
            let mut best = 0;
            for (i, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            argmax.push(r * k + best);
        }
        self.tape.push(Tensor::new(vec![n], out), Op::MaxLast { a: self.id, argmax }, self.tape.needs(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on a scalar function of one input tensor.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tape<f64>, Var<'_, f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let tp = Tape::new();
                let fp = f(&tp, tp.leaf(xp));
                let tm = Tape::new();
                let fm = f(&tm, tm.leaf(xm));
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: Tensor<f64>, build: impl for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = build(&tape, xv);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, |t, v| build(t, v).value().item());
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1.0);
            assert!((a - n).abs() / scale < 1e-6, "coord {i}: analytic {a} numeric {n}");
        }
    }

    fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let x = probe(&[2, 3, 4], 1);
        let c = probe(&[3, 1], 2).map(|v| v + 2.0);
        check(x, |t, v| {
            let c = t.constant(c.clone());
            v.mul(c).add(v.sqr()).div(c).tanh().sigmoid().softplus().sum_all()
        });
    }

    #[test]
    fn reduction_and_shape_grads() {
        let x = probe(&[2, 3, 4], 3);
        check(x, |t, v| {
            let a = v.sum_keep(&[0, 2]).exp();
            let b = v.narrow(1, 1, 2).reshape(vec![4, 4]).leaky_relu(0.2);
            let c = t.concat(&[b, b.abs()], 1);
            a.sum_all().add(c.mean_all()).add(v.mean_keep(&[1]).sqr().sum_all())
        });
    }

    #[test]
    fn matmul_grads_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let b = probe(if tb { &[5, 4] } else { &[4, 5] }, 7);
            check(probe(&a_shape, 5), |t, v| {
                let bv = t.leaf(b.clone());
                v.matmul_impl(bv, ta, tb).sqr().sum_all()
            });
            let a = probe(&a_shape, 8);
            check(b.clone(), |t, v| {
                let av = t.leaf(a.clone());
                av.matmul_impl(v, ta, tb).sqr().sum_all()
            });
        }
    }

    #[test]
    fn image_op_grads() {
        let x = probe(&[2, 2, 8, 8], 11);
        let w = probe(&[3, 2, 3, 3], 12);
        check(x.clone(), |t, v| {
            let w = t.constant(w.clone());
            let y = v.conv2d(w, 2, 1).upsample2();
            let (bn, _) = y.batch_norm(1e-5);
            bn.mul(y).max_pool2().sum_all().add(v.avg_pool(2).box_filter(3).sqr().sum_all())
        });
        check(w, |t, v| {
            let x = t.constant(x.clone());
            x.conv2d(v, 1, 1).relu().sqr().mean_all()
        });
    }

    #[test]
    fn softmax_selection_grads() {
        let x = probe(&[3, 5], 21);
        let table = probe(&[4, 5], 22);
        check(x, |t, v| {
            let tbl = t.leaf(table.clone());
            let g = t.gather_rows(tbl, &[2, 0, 2]);
            let y = v.add(g).log_softmax();
            y.select_rows(&[1, 4, 0]).sum_all().add(v.max_last().sum_all())
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.leaf(Tensor::full(vec![2], 3.0));
        let loss = a.mul(b).sum_all();
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
