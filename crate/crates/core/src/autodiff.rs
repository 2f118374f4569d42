//! Eager reverse-mode autodiff.
//!
//! Every op executes immediately and appends a node to the [`Graph`] tape.
//! [`Graph::backward`] walks the tape in exact reverse order. A graph is
//! single-threaded; independent graphs can live on separate threads.

use std::cell::{Ref, RefCell};

use crate::conv::{Conv1dGeom, ConvTranspose1dGeom};
use crate::error::{Error, Result};
use crate::natten::{self, NaDims};
use crate::tensor::{matmul_into, strides, Real, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    AddScalar { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    SumAxis { a: usize, axis: usize, mean: bool },
    Relu { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { a: usize, norms: Vec<T> },
    Conv1d { x: usize, w: usize, b: Option<usize>, geom: Conv1dGeom },
    ConvTranspose1d { x: usize, w: usize, b: Option<usize>, geom: ConvTranspose1dGeom },
    Neighborhood { q: usize, k: usize, v: usize, bias: usize, dims: NaDims, attn: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed ops.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn input(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let rg = tensor.requires_grad();
        let mut value = tensor.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier sweeps are discarded.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                // intermediate adjoints are dropped as soon as they are consumed
                backward_node(&nodes, id, &g, &mut grads);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn zeros_like<T: Real>(len: usize) -> Vec<T> {
    vec![T::zero(); len]
}

/// Gradient buffer for `id`, allocated on first touch; `None` when `id` is not differentiated.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| zeros_like(len)))
}

/// Two distinct gradient buffers at once (for kernels writing several adjoints).
fn two_slots<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    a: usize,
    b: usize,
) -> (Option<&'a mut Vec<T>>, Option<&'a mut Vec<T>>) {
    assert_ne!(a, b);
    for id in [a, b] {
        if nodes[id].requires_grad && grads[id].is_none() {
            grads[id] = Some(zeros_like(nodes[id].value.numel()));
        }
    }
    let (lo, hi, swap) = if a < b { (a, b, false) } else { (b, a, true) };
    let (left, right) = grads.split_at_mut(hi);
    let l = if nodes[lo].requires_grad { left[lo].as_mut() } else { None };
    let r = if nodes[hi].requires_grad { right[0].as_mut() } else { None };
    if swap {
        (r, l)
    } else {
        (l, r)
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[id].op, Op::Sub { .. }) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let nb = gb.len();
                for (i, &y) in g.iter().enumerate() {
                    gb[i % nb] += sign * y;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let nb = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv[i % nb];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &y) in g.iter().enumerate() {
                    gb[i % nb] += y * av[i];
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *s * y);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if *a == *b {
                let ga = slot(nodes, grads, *a).unwrap();
                matmul_into(m, n, k, g, false, bv, true, ga, true);
                matmul_into(k, m, n, av, true, g, false, ga, true);
                return;
            }
            let (ga, gb) = two_slots(nodes, grads, *a, *b);
            if let Some(ga) = ga {
                matmul_into(m, n, k, g, false, bv, true, ga, true);
            }
            if let Some(gb) = gb {
                matmul_into(k, m, n, av, true, g, false, gb, true);
            }
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let mut ga_buf = nodes[*a].requires_grad.then(|| zeros_like(batch * m * k));
            let mut gb_buf = nodes[*b].requires_grad.then(|| zeros_like(batch * k * n));
            for t in 0..batch {
                let gt = &g[t * m * n..(t + 1) * m * n];
                if let Some(buf) = ga_buf.as_mut() {
                    matmul_into(m, n, k, gt, false, &bv[t * k * n..(t + 1) * k * n], true, &mut buf[t * m * k..(t + 1) * m * k], true);
                }
                if let Some(buf) = gb_buf.as_mut() {
                    matmul_into(k, m, n, &av[t * m * k..(t + 1) * m * k], true, gt, false, &mut buf[t * k * n..(t + 1) * k * n], true);
                }
            }
            for (src, buf) in [(*a, ga_buf), (*b, gb_buf)] {
                if let (Some(buf), Some(dst)) = (buf, slot(nodes, grads, src)) {
                    dst.iter_mut().zip(buf).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let in_shape = nodes[*a].value.shape();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, out.shape(), &inverse);
                debug_assert_eq!(back.len(), in_shape.iter().product::<usize>());
                ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis] * inner;
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        gp[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
                offset += width;
            }
        }
        Op::IndexSelect { a, axis, indices } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let in_shape = nodes[*a].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let extent = in_shape[*axis];
                for o in 0..outer {
                    for (r, &ix) in indices.iter().enumerate() {
                        let src = &g[(o * indices.len() + r) * inner..][..inner];
                        let dst = &mut ga[(o * extent + ix) * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
        Op::Sum { a } | Op::Mean { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                    T::one() / T::from_f(ga.len() as f64)
                } else {
                    T::one()
                };
                let gv = g[0] * scale;
                ga.iter_mut().for_each(|x| *x += gv);
            }
        }
        Op::SumAxis { a, axis, mean } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let in_shape = nodes[*a].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let extent = in_shape[*axis];
                let scale = if *mean {
                    T::one() / T::from_f(extent as f64)
                } else {
                    T::one()
                };
                for o in 0..outer {
                    for r in 0..extent {
                        let dst = &mut ga[(o * extent + r) * inner..][..inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y * scale);
                    }
                }
            }
        }
        Op::Relu { a } => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *x += y;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                    *x += y * gelu_grad(v);
                }
            }
        }
        Op::Exp { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &e) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * e;
                }
            }
        }
        Op::Log { a } => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                    *x += y / v;
                }
            }
        }
        Op::Softmax { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                for ((gr, yr), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                    let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((x, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *x += y * (gy - dotp);
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                for ((gr, yr), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                    let total: T = gr.iter().copied().sum();
                    for ((x, &gy), &ly) in dst.iter_mut().zip(gr).zip(yr) {
                        *x += gy - ly.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = nodes[*gamma].value.numel();
            let gam = nodes[*gamma].value.data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, &gy), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                        *acc += gy * xh;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(acc, &gy)| *acc += gy);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = T::one() / T::from_f(d as f64);
                for (row, ((gr, xr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dst[j] += rstd[row] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                for (((gr, yr), dst), &nrm) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)).zip(norms) {
                    if nrm <= T::zero() {
                        continue;
                    }
                    let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((x, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *x += (gy - y * dotp) / nrm;
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            let (gx, gw) = two_slots(nodes, grads, *x, *w);
            let mut gb_buf = b.and_then(|b| nodes[b].requires_grad.then(|| zeros_like(nodes[b].value.numel())));
            geom.backward(xv, wv, g, gx.map(|v| v.as_mut_slice()), gw.map(|v| v.as_mut_slice()), gb_buf.as_deref_mut());
            if let (Some(b), Some(buf)) = (b, gb_buf) {
                let gb = slot(nodes, grads, *b).unwrap();
                gb.iter_mut().zip(buf).for_each(|(x, y)| *x += y);
            }
        }
        Op::ConvTranspose1d { x, w, b, geom } => {
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            let (gx, gw) = two_slots(nodes, grads, *x, *w);
            let mut gb_buf = b.and_then(|b| nodes[b].requires_grad.then(|| zeros_like(nodes[b].value.numel())));
            geom.backward(xv, wv, g, gx.map(|v| v.as_mut_slice()), gw.map(|v| v.as_mut_slice()), gb_buf.as_deref_mut());
            if let (Some(b), Some(buf)) = (b, gb_buf) {
                let gb = slot(nodes, grads, *b).unwrap();
                gb.iter_mut().zip(buf).for_each(|(x, y)| *x += y);
            }
        }
        Op::Neighborhood { q, k, v, bias, dims, attn } => {
            let numel = nodes[*q].value.numel();
            let mut gq = zeros_like(numel);
            let mut gk = zeros_like(numel);
            let mut gv = zeros_like(numel);
            let mut gbias = zeros_like(nodes[*bias].value.numel());
            natten::backward_raw(
                *dims,
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
                attn,
                g,
                &mut gq,
                &mut gk,
                &mut gv,
                &mut gbias,
            );
            for (src, buf) in [(*q, gq), (*k, gk), (*v, gv), (*bias, gbias)] {
                if let Some(dst) = slot(nodes, grads, src) {
                    dst.iter_mut().zip(buf).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f(SQRT_2_OVER_PI);
    let half = T::from_f(0.5);
    half * x * (T::one() + (c * (x + T::from_f(GELU_C) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f(SQRT_2_OVER_PI);
    let half = T::from_f(0.5);
    let a = T::from_f(GELU_C);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::from_f(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s or it holds one value.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let nb: usize = b.iter().product();
    let suffix = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if suffix || nb == 1 {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{b:?} does not broadcast onto {a:?}")))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow of the forward value; drop it before recording further ops.
    pub fn value_ref(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    pub fn item(&self) -> T {
        self.value_ref().data()[0]
    }

    /// Gradient from the last [`Graph::backward`]; only leaves keep one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.graph.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Tensor::from_vec(&self.shape(), g.clone()).ok()
    }

    /// Adds this value's gradient into `target`'s accumulator (enabling it if needed).
    pub fn accumulate_grad_into(&self, target: &mut Tensor<T>) {
        let grads = self.graph.grads.borrow();
        if let Some(Some(g)) = grads.get(self.id) {
            target.set_requires_grad(true);
            let dst = target.grad_mut().unwrap();
            dst.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
        }
    }

    fn unary(&self, op: Op<T>, f: impl Fn(&Tensor<T>) -> Vec<T>) -> Var<'g, T> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            let data = f(&src.value);
            (
                Tensor::from_vec(src.value.shape(), data).expect("unary op keeps shape"),
                src.requires_grad,
            )
        };
        self.graph.push(value, op, rg)
    }

    fn binary_broadcast(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            check_broadcast(name, a.shape(), b.shape())?;
            let bd = b.data();
            let nb = bd.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect();
            Tensor::from_vec(a.shape(), data)?
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, op, rg))
    }

    /// Elementwise sum; `other` may broadcast (see module docs).
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary_broadcast(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary_broadcast(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary_broadcast(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale { a: self.id, s }, |t| t.data().iter().map(|&x| x * s).collect())
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(Op::AddScalar { a: self.id }, |t| t.data().iter().map(|&x| x + s).collect())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Op::Relu { a: self.id }, |t| {
            t.data().iter().map(|&x| x.max(T::zero())).collect()
        })
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(Op::Gelu { a: self.id }, |t| t.data().iter().map(|&x| gelu(x)).collect())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Op::Exp { a: self.id }, |t| t.data().iter().map(|&x| x.exp()).collect())
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(Op::Log { a: self.id }, |t| t.data().iter().map(|&x| x.ln()).collect())
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Var<'g, T> {
        self.unary(Op::Softmax { a: self.id }, |t| {
            let d = *t.shape().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    denom += *x;
                }
                row.iter_mut().for_each(|x| *x /= denom);
            }
            out
        })
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(self) -> Var<'g, T> {
        self.unary(Op::LogSoftmax { a: self.id }, |t| {
            let d = *t.shape().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        self.reduce_all(false)
    }

    pub fn mean(self) -> Var<'g, T> {
        self.reduce_all(true)
    }

    fn reduce_all(self, mean: bool) -> Var<'g, T> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            let mut s: T = src.value.data().iter().copied().sum();
            if mean {
                s /= T::from_f(src.value.numel() as f64);
            }
            (Tensor::scalar(s), src.requires_grad)
        };
        let op = if mean {
            Op::Mean { a: self.id }
        } else {
            Op::Sum { a: self.id }
        };
        self.graph.push(value, op, rg)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            let shape = src.value.shape();
            if axis >= shape.len() {
                return Err(Error::shape("reduce", format!("axis {axis} out of range for {shape:?}")));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[axis];
            let mut out = vec![T::zero(); outer * inner];
            let data = src.value.data();
            for o in 0..outer {
                for r in 0..extent {
                    let row = &data[(o * extent + r) * inner..][..inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            if mean {
                let s = T::one() / T::from_f(extent as f64);
                out.iter_mut().for_each(|x| *x *= s);
            }
            let mut new_shape: Vec<usize> = shape.to_vec();
            new_shape.remove(axis);
            if new_shape.is_empty() {
                new_shape.push(1);
            }
            (Tensor::from_vec(&new_shape, out)?, src.requires_grad)
        };
        Ok(self.graph.push(value, Op::SumAxis { a: self.id, axis, mean }, rg))
    }

    /// `[m×k] @ [k×n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (value, m, k, n) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} @ {:?} (inner axes must agree)", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            matmul_into(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            (Tensor::from_vec(&[m, n], out)?, m, k, n)
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::Matmul { a: self.id, b: other.id, m, k, n }, rg))
    }

    /// `[B×m×k] @ [B×k×n]`.
    pub fn bmm(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (value, batch, m, k, n) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                return Err(Error::shape(
                    "bmm",
                    format!("{:?} @ {:?} (batch and inner axes must agree)", a.shape(), b.shape()),
                ));
            }
            let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut out = vec![T::zero(); batch * m * n];
            for t in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &a.data()[t * m * k..(t + 1) * m * k],
                    false,
                    &b.data()[t * k * n..(t + 1) * k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
            (Tensor::from_vec(&[batch, m, n], out)?, batch, m, k, n)
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::Bmm { a: self.id, b: other.id, batch, m, k, n }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            (src.value.clone().reshape(shape)?, src.requires_grad)
        };
        Ok(self.graph.push(value, Op::Reshape { a: self.id }, rg))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            let shape = src.value.shape();
            let mut seen = vec![false; shape.len()];
            if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute", format!("{perm:?} is not a permutation of the axes of {shape:?}")));
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let data = permute_data(src.value.data(), shape, perm);
            (Tensor::from_vec(&out_shape, data)?, src.requires_grad)
        };
        Ok(self.graph.push(value, Op::Permute { a: self.id, perm: perm.to_vec() }, rg))
    }

    /// Swaps the two axes of a matrix.
    pub fn t(self) -> Result<Var<'g, T>> {
        self.permute(&[1, 0])
    }

    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id];
            let shape = src.value.shape();
            if axis >= shape.len() {
                return Err(Error::shape("index_select", format!("axis {axis} out of range for {shape:?}")));
            }
            let extent = shape[axis];
            if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
                return Err(Error::Index { index: bad, len: extent });
            }
            if indices.is_empty() {
                return Err(Error::shape("index_select", "empty index list"));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let data = src.value.data();
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &ix in indices {
                    out.extend_from_slice(&data[(o * extent + ix) * inner..][..inner]);
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = indices.len();
            (Tensor::from_vec(&out_shape, out)?, src.requires_grad)
        };
        Ok(self.graph.push(
            value,
            Op::IndexSelect { a: self.id, axis, indices: indices.to_vec() },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (value, xhat, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let (x, ga, be) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let d = *x.shape().last().unwrap();
            if ga.shape() != [d] || be.shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("last axis {d} vs gamma {:?} / beta {:?}", ga.shape(), be.shape()),
                ));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.numel()];
            let inv_d = T::one() / T::from_f(d as f64);
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = ga.data()[j] * h + be.data()[j];
                }
            }
            (Tensor::from_vec(x.shape(), out)?, xhat, rstd)
        };
        let rg = self.graph.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            value,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            rg,
        ))
    }

    /// Scales each last-axis row to unit L2 norm; rows with norm below 1e-12 map to zero.
    pub fn l2_normalize(self) -> Var<'g, T> {
        let floor = T::from_f(1e-12);
        let mut norms_out = Vec::new();
        let value = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let d = *x.shape().last().unwrap();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d) {
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if nrm < floor {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    norms_out.push(T::zero());
                } else {
                    row.iter_mut().for_each(|v| *v /= nrm);
                    norms_out.push(nrm);
                }
            }
            Tensor::from_vec(x.shape(), out).unwrap()
        };
        let rg = self.requires_grad();
        self.graph.push(value, Op::L2Normalize { a: self.id, norms: norms_out }, rg)
    }

    /// Cross-correlation over `[C_in×L]` with weight `[C_out×C_in×K]`.
    pub fn conv1d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        self.conv1d_asym(weight, bias, stride, padding, padding)
    }

    /// [`Var::conv1d`] with independent left/right zero padding.
    pub fn conv1d_asym(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var<'g, T>> {
        let (value, geom) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let geom = Conv1dGeom::new(x.shape(), w.shape(), stride, pad_left, pad_right)?;
            let b = match bias {
                Some(b) => {
                    let bv = &nodes[b.id].value;
                    if bv.shape() != [geom.c_out] {
                        return Err(Error::shape("conv1d", format!("bias {:?} vs C_out {}", bv.shape(), geom.c_out)));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let out = geom.forward(x.data(), w.data(), b);
            (Tensor::from_vec(&[geom.c_out, geom.len_out()], out)?, geom)
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.needs(&ids);
        Ok(self.graph.push(
            value,
            Op::Conv1d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom },
            rg,
        ))
    }

    /// Transposed convolution over `[C_in×L]` with weight `[C_in×C_out×K]`.
    pub fn conv_transpose1d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        let (value, geom) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let geom = ConvTranspose1dGeom::new(x.shape(), w.shape(), stride, padding)?;
            let b = match bias {
                Some(b) => {
                    let bv = &nodes[b.id].value;
                    if bv.shape() != [geom.c_out] {
                        return Err(Error::shape("conv_transpose1d", format!("bias {:?} vs C_out {}", bv.shape(), geom.c_out)));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let out = geom.forward(x.data(), w.data(), b);
            (Tensor::from_vec(&[geom.c_out, geom.len_out()], out)?, geom)
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.needs(&ids);
        Ok(self.graph.push(
            value,
            Op::ConvTranspose1d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom },
            rg,
        ))
    }
}

/// Neighborhood attention as a fused tape op (see [`crate::natten`]).
pub fn neighborhood_attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    bias: Var<'g, T>,
    window: usize,
) -> Result<Var<'g, T>> {
    let graph = q.graph;
    let (value, dims, attn) = {
        let nodes = graph.nodes.borrow();
        let (qv, kv, vv, bv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value, &nodes[bias.id].value);
        let dims = natten::na_dims(qv.shape(), kv.shape(), vv.shape(), bv.shape(), window)?;
        let (out, attn) = natten::forward_raw(dims, qv.data(), kv.data(), vv.data(), bv.data());
        (Tensor::from_vec(qv.shape(), out)?, dims, attn)
    };
    let rg = graph.needs(&[q.id, k.id, v.id, bias.id]);
    Ok(graph.push(
        value,
        Op::Neighborhood { q: q.id, k: k.id, v: v.id, bias: bias.id, dims, attn },
        rg,
    ))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, T: Real>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let graph = first.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Tensor::from_vec(&shape, out)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.needs(&ids);
    Ok(graph.push(value, Op::Concat { parts: ids, axis }, rg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.variable(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let loss = x.sum();
        g.backward(loss).unwrap();
        assert!(y.grad().map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()).softmax();
        assert_eq!(a.value().data(), &[0.5, 0.5]);
        let b = g.constant(Tensor::from_vec(&[1], vec![7.0]).unwrap()).softmax();
        assert_eq!(b.value().data(), &[1.0]);
        let c = g
            .constant(Tensor::from_vec(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap())
            .softmax();
        let v = c.value();
        assert!((v.data()[0] - 0.25).abs() < 1e-15 && (v.data()[1] - 0.75).abs() < 1e-15);
        let big = g.constant(Tensor::from_vec(&[3], vec![1e4, -1e4, 0.0]).unwrap()).softmax();
        assert!(big.value().is_finite());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let y = g.constant(Tensor::full(&[3], 1.0)).layer_norm(ones, zeros, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let y = g
            .constant(Tensor::from_vec(&[2], vec![-1.0, 1.0]).unwrap())
            .layer_norm(one2, zero2, 1e-300)
            .unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);

        let five = g.constant(Tensor::full(&[2], 5.0));
        let y = g
            .constant(Tensor::from_vec(&[2], vec![3.0, -8.0]).unwrap())
            .layer_norm(zero2, five, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[5.0, 5.0]);
    }

    #[test]
    fn permute_round_trip() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::from_vec(&[2, 3, 4], data.clone()).unwrap());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().get(&[3, 1, 2]), x.value().get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), data.as_slice());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn matmul_shape_error_names_axes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn concat_and_select() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = c.index_select(1, &[2, 0]).unwrap();
        assert_eq!(s.value().data(), &[4.0, 1.0, 6.0, 2.0]);
    }
}
