use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A fused op with a hand-written adjoint. The forward value is computed by
/// the caller and handed to [`Tape::custom`].
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same length as the input data), or
    /// `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine(usize, T),
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    Broadcast(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    SoftmaxXent { logits: usize, targets: Vec<usize>, weights: Vec<T> },
    GridSample { map: usize, coords: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Record of one forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of a broadcast, the index of its source element.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let from_strides = strides(from);
    let mut src_strides = vec![0; to.len()];
    for i in 0..from.len() {
        if from[i] != 1 {
            src_strides[offset + i] = from_strides[i];
        }
    }
    let total = numel(to);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, is_param: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad, is_param });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A trainable leaf; receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// A constant leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        Ok((va, vb))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (va, vb) = self.same_shape(op, a, b)?;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&va.shape, data), mk(a.0, b.0), rg, false))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(&va.shape, data), op, rg, false)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    /// `scale * a + shift` with constant scalars.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::c(scale), T::c(shift));
        self.unary(a, move |x| s * x + t, Op::Affine(a.0, s))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a.0))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::c(lo), T::c(hi));
        self.unary(a, move |x| x.max(l).min(h), Op::Clamp(a.0, l, h))
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut s = T::zero();
        for &x in &va.data {
            s += x;
        }
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg, false)
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut s = T::zero();
        for &x in &va.data {
            s += x;
        }
        let n = T::c(va.data.len().max(1) as f64);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s / n), Op::Mean(a.0), rg, false)
    }

    /// Right-aligned broadcast to `shape`; size-1 and missing leading axes
    /// are repeated.
    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let ok = va.shape.len() <= shape.len()
            && va
                .shape
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(Error::shape("broadcast", format!("{:?} -> {:?}", va.shape, shape)));
        }
        let map = broadcast_index_map(&va.shape, shape);
        let data = map.iter().map(|&i| va.data[i]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, data), Op::Broadcast(a.0), rg, false))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if numel(shape) != va.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", va.shape, shape)));
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, va.data.clone()), Op::Reshape(a.0), rg, false))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = &vals[0].shape;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for v in &vals[1..] {
            let compatible = v.shape.len() == first.len()
                && v.shape.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {axis}", first, v.shape)));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = vals.iter().map(|v| v.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&shape, data), Op::Concat { inputs: ids, axis }, rg, false))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.shape.len() || start + len > va.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, va.shape),
            ));
        }
        let outer: usize = va.shape[..axis].iter().product();
        let inner: usize = va.shape[axis + 1..].iter().product();
        let dim = va.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&va.data[base..base + len * inner]);
        }
        let mut shape = va.shape.clone();
        shape[axis] = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&shape, data), Op::Slice { input: a.0, axis, start }, rg, false))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape, vb.shape)));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = kernels::matmul(m, k, n, &va.data, &vb.data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&[m, n], data), Op::MatMul(a.0, b.0), rg, false))
    }

    /// `x = [n, c, h, w]`, `w = [o, c, kh, kw]`, optional bias `[o]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape.len() != 4 || vw.shape.len() != 4 || vx.shape[1] != vw.shape[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", vx.shape, vw.shape)));
        }
        if vx.shape[2] + 2 * pad < vw.shape[2] || vx.shape[3] + 2 * pad < vw.shape[3] {
            return Err(Error::shape("conv2d", format!("kernel {:?} larger than padded input {:?}", vw.shape, vx.shape)));
        }
        let geom = ConvGeom {
            n: vx.shape[0],
            c: vx.shape[1],
            h: vx.shape[2],
            w: vx.shape[3],
            o: vw.shape[0],
            kh: vw.shape[2],
            kw: vw.shape[3],
            stride,
            pad,
        };
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape != [geom.o] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {} output channels", vb.shape, geom.o)));
                }
                Some(vb)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(&geom, &vx.data, &vw.data, vb.as_ref().map(|t| t.data.as_slice()));
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let rg = self.rg(&ids);
        let shape = [geom.n, geom.o, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::new(&shape, data), Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, rg, false))
    }

    /// Sum over rows of `w_k * -log softmax(logits_k)[targets_k]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape.len() != 2 || vl.shape[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} targets, {} weights", vl.shape, targets.len(), weights.len()),
            ));
        }
        let (k, c) = (vl.shape[0], vl.shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("target {t} >= {c} classes")));
        }
        let w: Vec<T> = weights.iter().map(|&x| T::c(x)).collect();
        let mut total = T::zero();
        for r in 0..k {
            if w[r] == T::zero() {
                continue;
            }
            let row = &vl.data[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            total += w[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent { logits: logits.0, targets: targets.to_vec(), weights: w },
            rg,
            false,
        ))
    }

    /// Bilinear sampling of `map = [c, h, w]` at `coords = [k, 2]`; see
    /// [`kernels::grid_sample_forward`]. Returns `[k, c]`.
    pub fn grid_sample(&self, map: Var, coords: Var) -> Result<Var> {
        let (vm, vc) = (self.value(map), self.value(coords));
        if vm.shape.len() != 3 || vc.shape.len() != 2 || vc.shape[1] != 2 {
            return Err(Error::shape("grid_sample", format!("map {:?}, coords {:?}", vm.shape, vc.shape)));
        }
        let (c, h, w) = (vm.shape[0], vm.shape[1], vm.shape[2]);
        let data = kernels::grid_sample_forward(c, h, w, &vm.data, &vc.data);
        let rg = self.rg(&[map.0, coords.0]);
        Ok(self.push(Tensor::new(&[vc.shape[0], c], data), Op::GridSample { map: map.0, coords: coords.0 }, rg, false))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg, false)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = &nodes[root.0].value.shape;
        if !root_shape.is_empty() {
            return Err(Error::NonScalarRoot(root_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.is_param {
                out.insert(id, Tensor::new(&node.value.shape, g));
                continue;
            }
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let needs = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, contrib: Vec<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    acc(*b, g.iter().map(|&x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(*a, g.iter().zip(&vb.data).map(|(&g, &y)| g * y).collect());
                    }
                    if needs(*b) {
                        acc(*b, g.iter().zip(&va.data).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(*a, g.iter().zip(&vb.data).map(|(&g, &y)| g / y).collect());
                    }
                    if needs(*b) {
                        let c: Vec<T> = g
                            .iter()
                            .zip(va.data.iter().zip(&vb.data))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect();
                        acc(*b, c);
                    }
                }
                Op::Neg(a) => acc(*a, g.iter().map(|&x| -x).collect()),
                Op::Affine(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
                Op::Relu(a) => {
                    let va = val(*a);
                    acc(*a, g.iter().zip(&va.data).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
                }
                Op::Tanh(_) | Op::Sigmoid(_) | Op::Exp(_) => {
                    let y = &node.value.data;
                    let (a, c): (usize, Vec<T>) = match &node.op {
                        Op::Tanh(a) => (*a, g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect()),
                        Op::Sigmoid(a) => (*a, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect()),
                        Op::Exp(a) => (*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                        _ => unreachable!(),
                    };
                    acc(a, c);
                }
                Op::Softplus(a) => {
                    let va = val(*a);
                    acc(*a, g.iter().zip(&va.data).map(|(&g, &x)| g * sigmoid(x)).collect());
                }
                Op::Log(a) => {
                    let va = val(*a);
                    acc(*a, g.iter().zip(&va.data).map(|(&g, &x)| g / x).collect());
                }
                Op::Abs(a) => {
                    let va = val(*a);
                    let c = g
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(*a, c);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = val(*a);
                    acc(*a, g.iter().zip(&va.data).map(|(&g, &x)| if x > *lo && x < *hi { g } else { T::zero() }).collect());
                }
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).data.len()]),
                Op::Mean(a) => {
                    let n = val(*a).data.len();
                    acc(*a, vec![g[0] / T::c(n.max(1) as f64); n]);
                }
                Op::Broadcast(a) => {
                    let va = val(*a);
                    let map = broadcast_index_map(&va.shape, &node.value.shape);
                    let mut c = vec![T::zero(); va.data.len()];
                    for (o, &src) in map.iter().enumerate() {
                        c[src] += g[o];
                    }
                    acc(*a, c);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Concat { inputs, axis } => {
                    let shape = &node.value.shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &i in inputs {
                        let chunk = val(i).shape[*axis] * inner;
                        if needs(i) {
                            let mut c = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                c.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                            }
                            acc(i, c);
                        }
                        offset += chunk;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let vi = val(*input);
                    let outer: usize = vi.shape[..*axis].iter().product();
                    let inner: usize = vi.shape[axis + 1..].iter().product();
                    let dim = vi.shape[*axis];
                    let len = node.value.shape[*axis];
                    let mut c = vec![T::zero(); vi.data.len()];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        c[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*input, c);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    if needs(*a) {
                        // ga (m x k) = g (m x n) * b^T (n x k)
                        let mut c = vec![T::zero(); m * k];
                        T::gemm(m, n, k, &g, n as isize, 1, &vb.data, 1, n as isize, T::zero(), &mut c);
                        acc(*a, c);
                    }
                    if needs(*b) {
                        // gb (k x n) = a^T (k x m) * g (m x n)
                        let mut c = vec![T::zero(); k * n];
                        T::gemm(k, m, n, &va.data, 1, k as isize, &g, n as isize, 1, T::zero(), &mut c);
                        acc(*b, c);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let mut gx = needs(*x).then(|| vec![T::zero(); vx.data.len()]);
                    let mut gw = needs(*w).then(|| vec![T::zero(); vw.data.len()]);
                    let mut gb = b.filter(|&b| needs(b)).map(|_| vec![T::zero(); geom.o]);
                    kernels::conv2d_backward(geom, &vx.data, &vw.data, &g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                    if let Some(c) = gx {
                        acc(*x, c);
                    }
                    if let Some(c) = gw {
                        acc(*w, c);
                    }
                    if let (Some(b), Some(c)) = (b, gb) {
                        acc(*b, c);
                    }
                }
                Op::SoftmaxXent { logits, targets, weights } => {
                    let vl = val(*logits);
                    let (k, c) = (vl.shape[0], vl.shape[1]);
                    let mut out_g = vec![T::zero(); k * c];
                    for r in 0..k {
                        if weights[r] == T::zero() {
                            continue;
                        }
                        let row = &vl.data[r * c..(r + 1) * c];
                        let lse = log_sum_exp(row);
                        let scale = g[0] * weights[r];
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            out_g[r * c + j] = scale * (p - onehot);
                        }
                    }
                    acc(*logits, out_g);
                }
                Op::GridSample { map, coords } => {
                    let (vm, vc) = (val(*map), val(*coords));
                    let (c, h, w) = (vm.shape[0], vm.shape[1], vm.shape[2]);
                    let mut gm = needs(*map).then(|| vec![T::zero(); vm.data.len()]);
                    let mut gc = needs(*coords).then(|| vec![T::zero(); vc.data.len()]);
                    kernels::grid_sample_backward(c, h, w, &vm.data, &vc.data, &g, gm.as_deref_mut(), gc.as_deref_mut());
                    if let Some(gm) = gm {
                        acc(*map, gm);
                    }
                    if let Some(gc) = gc {
                        acc(*coords, gc);
                    }
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                    let need: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
                    let gs = op.backward(&ins, &node.value, &g, &need);
                    for (&i, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            acc(i, gi);
                        }
                    }
                }
            }
        }
        Ok(Gradients { map: out })
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for &x in row {
        s += (x - m).exp();
    }
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d)
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(m).unwrap().data, vec![1.0; 4]);
        assert!(g.get(i).is_none());
    }

    #[test]
    fn one_by_one_conv_scales() {
        let tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..18).map(|i| i as f64 * 0.5).collect();
        let x = tape.constant(t(&[1, 2, 3, 3], &img));
        // per-channel 1x1 kernel of value 2 on a two-channel input: use two
        // output channels, each picking its own input channel.
        let w = tape.param(t(&[2, 2, 1, 1], &[2.0, 0.0, 0.0, 2.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let expected: Vec<f64> = img.iter().map(|v| v * 2.0).collect();
        assert_eq!(tape.value(y).data, expected);
    }

    #[test]
    fn sum_and_mean_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data, vec![1.0; 6]);
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0; 6]));
        let m = tape.mean(x);
        assert_eq!(tape.backward(m).unwrap().get(x).unwrap().data, vec![1.0 / 6.0; 6]);
    }

    #[test]
    fn independent_tapes() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let xa = a.param(Tensor::scalar(2.0));
        let xb = b.param(Tensor::scalar(5.0));
        let ya = a.mul(xa, xa).unwrap();
        let yb = b.mul(xb, xb).unwrap();
        let ga = a.backward(ya).unwrap();
        let gb = b.backward(yb).unwrap();
        assert_eq!(ga.get(xa).unwrap().data, vec![4.0]);
        assert_eq!(gb.get(xb).unwrap().data, vec![10.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn fan_out_sums_paths() {
        // y = x*x + 3x uses x three times.
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y).unwrap().take(x).unwrap().item();

        // the same function computed with split copies of x
        let tape2 = Tape::<f64>::new();
        let x1 = tape2.param(Tensor::scalar(1.5));
        let x2 = tape2.param(Tensor::scalar(1.5));
        let x3 = tape2.param(Tensor::scalar(1.5));
        let sq = tape2.mul(x1, x2).unwrap();
        let lin = tape2.scale(x3, 3.0);
        let y2 = tape2.add(sq, lin).unwrap();
        let gs = tape2.backward(y2).unwrap();
        let split = gs.get(x1).unwrap().item() + gs.get(x2).unwrap().item() + gs.get(x3).unwrap().item();
        assert_eq!(g, split);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn subgradient_at_kinks_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[0.0, 0.0]));
        let r = tape.relu(x);
        let a = tape.abs(x);
        let s = tape.add(r, a).unwrap();
        let y = tape.sum(s);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn broadcast_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.broadcast(b, &[4, 3]).unwrap();
        assert_eq!(tape.value(y).data[9..12], [1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().get(b).unwrap().data, vec![4.0; 3]);
        let c = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let y = tape.broadcast(c, &[2, 3]).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(tape.broadcast(c, &[3, 3]).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data, vec![2.0, 5.0, 4.0, 6.0]);
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().data, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn uniform_cross_entropy() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(&[4, 4]));
        let y = tape.softmax_cross_entropy(logits, &[0, 1, 2, 3], &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tape.item(y) - 3.0 * 4f64.ln()).abs() < 1e-12);
    }
}
