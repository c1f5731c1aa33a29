use super::kernels::{self, ConvGeom};
use super::shape::{self, broadcast_shape, broadcast_strides, for_each_strided2, reduced_shape, split_at_axis};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Neg,
    AddScalar,
    MulScalar(f64),
    PowConst(f64),
    Sqrt,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Clamp { lo: f64, hi: f64 },
    MatMul,
    Transpose,
    Conv2d(ConvGeom),
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize>, count: usize },
    Max { axes: Vec<usize>, argmax: Vec<usize> },
    Reshape,
    BroadcastTo,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Softmax { axis: usize },
    GridSample { oh: usize, ow: usize },
    ScaleGrad(f64),
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A tape of primitive applications in creation (= topological) order.
///
/// Nodes only reference earlier nodes, so the tape is acyclic by construction
/// and the backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one gradient per node that requires it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`. Every `requires_grad` leaf has one (zero
    /// when unreachable from the seeds); other nodes only when reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
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

fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::invalid(format!("{op}: invalid axes {axes:?} for shape {shape:?}")));
    }
    Ok(axes)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = Vec::with_capacity(shape::numel(&out_shape));
            for_each_strided2(&out_shape, &sa, &sb, |_, ia, ib| out.push(f(da[ia], db[ib])));
            out
        };
        Ok(self.push(op, vec![a, b], Tensor::from_parts(out_shape, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    /// `x ^ p` with a broadcastable exponent tensor. The exponent gradient
    /// needs `x > 0`; it is taken as zero elsewhere.
    pub fn pow(&mut self, x: Var, p: Var) -> Result<Var> {
        self.binary(Op::Pow, "pow", x, p, |a, b| a.powf(b))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::lit(c);
        self.unary(Op::MulScalar(c), x, |v| v * ct)
    }

    pub fn powf(&mut self, x: Var, c: f64) -> Var {
        let ct = T::lit(c);
        self.unary(Op::PowConst(c), x, |v| v.powf(ct))
    }

    /// Square root; its gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Sqrt, x, |v| v.sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log, x, |v| v.ln())
    }

    /// `max(x, 0)`; subgradient 0 at exactly 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, |v| v.tanh())
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp { lo, hi }, x, |v| v.max(l).min(h))
    }

    /// Forward identity whose backward multiplies the gradient by `factor`.
    /// Only useful as a deliberately wrong backward rule in verification fixtures.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        self.unary(Op::ScaleGrad(factor), x, |v| v)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::from_parts(vec![m, n], out)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(d[i * c + j]);
            }
        }
        Ok(self.push(Op::Transpose, vec![x], Tensor::from_parts(vec![c, r], out)))
    }

    /// Cross-correlation of `[n, c, h, w]` input with `[o, c, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let geom = ConvGeom::new(tx.shape(), tk.shape(), stride, pad)?;
        let out = kernels::conv2d_forward(tx.data(), tk.data(), &geom);
        Ok(self.push(Op::Conv2d(geom), vec![x, kernel], Tensor::from_parts(geom.out_shape(), out)))
    }

    // ---- reductions ----------------------------------------------------

    fn reduce_sum(t: &Tensor<T>, axes: &[usize]) -> Vec<T> {
        let keep = reduced_shape(t.shape(), axes);
        let mut out = vec![T::zero(); shape::numel(&keep)];
        let so = broadcast_strides(&keep, t.shape());
        let d = t.data();
        for_each_strided2(t.shape(), &shape::strides(t.shape()), &so, |_, ix, io| out[io] += d[ix]);
        out
    }

    fn finish_shape(in_shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
        if keepdim {
            reduced_shape(in_shape, axes)
        } else {
            shape::squeeze_axes(in_shape, axes)
        }
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        let axes = check_axes("sum", t.shape(), axes)?;
        let out = Self::reduce_sum(t, &axes);
        let shape = Self::finish_shape(t.shape(), &axes, keepdim);
        Ok(self.push(Op::Sum { axes }, vec![x], Tensor::from_parts(shape, out)))
    }

    /// Sum of every element as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        let axes = check_axes("mean", t.shape(), axes)?;
        let count: usize = axes.iter().map(|&a| t.shape()[a]).product();
        let inv = T::one() / T::lit(count as f64);
        let out: Vec<T> = Self::reduce_sum(t, &axes).into_iter().map(|v| v * inv).collect();
        let shape = Self::finish_shape(t.shape(), &axes, keepdim);
        Ok(self.push(Op::Mean { axes, count }, vec![x], Tensor::from_parts(shape, out)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.mean(x, &axes, false)
    }

    /// Maximum over `axes`. Ties resolve to the first maximal element in
    /// row-major order, which also receives the whole gradient.
    pub fn max(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        let axes = check_axes("max", t.shape(), axes)?;
        let keep = reduced_shape(t.shape(), &axes);
        let n_out = shape::numel(&keep);
        let mut best = vec![T::neg_infinity(); n_out];
        let mut argmax = vec![usize::MAX; n_out];
        let so = broadcast_strides(&keep, t.shape());
        let d = t.data();
        for_each_strided2(t.shape(), &shape::strides(t.shape()), &so, |_, ix, io| {
            if argmax[io] == usize::MAX || d[ix] > best[io] {
                best[io] = d[ix];
                argmax[io] = ix;
            }
        });
        let shape = Self::finish_shape(t.shape(), &axes, keepdim);
        Ok(self.push(Op::Max { axes, argmax }, vec![x], Tensor::from_parts(shape, best)))
    }

    // ---- structure -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let t = self.value(x);
        match broadcast_shape(t.shape(), target) {
            Some(s) if s == target => {}
            _ => return Err(Error::shape("broadcast_to", t.shape(), target)),
        }
        let sa = broadcast_strides(t.shape(), target);
        let d = t.data();
        let mut out = Vec::with_capacity(shape::numel(target));
        for_each_strided2(target, &sa, &sa, |_, ia, _| out.push(d[ia]));
        Ok(self.push(Op::BroadcastTo, vec![x], Tensor::from_parts(target.to_vec(), out)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), Tensor::from_parts(shape, out)))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "narrow: range {start}..{} on axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = split_at_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Op::Narrow { axis, start }, vec![x], Tensor::from_parts(shape, out)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(format!("softmax: axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Softmax { axis }, vec![x], Tensor::from_parts(shape, out)))
    }

    /// Bilinear sampling of `[n, c, h, w]` images on the zoom-and-shift grid
    /// given by `[n, 4]` params `(s_x, s_y, t_x, t_y)`:
    /// source = scale * target + translation, all in `[-1, 1]` coordinates.
    /// Out-of-image taps read as zero.
    pub fn grid_sample(&mut self, image: Var, params: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!("grid_sample: output size {out_h}x{out_w}")));
        }
        let (ti, tp) = (self.value(image), self.value(params));
        let (si, sp) = (ti.shape(), tp.shape());
        if si.len() != 4 || sp != [si[0], 4] {
            return Err(Error::shape("grid_sample", si, sp));
        }
        let dims = [si[0], si[1], si[2], si[3]];
        let out = kernels::grid_sample_forward(ti.data(), dims, tp.data(), out_h, out_w);
        Ok(self.push(
            Op::GridSample { oh: out_h, ow: out_w },
            vec![image, params],
            Tensor::from_parts(vec![dims[0], dims[1], out_h, out_w], out),
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", t.shape())));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape(), T::one()))])
    }

    /// Reverse sweep from arbitrary upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads[v.0], g.data());
            last = last.max(v.0);
        }
        if !seeds.is_empty() {
            for i in (0..=last).rev() {
                let node = &self.nodes[i];
                if !node.requires_grad || matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                let input_grads = self.node_backward(i, &g);
                for (inp, gi) in node.inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        accumulate(&mut grads[inp.0], &gi);
                    }
                }
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let zip1 = |f: &dyn Fn(T, T, T) -> T| -> Vec<Option<Vec<T>>> {
            let x = inp(0).data();
            vec![Some(g.iter().zip(x).zip(out).map(|((&g, &x), &y)| f(g, x, y)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => self.binary_backward(node, g),
            Op::Neg => zip1(&|g, _, _| -g),
            Op::AddScalar => zip1(&|g, _, _| g),
            Op::ScaleGrad(f) => {
                let f = T::lit(*f);
                zip1(&|g, _, _| g * f)
            }
            Op::MulScalar(c) => {
                let c = T::lit(*c);
                zip1(&|g, _, _| g * c)
            }
            Op::PowConst(c) => {
                let (ct, cm1) = (T::lit(*c), T::lit(*c - 1.0));
                zip1(&|g, x, _| g * ct * x.powf(cm1))
            }
            Op::Sqrt => zip1(&|g, _, y| if y > T::zero() { g / (y + y) } else { T::zero() }),
            Op::Exp => zip1(&|g, _, y| g * y),
            Op::Log => zip1(&|g, x, _| g / x),
            Op::Relu => zip1(&|g, x, _| if x > T::zero() { g } else { T::zero() }),
            Op::Sigmoid => zip1(&|g, _, y| g * y * (T::one() - y)),
            Op::Tanh => zip1(&|g, _, y| g * (T::one() - y * y)),
            Op::Clamp { lo, hi } => {
                let (l, h) = (T::lit(*lo), T::lit(*hi));
                zip1(&|g, x, _| if x > l && x < h { g } else { T::zero() })
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = wants(0).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                    ga
                });
                let gb = wants(1).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = (inp(0).shape()[0], inp(0).shape()[1]);
                let mut gx = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }
            Op::Conv2d(geom) => {
                let (dx, dk) =
                    kernels::conv2d_backward(inp(0).data(), inp(1).data(), g, geom, wants(0), wants(1));
                vec![dx, dk]
            }
            Op::Sum { axes } | Op::Mean { axes, .. } => {
                let x = inp(0);
                let scale = match &node.op {
                    Op::Mean { count, .. } => T::one() / T::lit(*count as f64),
                    _ => T::one(),
                };
                let keep = reduced_shape(x.shape(), axes);
                let so = broadcast_strides(&keep, x.shape());
                let mut gx = vec![T::zero(); x.numel()];
                for_each_strided2(x.shape(), &shape::strides(x.shape()), &so, |_, ix, io| gx[ix] = g[io] * scale);
                vec![Some(gx)]
            }
            Op::Max { argmax, .. } => {
                let mut gx = vec![T::zero(); inp(0).numel()];
                for (io, &ix) in argmax.iter().enumerate() {
                    gx[ix] += g[io];
                }
                vec![Some(gx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::BroadcastTo => {
                let x = inp(0);
                vec![Some(reduce_to(g, node.value.shape(), x.shape()))]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let len = inp(k).shape()[*axis];
                        let res = wants(k).then(|| {
                            let mut gx = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gx.extend_from_slice(&g[base..base + len * inner]);
                            }
                            gx
                        });
                        offset += len;
                        res
                    })
                    .collect()
            }
            Op::Narrow { axis, start } => {
                let x = inp(0);
                let (outer, full, inner) = split_at_axis(x.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::GridSample { oh, ow } => {
                let (img, params) = (inp(0), inp(1));
                let s = img.shape();
                let (di, dp) = kernels::grid_sample_backward(
                    img.data(),
                    [s[0], s[1], s[2], s[3]],
                    params.data(),
                    *oh,
                    *ow,
                    g,
                    wants(0),
                    wants(1),
                );
                vec![di, dp]
            }
        }
    }

    fn binary_backward(&self, node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&self.nodes[node.inputs[0].0], &self.nodes[node.inputs[1].0]);
        let (ta, tb) = (&a.value, &b.value);
        let out_shape = node.value.shape();
        let sa = broadcast_strides(ta.shape(), out_shape);
        let sb = broadcast_strides(tb.shape(), out_shape);
        let (da, db, y) = (ta.data(), tb.data(), node.value.data());
        let mut ga = a.requires_grad.then(|| vec![T::zero(); ta.numel()]);
        let mut gb = b.requires_grad.then(|| vec![T::zero(); tb.numel()]);
        let op = &node.op;
        for_each_strided2(out_shape, &sa, &sb, |o, ia, ib| {
            let (x, z, go) = (da[ia], db[ib], g[o]);
            let (dfa, dfb) = match op {
                Op::Add => (go, go),
                Op::Sub => (go, -go),
                Op::Mul => (go * z, go * x),
                Op::Div => (go / z, -go * x / (z * z)),
                Op::Pow => {
                    let dp = if x > T::zero() { go * y[o] * x.ln() } else { T::zero() };
                    (go * z * x.powf(z - T::one()), dp)
                }
                _ => unreachable!("not a binary op"),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += dfa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += dfb;
            }
        });
        vec![ga, gb]
    }

    /// Smallest distance of any relu / max / clamp / sampler input to a point
    /// where the recorded function is not differentiable. Finite-difference
    /// checks are only meaningful when this is comfortably above the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let x = || self.nodes[node.inputs[0].0].value.to_f64();
            match &node.op {
                Op::Relu => margin = x().iter().fold(margin, |m, v| m.min(v.abs())),
                Op::Clamp { lo, hi } => {
                    margin = x().iter().fold(margin, |m, v| m.min((v - lo).abs()).min((v - hi).abs()))
                }
                Op::Max { axes, .. } => {
                    let t = &self.nodes[node.inputs[0].0].value;
                    let keep = reduced_shape(t.shape(), axes);
                    let n_out = shape::numel(&keep);
                    let mut top = vec![(f64::NEG_INFINITY, f64::NEG_INFINITY); n_out];
                    let so = broadcast_strides(&keep, t.shape());
                    let d = t.to_f64();
                    for_each_strided2(t.shape(), &shape::strides(t.shape()), &so, |_, ix, io| {
                        let v = d[ix];
                        let (a, b) = top[io];
                        top[io] = if v > a { (v, a) } else { (a, b.max(v)) };
                    });
                    margin = top.iter().fold(margin, |m, (a, b)| m.min(a - b));
                }
                Op::GridSample { oh, ow } => {
                    let img = &self.nodes[node.inputs[0].0].value;
                    let params = &self.nodes[node.inputs[1].0].value;
                    let s = img.shape();
                    margin = margin.min(kernels::grid_sample_kink_margin(
                        [s[0], s[1], s[2], s[3]],
                        params.data(),
                        *oh,
                        *ow,
                    ));
                }
                _ => {}
            }
        }
        margin
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Sums a gradient of `from` shape down to the broadcast source shape `to`.
fn reduce_to<T: Real>(g: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); shape::numel(to)];
    let st = broadcast_strides(to, from);
    for_each_strided2(from, &shape::strides(from), &st, |_, ig, io| out[io] += g[ig]);
    out
}
