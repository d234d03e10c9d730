//! Reverse-mode tape over [`Tensor`].
//!
//! One [`Graph`] records one forward pass; `backward` replays it once in
//! reverse and is then spent. Broadcasting is restricted to scalar↔tensor
//! (one operand with a single element) and identical shapes; every other
//! shape relation has an explicit op. Ops compute eagerly on construction,
//! so `value` is available immediately.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm stabilizer: squash directions and capsule norms use ‖s‖_safe =
/// √(‖s‖² + NORM_EPS) so the zero vector maps to zero with finite gradient.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId),
    Scale(VarId, S),
    Exp(VarId),
    Sqrt(VarId),
    Square(VarId),
    Sigmoid(VarId),
    Relu(VarId),
    Matmul(VarId, VarId),
    SumAll(VarId),
    MeanAll(VarId),
    SumAxis(VarId, usize),
    MeanAxis(VarId, usize),
    Softmax(VarId, usize),
    LogSumExp(VarId, usize),
    Reshape(VarId),
    BroadcastPrepend(VarId, usize),
    CapsPredict(VarId, VarId),
    RouteSum(VarId, Tensor<S>),
    Squash(VarId),
    NormLast(VarId),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    spent: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, len, inner) extents around `axis` for row-major lane iteration.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

enum BinCase {
    Same,
    ScalarLhs,
    ScalarRhs,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn var(&mut self, value: Tensor<S>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.var(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Present on every node the loss depended on, after backward.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn bin_case(&self, op: &'static str, a: VarId, b: VarId) -> Result<BinCase> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(BinCase::Same)
        } else if self.value(b).numel() == 1 {
            Ok(BinCase::ScalarRhs)
        } else if self.value(a).numel() == 1 {
            Ok(BinCase::ScalarLhs)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<VarId> {
        let case = self.bin_case(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = match case {
            BinCase::Same => Tensor::new(
                va.shape(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            BinCase::ScalarRhs => {
                let y = vb.item();
                va.map(|x| f(x, y))
            }
            BinCase::ScalarLhs => {
                let x = va.item();
                vb.map(|y| f(x, y))
            }
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: VarId, f: impl Fn(S) -> S, op: Op<S>) -> VarId {
        let value = self.value(a).map(f);
        let rg = self.needs(a);
        self.push(value, rg, op)
    }

    pub fn add_scalar(&mut self, a: VarId, c: S) -> VarId {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: VarId, c: S) -> VarId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        if let Some(x) = self.value(a).data().iter().find(|x| **x < S::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {x}"),
            });
        }
        Ok(self.unary(a, |x| x.sqrt(), Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::Matmul(a, b)))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        let rg = self.needs(a);
        self.push(Tensor::scalar(total), rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.value(a).numel();
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        let rg = self.needs(a);
        self.push(
            Tensor::scalar(total / S::from_f64(n as f64)),
            rg,
            Op::MeanAll(a),
        )
    }

    fn reduce_axis(&mut self, op_name: &'static str, a: VarId, axis: usize, mean: bool) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: op_name,
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_f64(len as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.needs(a);
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, op))
    }

    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let value = softmax_tensor(self.value(a), axis);
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Softmax(a, axis)))
    }

    /// Stabilized log Σ exp along `axis` (axis removed from the shape).
    pub fn log_sum_exp(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "log_sum_exp",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut mx = x[base];
                for i in 1..len {
                    mx = mx.max(x[base + i * inner]);
                }
                let mut sum = S::zero();
                for i in 0..len {
                    sum = sum + (x[base + i * inner] - mx).exp();
                }
                out[o * inner + r] = mx + sum.ln();
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::LogSumExp(a, axis)))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Tiles `a` n times along a new leading axis: shape [..] → [n, ..].
    pub fn broadcast_prepend(&mut self, a: VarId, n: usize) -> VarId {
        let va = self.value(a);
        let mut shape = Vec::with_capacity(va.rank() + 1);
        shape.push(n);
        shape.extend_from_slice(va.shape());
        let mut data = Vec::with_capacity(n * va.numel());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let rg = self.needs(a);
        self.push(
            Tensor::new(&shape, data).expect("broadcast shape is consistent by construction"),
            rg,
            Op::BroadcastPrepend(a, n),
        )
    }

    /// Capsule predictions û[b,i,j,:] = u[b,i,:]·W[i,j,:,:] for
    /// u [batch, ni, di] and w [ni, nj, di, dj].
    pub fn caps_predict(&mut self, u: VarId, w: VarId) -> Result<VarId> {
        let (su, sw) = (self.value(u).shape(), self.value(w).shape());
        if su.len() != 3 || sw.len() != 4 || su[1] != sw[0] || su[2] != sw[2] {
            return Err(Error::ShapeMismatch {
                op: "caps_predict",
                lhs: su.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, ni, di) = (su[0], su[1], su[2]);
        let (nj, dj) = (sw[1], sw[3]);
        let mut out = vec![S::zero(); batch * ni * nj * dj];
        kernels::caps_predict(
            batch,
            ni,
            nj,
            di,
            dj,
            self.value(u).data(),
            self.value(w).data(),
            &mut out,
        );
        let rg = self.needs(u) || self.needs(w);
        Ok(self.push(
            Tensor::new(&[batch, ni, nj, dj], out)?,
            rg,
            Op::CapsPredict(u, w),
        ))
    }

    /// Coupling-weighted parent sums s[b,j,:] = Σ_i k[b,i,j]·û[b,i,j,:].
    /// The couplings are a detached constant: gradients flow into û only.
    pub fn route_sum(&mut self, uhat: VarId, k: Tensor<S>) -> Result<VarId> {
        let su = self.value(uhat).shape();
        if su.len() != 4 || k.shape() != &su[..3] {
            return Err(Error::ShapeMismatch {
                op: "route_sum",
                lhs: su.to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let (batch, ni, nj, dj) = (su[0], su[1], su[2], su[3]);
        let mut out = vec![S::zero(); batch * nj * dj];
        kernels::route_sum(batch, ni, nj, dj, k.data(), self.value(uhat).data(), &mut out);
        let rg = self.needs(uhat);
        Ok(self.push(
            Tensor::new(&[batch, nj, dj], out)?,
            rg,
            Op::RouteSum(uhat, k),
        ))
    }

    /// Squashing nonlinearity along the last axis:
    /// v = (‖s‖²/(1+‖s‖²))·(s/‖s‖_safe).
    pub fn squash(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "squash",
                lhs: shape,
                rhs: vec![],
            });
        }
        let dim = *shape.last().expect("non-empty shape");
        let x = self.value(a).data();
        let mut out = vec![S::zero(); x.len()];
        let eps = S::from_f64(NORM_EPS);
        for (sv, ov) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let q = sv.iter().fold(S::zero(), |acc, &v| acc + v * v);
            let r = (q + eps).sqrt();
            let coef = q / (S::one() + q) / r;
            for (o, &v) in ov.iter_mut().zip(sv) {
                *o = coef * v;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Squash(a)))
    }

    /// Stabilized Euclidean norm along the last axis (axis removed).
    pub fn norm_last(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "norm_last",
                lhs: shape,
                rhs: vec![],
            });
        }
        let dim = *shape.last().expect("non-empty shape");
        let x = self.value(a).data();
        let eps = S::from_f64(NORM_EPS);
        let out: Vec<S> = x
            .chunks_exact(dim)
            .map(|sv| {
                let q = sv.iter().fold(S::zero(), |acc, &v| acc + v * v);
                (q + eps).sqrt()
            })
            .collect();
        let out_shape = &shape[..shape.len() - 1];
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::NormLast(a)))
    }

    /// Populates `grad` on every node the scalar `loss` depends on. A graph
    /// supports exactly one backward per forward; a second call is a
    /// contract error.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.spent {
            return Err(Error::Contract(
                "backward called twice on one graph; build a fresh forward".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.vjp(idx, &gy, &mut grads);
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_binary(*a, *b, gy, grads, |g, _, _| g, |g, _, _| g);
            }
            Op::Sub(a, b) => {
                self.accum_binary(*a, *b, gy, grads, |g, _, _| g, |g, _, _| -g);
            }
            Op::Mul(a, b) => {
                self.accum_binary(*a, *b, gy, grads, |g, _, vb| g * vb, |g, va, _| g * va);
            }
            Op::Div(a, b) => {
                let y = &node.value;
                // d/da = g/b ; d/db = -g·y/b
                self.accum_binary_with(*a, *b, gy, y, grads, |g, _, vb, _| g / vb, |g, _, vb, vy| {
                    -g * vy / vb
                });
            }
            Op::AddScalar(a) => self.accum(*a, grads, gy.clone()),
            Op::Scale(a, c) => self.accum(*a, grads, gy.map(|g| g * *c)),
            Op::Exp(a) => {
                let y = &node.value;
                self.accum_elem(*a, grads, gy, |g, i| g * y.data()[i]);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let half = S::from_f64(0.5);
                self.accum_elem(*a, grads, gy, |g, i| g * half / y.data()[i]);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = S::from_f64(2.0);
                self.accum_elem(*a, grads, gy, |g, i| g * two * x.data()[i]);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum_elem(*a, grads, gy, |g, i| {
                    let v = y.data()[i];
                    g * v * (S::one() - v)
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accum_elem(*a, grads, gy, |g, i| {
                    if x.data()[i] > S::zero() {
                        g
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let mut bt = vec![S::zero(); k * n];
                    kernels::transpose(k, n, vb.data(), &mut bt);
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul(m, n, k, gy.data(), &bt, &mut da);
                    self.accum(*a, grads, Tensor::new(&[m, k], da).expect("matmul grad shape"));
                }
                if self.needs(*b) {
                    let mut at = vec![S::zero(); m * k];
                    kernels::transpose(m, k, va.data(), &mut at);
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul(k, m, n, &at, gy.data(), &mut db);
                    self.accum(*b, grads, Tensor::new(&[k, n], db).expect("matmul grad shape"));
                }
            }
            Op::SumAll(a) => {
                let g = gy.item();
                self.accum(*a, grads, Tensor::filled(self.value(*a).shape(), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let g = gy.item() / S::from_f64(n as f64);
                self.accum(*a, grads, Tensor::filled(self.value(*a).shape(), g));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.value(*a).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) => S::one() / S::from_f64(len as f64),
                    _ => S::one(),
                };
                let mut dx = vec![S::zero(); self.value(*a).numel()];
                for o in 0..outer {
                    for i in 0..len {
                        let dst = &mut dx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        let src = &gy.data()[o * inner..(o + 1) * inner];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d = g * scale;
                        }
                    }
                }
                self.accum(*a, grads, Tensor::new(shape, dx).expect("reduce grad shape"));
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let shape = y.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut dx = vec![S::zero(); y.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * len * inner + r;
                        let mut dy_dot_y = S::zero();
                        for i in 0..len {
                            let e = base + i * inner;
                            dy_dot_y = dy_dot_y + gy.data()[e] * y.data()[e];
                        }
                        for i in 0..len {
                            let e = base + i * inner;
                            dx[e] = y.data()[e] * (gy.data()[e] - dy_dot_y);
                        }
                    }
                }
                self.accum(*a, grads, Tensor::new(shape, dx).expect("softmax grad shape"));
            }
            Op::LogSumExp(a, axis) => {
                let x = self.value(*a);
                let y = &node.value;
                let shape = x.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut dx = vec![S::zero(); x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let lane = o * inner + r;
                        let base = o * len * inner + r;
                        let (yv, gv) = (y.data()[lane], gy.data()[lane]);
                        for i in 0..len {
                            let e = base + i * inner;
                            dx[e] = (x.data()[e] - yv).exp() * gv;
                        }
                    }
                }
                self.accum(*a, grads, Tensor::new(shape, dx).expect("lse grad shape"));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                self.accum(
                    *a,
                    grads,
                    gy.reshape(shape).expect("reshape grad round-trip"),
                );
            }
            Op::BroadcastPrepend(a, n) => {
                let len = self.value(*a).numel();
                let mut dx = vec![S::zero(); len];
                for rep in 0..*n {
                    let src = &gy.data()[rep * len..(rep + 1) * len];
                    for (d, &g) in dx.iter_mut().zip(src) {
                        *d = *d + g;
                    }
                }
                self.accum(
                    *a,
                    grads,
                    Tensor::new(self.value(*a).shape(), dx).expect("broadcast grad shape"),
                );
            }
            Op::CapsPredict(u, w) => {
                let (vu, vw) = (self.value(*u), self.value(*w));
                let (batch, ni, di) = (vu.shape()[0], vu.shape()[1], vu.shape()[2]);
                let (nj, dj) = (vw.shape()[1], vw.shape()[3]);
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); vw.numel()];
                    kernels::caps_predict_dw(batch, ni, nj, di, dj, vu.data(), gy.data(), &mut dw);
                    self.accum(*w, grads, Tensor::new(vw.shape(), dw).expect("dw shape"));
                }
                if self.needs(*u) {
                    let mut wt = vec![S::zero(); vw.numel()];
                    kernels::transpose_last2(ni * nj, di, dj, vw.data(), &mut wt);
                    let mut du = vec![S::zero(); vu.numel()];
                    kernels::caps_predict_du(batch, ni, nj, di, dj, &wt, gy.data(), &mut du);
                    self.accum(*u, grads, Tensor::new(vu.shape(), du).expect("du shape"));
                }
            }
            Op::RouteSum(uhat, k) => {
                let su = self.value(*uhat).shape();
                let (batch, ni, nj, dj) = (su[0], su[1], su[2], su[3]);
                let mut du = vec![S::zero(); self.value(*uhat).numel()];
                kernels::route_sum_duhat(batch, ni, nj, dj, k.data(), gy.data(), &mut du);
                self.accum(*uhat, grads, Tensor::new(su, du).expect("duhat shape"));
            }
            Op::Squash(a) => {
                let x = self.value(*a);
                let dim = *x.shape().last().expect("squash input has rank >= 1");
                let eps = S::from_f64(NORM_EPS);
                let two = S::from_f64(2.0);
                let mut dx = vec![S::zero(); x.numel()];
                for ((sv, gv), dv) in x
                    .chunks_last(dim)
                    .zip(gy.data().chunks_exact(dim))
                    .zip(dx.chunks_exact_mut(dim))
                {
                    let q = sv.iter().fold(S::zero(), |acc, &v| acc + v * v);
                    let one_q = S::one() + q;
                    let r = (q + eps).sqrt();
                    let g = q / one_q;
                    let gp = S::one() / (one_q * one_q);
                    let sdv = sv
                        .iter()
                        .zip(gv)
                        .fold(S::zero(), |acc, (&s, &dvo)| acc + s * dvo);
                    let coef = two * gp / r - g / (r * r * r);
                    let lead = g / r;
                    for ((d, &s), &dvo) in dv.iter_mut().zip(sv).zip(gv) {
                        *d = lead * dvo + coef * sdv * s;
                    }
                }
                self.accum(*a, grads, Tensor::new(x.shape(), dx).expect("squash grad shape"));
            }
            Op::NormLast(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let dim = *x.shape().last().expect("norm input has rank >= 1");
                let mut dx = vec![S::zero(); x.numel()];
                for (vec_idx, (sv, dv)) in x
                    .chunks_last(dim)
                    .zip(dx.chunks_exact_mut(dim))
                    .enumerate()
                {
                    let coef = gy.data()[vec_idx] / y.data()[vec_idx];
                    for (d, &s) in dv.iter_mut().zip(sv) {
                        *d = coef * s;
                    }
                }
                self.accum(*a, grads, Tensor::new(x.shape(), dx).expect("norm grad shape"));
            }
        }
    }

    fn accum(&self, id: VarId, grads: &mut [Option<Tensor<S>>], delta: Tensor<S>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            None => grads[id.0] = Some(delta),
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + *dv;
                }
            }
        }
    }

    /// Accumulates elementwise f(gy[i], i) into `a`.
    fn accum_elem(
        &self,
        a: VarId,
        grads: &mut [Option<Tensor<S>>],
        gy: &Tensor<S>,
        f: impl Fn(S, usize) -> S,
    ) {
        if !self.needs(a) {
            return;
        }
        let data = gy
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| f(g, i))
            .collect();
        self.accum(
            a,
            grads,
            Tensor::new(gy.shape(), data).expect("elementwise grad shape"),
        );
    }

    /// Binary-op gradient with scalar↔tensor broadcast handling. `fa`/`fb`
    /// map (gy_elem, a_elem, b_elem) to the per-element contribution; the
    /// broadcast side receives the sum over elements.
    fn accum_binary(
        &self,
        a: VarId,
        b: VarId,
        gy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        fa: impl Fn(S, S, S) -> S,
        fb: impl Fn(S, S, S) -> S,
    ) {
        self.accum_binary_with(a, b, gy, gy, grads, |g, va, vb, _| fa(g, va, vb), |g, va, vb, _| {
            fb(g, va, vb)
        })
    }

    fn accum_binary_with(
        &self,
        a: VarId,
        b: VarId,
        gy: &Tensor<S>,
        y: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        fa: impl Fn(S, S, S, S) -> S,
        fb: impl Fn(S, S, S, S) -> S,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let a_scalar = va.numel() == 1 && va.shape() != gy.shape();
        let b_scalar = vb.numel() == 1 && vb.shape() != gy.shape();
        let at = |i: usize| {
            if a_scalar {
                va.item()
            } else {
                va.data()[i]
            }
        };
        let bt = |i: usize| {
            if b_scalar {
                vb.item()
            } else {
                vb.data()[i]
            }
        };
        if self.needs(a) {
            if a_scalar {
                let total = gy
                    .data()
                    .iter()
                    .enumerate()
                    .fold(S::zero(), |acc, (i, &g)| {
                        acc + fa(g, at(i), bt(i), y.data()[i])
                    });
                self.accum(a, grads, Tensor::new(va.shape(), vec![total]).expect("scalar grad"));
            } else {
                let data = gy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| fa(g, at(i), bt(i), y.data()[i]))
                    .collect();
                self.accum(a, grads, Tensor::new(va.shape(), data).expect("binary grad shape"));
            }
        }
        if self.needs(b) {
            if b_scalar {
                let total = gy
                    .data()
                    .iter()
                    .enumerate()
                    .fold(S::zero(), |acc, (i, &g)| {
                        acc + fb(g, at(i), bt(i), y.data()[i])
                    });
                self.accum(b, grads, Tensor::new(vb.shape(), vec![total]).expect("scalar grad"));
            } else {
                let data = gy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| fb(g, at(i), bt(i), y.data()[i]))
                    .collect();
                self.accum(b, grads, Tensor::new(vb.shape(), data).expect("binary grad shape"));
            }
        }
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Max-stabilized softmax on a plain tensor, shared by the graph op and the
/// detached routing loop.
pub fn softmax_tensor<S: Scalar>(t: &Tensor<S>, axis: usize) -> Tensor<S> {
    let shape = t.shape();
    let (outer, len, inner) = axis_split(shape, axis);
    let x = t.data();
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let mut mx = x[base];
            for i in 1..len {
                mx = mx.max(x[base + i * inner]);
            }
            let mut sum = S::zero();
            for i in 0..len {
                let e = (x[base + i * inner] - mx).exp();
                out[base + i * inner] = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for i in 0..len {
                out[base + i * inner] = out[base + i * inner] * inv;
            }
        }
    }
    Tensor::new(shape, out).expect("softmax preserves shape")
}

impl<S: Scalar> Tensor<S> {
    /// Iterates the last-axis vectors of any tensor with trailing extent `dim`.
    fn chunks_last(&self, dim: usize) -> std::slice::ChunksExact<'_, S> {
        self.data().chunks_exact(dim)
    }
}
