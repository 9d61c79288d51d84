//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] records every operation in execution order; nodes are therefore
//! already topologically sorted and [`Tape::backward`] visits each node exactly
//! once in reverse. Leaves accumulate gradients; constants stop propagation, so
//! detaching a value is just inserting it as a constant.
//!
//! Conventions:
//! - `f64` everywhere.
//! - `conv2d` is cross-correlation (no kernel flip). `conv_transpose2d` is its
//!   exact adjoint: for fixed weights, `<conv2d(x,w), y> == <x, conv_transpose2d(y,w)>`.
//! - Elementwise binary ops broadcast only scalar-with-tensor or equal shapes.
//! - `relu` has derivative 0 at exactly 0; `leaky_relu` uses its slope there.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    Neg(Val),
    Square(Val),
    Exp(Val),
    Log(Val),
    Tanh(Val),
    Relu(Val),
    LeakyRelu(Val, f64),
    Scale(Val, f64),
    AddConst(Val),
    Matmul(Val, Val),
    AddRowBias(Val, Val),
    AddChanBias(Val, Val),
    Conv2d { x: Val, w: Val, stride: usize, pad: usize },
    ConvTranspose2d { x: Val, w: Val, stride: usize, pad: usize },
    Reduce { input: Val, kind: ReduceKind, axes: Vec<usize> },
    Reshape(Val),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink_abs: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), min_kink_abs: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |pre-activation| seen by any relu/leaky_relu on this tape.
    /// Infinite when no kinked op was recorded.
    pub fn nearest_kink_distance(&self) -> f64 {
        self.min_kink_abs
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Val {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Val(self.nodes.len() - 1)
    }

    /// Differentiable input: receives gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Val {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input: gradient propagation stops here.
    pub fn constant(&mut self, value: Tensor) -> Val {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Val {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any was accumulated.
    pub fn grad(&self, v: Val) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("gradient buffer mirrors value shape")
        })
    }

    /// Like [`Tape::grad`], but zeros when no gradient path reached `v`.
    pub fn grad_or_zeros(&self, v: Val) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn requires(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_shape(&self, a: Val, b: Val, opname: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::ShapeMismatch(format!("{opname}: {sa:?} vs {sb:?}")))
        }
    }

    fn ew_binary(
        &mut self,
        a: Val,
        b: Val,
        opname: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val> {
        let shape = self.binary_shape(a, b, opname)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let (sa, sb) = (da.len() == 1, db.len() == 1);
        for i in 0..n {
            let x = if sa { da[0] } else { da[i] };
            let y = if sb { db[0] } else { db[i] };
            out.push(f(x, y));
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(op, Tensor::from_vec(shape, out)?, req))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.ew_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.ew_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.ew_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.ew_binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Val, f: impl Fn(f64) -> f64, op: Op) -> Val {
        let value = self.value(a).map(f);
        let req = self.requires(a);
        self.push(op, value, req)
    }

    pub fn neg(&mut self, a: Val) -> Val {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: Val) -> Val {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Val) -> Val {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Val) -> Result<Val> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    fn note_kinks(&mut self, a: Val) {
        let m = self.value(a).data().iter().fold(f64::INFINITY, |m, &x| m.min(x.abs()));
        if m < self.min_kink_abs {
            self.min_kink_abs = m;
        }
    }

    pub fn relu(&mut self, a: Val) -> Val {
        self.note_kinks(a);
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Val {
        self.note_kinks(a);
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Val, c: f64) -> Val {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_vec(vec![m, n], out)?, req))
    }

    /// `x[m,n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Val, bias: Val) -> Result<Val> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(bias).shape().to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch(format!("add_row_bias: {sx:?} + {sb:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let (dx, db) = (self.value(x).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(dx[i * n + j] + db[j]);
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddRowBias(x, bias), Tensor::from_vec(sx, out)?, req))
    }

    /// `x[b,c,h,w] + bias[c]`, broadcast over batch and spatial axes.
    pub fn add_chan_bias(&mut self, x: Val, bias: Val) -> Result<Val> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(bias).shape().to_vec());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch(format!("add_chan_bias: {sx:?} + {sb:?}")));
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (dx, db) = (self.value(x).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(bsz * c * h * w);
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let bv = db[ci];
                for p in 0..h * w {
                    out.push(dx[base + p] + bv);
                }
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddChanBias(x, bias), Tensor::from_vec(sx, out)?, req))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Val, w: Val, stride: usize, pad: usize) -> Result<Val> {
        let geo = ConvGeometry::forward(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = conv2d_fwd(self.value(x), self.value(w), &geo);
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, out, req))
    }

    pub fn conv_transpose2d(&mut self, x: Val, w: Val, stride: usize, pad: usize) -> Result<Val> {
        let geo =
            ConvGeometry::transpose(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = convt2d_fwd(self.value(x), self.value(w), &geo);
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(Op::ConvTranspose2d { x, w, stride, pad }, out, req))
    }

    // ── Reductions and shape ────────────────────────────────────────────

    pub fn reduce(&mut self, kind: ReduceKind, a: Val, axes: &[usize]) -> Result<Val> {
        let shape = self.value(a).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Domain(format!(
                    "reduce axis {ax} out of range for shape {shape:?}"
                )));
            }
            if seen[ax] {
                return Err(Error::Domain(format!("duplicate reduce axis {ax}")));
            }
            seen[ax] = true;
        }
        if axes.is_empty() {
            // Reduction over no axes is the identity.
            return Ok(a);
        }
        let out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &e)| e).collect();
        let count: usize = shape.iter().enumerate().filter(|(i, _)| seen[*i]).map(|(_, &e)| e).product();
        let mut out = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        let in_strides = strides_of(&shape);
        let out_strides = strides_of(&out_shape);
        let data = self.value(a).data();
        for (flat, &v) in data.iter().enumerate() {
            out[map_reduced_index(flat, &shape, &in_strides, &seen, &out_strides)] += v;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::Reduce { input: a, kind, axes: axes.to_vec() },
            Tensor::from_vec(out_shape, out)?,
            req,
        ))
    }

    pub fn reduce_sum(&mut self, a: Val, axes: &[usize]) -> Result<Val> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn reduce_mean(&mut self, a: Val, axes: &[usize]) -> Result<Val> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Val) -> Result<Val> {
        let axes: Vec<usize> = (0..self.value(a).shape().len()).collect();
        if axes.is_empty() {
            return Ok(a); // already scalar
        }
        self.reduce(ReduceKind::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Val) -> Result<Val> {
        let axes: Vec<usize> = (0..self.value(a).shape().len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(ReduceKind::Mean, a, &axes)
    }

    pub fn reshape(&mut self, a: Val, shape: &[usize]) -> Result<Val> {
        let value = self.value(a).reshaped(shape)?;
        let req = self.requires(a);
        Ok(self.push(Op::Reshape(a), value, req))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Val, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Per-element upstream contribution for a binary operand, collapsed to a
    /// one-element buffer when the operand was scalar-broadcast. `None` when
    /// the operand does not require gradient.
    fn binary_contrib(&self, v: Val, n_out: usize, per_elem: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
        if !self.requires(v) {
            return None;
        }
        let n_operand = self.nodes[v.0].value.numel();
        if n_operand == n_out {
            Some((0..n_out).map(&per_elem).collect())
        } else {
            debug_assert_eq!(n_operand, 1);
            Some(vec![(0..n_out).map(&per_elem).sum()])
        }
    }

    fn broadcast_get(&self, v: Val, i: usize) -> f64 {
        let d = self.nodes[v.0].value.data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    /// Reverse pass from a scalar root. Clears previous gradients first, so
    /// each call computes gradients of exactly this root.
    pub fn backward(&mut self, root: Val) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Domain(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(()); // constant function of constants: nothing to do
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let gy = self.nodes[idx].grad.take().expect("checked above");
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let (ca, cb) = (
                        self.binary_contrib(a, gy.len(), |i| gy[i]),
                        self.binary_contrib(b, gy.len(), |i| gy[i]),
                    );
                    if let Some(c) = ca {
                        self.accumulate(a, &c);
                    }
                    if let Some(c) = cb {
                        self.accumulate(b, &c);
                    }
                }
                Op::Sub(a, b) => {
                    let (ca, cb) = (
                        self.binary_contrib(a, gy.len(), |i| gy[i]),
                        self.binary_contrib(b, gy.len(), |i| -gy[i]),
                    );
                    if let Some(c) = ca {
                        self.accumulate(a, &c);
                    }
                    if let Some(c) = cb {
                        self.accumulate(b, &c);
                    }
                }
                Op::Mul(a, b) => {
                    let (ca, cb) = (
                        self.binary_contrib(a, gy.len(), |i| gy[i] * self.broadcast_get(b, i)),
                        self.binary_contrib(b, gy.len(), |i| gy[i] * self.broadcast_get(a, i)),
                    );
                    if let Some(c) = ca {
                        self.accumulate(a, &c);
                    }
                    if let Some(c) = cb {
                        self.accumulate(b, &c);
                    }
                }
                Op::Div(a, b) => {
                    let (ca, cb) = (
                        self.binary_contrib(a, gy.len(), |i| gy[i] / self.broadcast_get(b, i)),
                        self.binary_contrib(b, gy.len(), |i| {
                            let bv = self.broadcast_get(b, i);
                            -gy[i] * self.broadcast_get(a, i) / (bv * bv)
                        }),
                    );
                    if let Some(c) = ca {
                        self.accumulate(a, &c);
                    }
                    if let Some(c) = cb {
                        self.accumulate(b, &c);
                    }
                }
                Op::Neg(a) => {
                    let contrib: Vec<f64> = gy.iter().map(|g| -g).collect();
                    self.accumulate(a, &contrib);
                }
                Op::Square(a) => {
                    let xa = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> =
                        gy.iter().zip(xa).map(|(g, x)| 2.0 * x * g).collect();
                    self.accumulate(a, &contrib);
                }
                Op::Exp(a) => {
                    let y = self.nodes[idx].value.data();
                    let contrib: Vec<f64> = gy.iter().zip(y).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &contrib);
                }
                Op::Log(a) => {
                    let xa = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = gy.iter().zip(xa).map(|(g, x)| g / x).collect();
                    self.accumulate(a, &contrib);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.data();
                    let contrib: Vec<f64> =
                        gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.accumulate(a, &contrib);
                }
                Op::Relu(a) => {
                    let xa = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = gy
                        .iter()
                        .zip(xa)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &contrib);
                }
                Op::LeakyRelu(a, slope) => {
                    let xa = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = gy
                        .iter()
                        .zip(xa)
                        .map(|(g, x)| if *x > 0.0 { *g } else { slope * g })
                        .collect();
                    self.accumulate(a, &contrib);
                }
                Op::Scale(a, c) => {
                    let contrib: Vec<f64> = gy.iter().map(|g| c * g).collect();
                    self.accumulate(a, &contrib);
                }
                Op::AddConst(a) => {
                    self.accumulate(a, &gy);
                }
                Op::Matmul(a, b) => {
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.requires(a) {
                        // da = gy . b^T
                        let db = self.nodes[b.0].value.data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = gy[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] += g * db[p * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        // db = a^T . gy
                        let da = self.nodes[a.0].value.data();
                        let mut dbv = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = da[i * k + p];
                                for j in 0..n {
                                    dbv[p * n + j] += av * gy[i * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &dbv);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    self.accumulate(x, &gy);
                    if self.requires(bias) {
                        let sx = self.nodes[x.0].value.shape();
                        let (m, n) = (sx[0], sx[1]);
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += gy[i * n + j];
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::AddChanBias(x, bias) => {
                    self.accumulate(x, &gy);
                    if self.requires(bias) {
                        let sx = self.nodes[x.0].value.shape();
                        let (bsz, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                        let mut db = vec![0.0; c];
                        for bi in 0..bsz {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                db[ci] += gy[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let geo = ConvGeometry::forward(
                        self.nodes[x.0].value.shape(),
                        self.nodes[w.0].value.shape(),
                        stride,
                        pad,
                    )
                    .expect("geometry validated at forward");
                    if self.requires(x) {
                        let gx = conv2d_bwd_input(&gy, &self.nodes[w.0].value, &geo);
                        self.accumulate(x, &gx);
                    }
                    if self.requires(w) {
                        let gw = conv2d_bwd_weight(&self.nodes[x.0].value, &gy, &geo);
                        self.accumulate(w, &gw);
                    }
                }
                Op::ConvTranspose2d { x, w, stride, pad } => {
                    let geo = ConvGeometry::transpose(
                        self.nodes[x.0].value.shape(),
                        self.nodes[w.0].value.shape(),
                        stride,
                        pad,
                    )
                    .expect("geometry validated at forward");
                    if self.requires(x) {
                        let gx = convt2d_bwd_input(&gy, &self.nodes[w.0].value, &geo);
                        self.accumulate(x, &gx);
                    }
                    if self.requires(w) {
                        let gw = convt2d_bwd_weight(&self.nodes[x.0].value, &gy, &geo);
                        self.accumulate(w, &gw);
                    }
                }
                Op::Reduce { input, kind, axes } => {
                    let in_shape = self.nodes[input.0].value.shape().to_vec();
                    let mut seen = vec![false; in_shape.len()];
                    for &ax in &axes {
                        seen[ax] = true;
                    }
                    let out_shape: Vec<usize> = in_shape
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !seen[*i])
                        .map(|(_, &e)| e)
                        .collect();
                    let count: usize = in_shape
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| seen[*i])
                        .map(|(_, &e)| e)
                        .product();
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / count as f64,
                    };
                    let in_strides = strides_of(&in_shape);
                    let out_strides = strides_of(&out_shape);
                    let n: usize = in_shape.iter().product();
                    let mut contrib = vec![0.0; n];
                    for (flat, c) in contrib.iter_mut().enumerate() {
                        *c = gy[map_reduced_index(flat, &in_shape, &in_strides, &seen, &out_strides)]
                            * scale;
                    }
                    self.accumulate(input, &contrib);
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &gy);
                }
            }
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat input index -> flat output index with `reduced` axes dropped.
fn map_reduced_index(
    flat: usize,
    in_shape: &[usize],
    in_strides: &[usize],
    reduced: &[bool],
    out_strides: &[usize],
) -> usize {
    let mut out = 0;
    let mut oax = 0;
    for (ax, (&extent, &stride)) in in_shape.iter().zip(in_strides).enumerate() {
        let coord = (flat / stride) % extent;
        if !reduced[ax] {
            out += coord * out_strides[oax];
            oax += 1;
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── Convolution kernels ────────────────────────────────────────────────

/// Validated sizes for one conv2d/conv_transpose2d instance.
///
/// For conv2d, `(ih, iw)` is the input image and `(oh, ow)` the output; for
/// conv_transpose2d the roles are swapped so that the transpose is exactly the
/// adjoint of the conv2d with the same weights and geometry.
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn forward(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Geometry(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::Geometry(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d: stride must be positive".into()));
        }
        let k = ws[2];
        let out_extent = |e: usize| -> Result<usize> {
            let span = (e + 2 * pad) as i64 - k as i64;
            if span < 0 || span as usize % stride != 0 {
                return Err(Error::Geometry(format!(
                    "conv2d: extent {e} with k={k} stride={stride} pad={pad} has non-integral output"
                )));
            }
            Ok(span as usize / stride + 1)
        };
        Ok(ConvGeometry {
            batch: xs[0],
            c_in: ws[1],
            c_out: ws[0],
            k,
            stride,
            pad,
            ih: xs[2],
            iw: xs[3],
            oh: out_extent(xs[2])?,
            ow: out_extent(xs[3])?,
        })
    }

    fn transpose(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Geometry(format!("conv_transpose2d: x {xs:?}, w {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::Geometry(format!(
                "conv_transpose2d: input has {} channels, weight expects {}",
                xs[1], ws[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv_transpose2d: stride must be positive".into()));
        }
        let k = ws[2];
        let out_extent = |e: usize| -> Result<usize> {
            let o = if e == 0 { 0 } else { ((e - 1) * stride + k) as i64 - 2 * pad as i64 };
            if o < 1 {
                return Err(Error::Geometry(format!(
                    "conv_transpose2d: extent {e} with k={k} stride={stride} pad={pad} gives non-positive output"
                )));
            }
            Ok(o as usize)
        };
        // `oh/ow` name the *conv2d-side* (larger) image so the kernels below
        // can be shared between the conv backward and the transpose forward.
        Ok(ConvGeometry {
            batch: xs[0],
            c_in: ws[1],
            c_out: ws[0],
            k,
            stride,
            pad,
            ih: out_extent(xs[2])?,
            iw: out_extent(xs[3])?,
            oh: xs[2],
            ow: xs[3],
        })
    }

    /// Valid output-coordinate range `[lo, hi)` such that
    /// `o*stride + k_off - pad` stays inside `[0, in_extent)`.
    fn valid_out_range(&self, k_off: usize, out_extent: usize, in_extent: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let shift = k_off as i64 - self.pad as i64;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_inclusive = (in_extent as i64 - 1 - shift).div_euclid(s);
        let hi = (hi_inclusive + 1).clamp(0, out_extent as i64);
        (lo.clamp(0, out_extent as i64) as usize, hi as usize)
    }
}

/// y[b,co,oy,ox] = sum_{ci,ki,kj} x[b,ci,oy*s+ki-p, ox*s+kj-p] * w[co,ci,ki,kj]
fn conv2d_fwd(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut y = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    let (xd, wd) = (x.data(), w.data());
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.ih * g.iw;
                let wbase = (co * g.c_in + ci) * g.k * g.k;
                for ki in 0..g.k {
                    let (oy0, oy1) = g.valid_out_range(ki, g.oh, g.ih);
                    for kj in 0..g.k {
                        let wv = wd[wbase + ki * g.k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_out_range(kj, g.ow, g.iw);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let xrow = xbase + iy * g.iw;
                            let yrow = ybase + oy * g.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad;
                                y[yrow + ox] += xd[xrow + ix] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![g.batch, g.c_out, g.oh, g.ow], y).expect("conv output geometry")
}

/// Scatter adjoint of `conv2d_fwd`: distributes gy[b,co,oy,ox] back over the
/// (larger) input grid. Also the forward pass of conv_transpose2d.
fn conv2d_bwd_input(gy: &[f64], w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let mut gx = vec![0.0; g.batch * g.c_in * g.ih * g.iw];
    let wd = w.data();
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.ih * g.iw;
                let wbase = (co * g.c_in + ci) * g.k * g.k;
                for ki in 0..g.k {
                    let (oy0, oy1) = g.valid_out_range(ki, g.oh, g.ih);
                    for kj in 0..g.k {
                        let wv = wd[wbase + ki * g.k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_out_range(kj, g.ow, g.iw);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let xrow = xbase + iy * g.iw;
                            let yrow = ybase + oy * g.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad;
                                gx[xrow + ix] += gy[yrow + ox] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// gw[co,ci,ki,kj] = sum_{b,oy,ox} gy[b,co,oy,ox] * x[b,ci,oy*s+ki-p, ox*s+kj-p]
fn conv2d_bwd_weight(x: &Tensor, gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut gw = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    let xd = x.data();
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.ih * g.iw;
                let wbase = (co * g.c_in + ci) * g.k * g.k;
                for ki in 0..g.k {
                    let (oy0, oy1) = g.valid_out_range(ki, g.oh, g.ih);
                    for kj in 0..g.k {
                        let (ox0, ox1) = g.valid_out_range(kj, g.ow, g.iw);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let xrow = xbase + iy * g.iw;
                            let yrow = ybase + oy * g.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad;
                                acc += gy[yrow + ox] * xd[xrow + ix];
                            }
                        }
                        gw[wbase + ki * g.k + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

fn convt2d_fwd(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    // Transpose forward is the conv backward-input scatter with x in the
    // small-grid role.
    let gx = conv2d_bwd_input(x.data(), w, g);
    Tensor::from_vec(vec![g.batch, g.c_in, g.ih, g.iw], gx).expect("convT output geometry")
}

fn convt2d_bwd_input(gy: &[f64], w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    // Gradient w.r.t. the transpose's (small-grid) input is a plain conv of gy.
    let gy_t = Tensor::from_vec(vec![g.batch, g.c_in, g.ih, g.iw], gy.to_vec())
        .expect("convT upstream gradient shape");
    conv2d_fwd(&gy_t, w, g).data().to_vec()
}

/// gw[co,ci,ki,kj] = sum_{b,oy,ox} x[b,co,oy,ox] * gy[b,ci,oy*s+ki-p, ox*s+kj-p]
fn convt2d_bwd_weight(x: &Tensor, gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut gw = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    let xd = x.data();
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ybase = (b * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let xbase = (b * g.c_in + ci) * g.ih * g.iw;
                let wbase = (co * g.c_in + ci) * g.k * g.k;
                for ki in 0..g.k {
                    let (oy0, oy1) = g.valid_out_range(ki, g.oh, g.ih);
                    for kj in 0..g.k {
                        let (ox0, ox1) = g.valid_out_range(kj, g.ow, g.iw);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let grow = xbase + iy * g.iw;
                            let xrow = ybase + oy * g.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad;
                                acc += xd[xrow + ox] * gy[grow + ix];
                            }
                        }
                        gw[wbase + ki * g.k + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

// ── Gradient checking ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked elements of |tape - fd| / max(|tape|, |fd|, 1).
    pub max_rel_err: f64,
    /// True when any evaluation saw a relu/leaky_relu pre-activation within
    /// 1e-6 of the kink: the comparison is unreliable there.
    pub kink_flagged: bool,
    pub elements_checked: usize,
    pub pass: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare tape gradients of a scalar-valued function against central finite
/// differences at the given inputs.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Val]) -> Result<Val>,
{
    if step <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vals: Vec<Val> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vals)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Domain(format!(
            "gradient check requires a scalar-valued function, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    let mut min_kink = tape.nearest_kink_distance();
    tape.backward(y)?;
    let analytic: Vec<Tensor> = vals.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor], min_kink: &mut f64| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Val> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        *min_kink = min_kink.min(t.nearest_kink_distance());
        Ok(t.value(y).item())
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let fd = (eval(&plus, &mut min_kink)? - eval(&minus, &mut min_kink)?) / (2.0 * step);
            max_rel = max_rel.max(rel_err(analytic[i].data()[j], fd));
            checked += 1;
        }
    }
    let kink_flagged = min_kink < 1e-6;
    Ok(GradCheckReport { max_rel_err: max_rel, kink_flagged, elements_checked: checked, pass: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let b = tape.leaf(t1(&[-1.0]));
        let l = tape.leaky_relu(b, 0.2);
        assert_eq!(tape.value(l).data(), &[-0.2]);
    }

    #[test]
    fn product_rule_at_three() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(a, a).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod).data(), tape.value(a).data());

        let r = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn log_of_non_positive_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0, 0.0]));
        assert!(tape.log(a).is_err());
    }

    #[test]
    fn conv_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.1 - 1.0).collect();
        let x = tape.constant(Tensor::from_vec(vec![1, 1, 5, 5], data.clone()).unwrap());
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center of a 3x3 kernel
        let w = tape.constant(Tensor::from_vec(vec![1, 1, 3, 3], kernel).unwrap());
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_non_integral_output_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 7, 7]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(tape.conv2d(x, w, 2, 0).is_err());
    }

    #[test]
    fn convt_stride_two_block_fill() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv_transpose2d(x, w, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let m = tape.reduce_mean(a, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);

        // Reduction over an empty axis list is the identity.
        let same = tape.reduce_sum(a, &[]).unwrap();
        assert_eq!(same, a);

        tape.backward(m).unwrap();
        let g = tape.grad(a).unwrap();
        for v in g.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_bad_axis_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0, 2.0]));
        assert!(tape.reduce_sum(a, &[1]).is_err());
        assert!(tape.reduce_sum(a, &[0, 0]).is_err());
    }

    #[test]
    fn gradient_accumulates_over_multiple_consumers() {
        // y = a*a + a => dy/da = 2a + 1
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(5.0));
        let sq = tape.mul(a, a).unwrap();
        let y = tape.add(sq, a).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 11.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 3.0);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn scalar_broadcast_backward_sums() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(2.0));
        let v = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let prod = tape.mul(s, v).unwrap();
        let y = tape.sum_all(prod).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(s).unwrap().item(), 6.0); // sum of v
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn check_gradients_simple_quadratic() {
        let report = check_gradients(
            |tape, vals| {
                let sq = tape.square(vals[0]);
                tape.sum_all(sq)
            },
            &[t1(&[1.0, 2.0])],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(!report.kink_flagged);
    }

    #[test]
    fn check_gradients_flags_relu_kink_at_zero() {
        let report = check_gradients(
            |tape, vals| {
                let r = tape.relu(vals[0]);
                tape.sum_all(r)
            },
            &[t1(&[0.0, 1.0])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.kink_flagged);
    }

    #[test]
    fn check_gradients_rejects_non_scalar() {
        let err = check_gradients(|_, vals| Ok(vals[0]), &[t1(&[1.0, 2.0])], 1e-5, 1e-6);
        assert!(err.is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }
}
