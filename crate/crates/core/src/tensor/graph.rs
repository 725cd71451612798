use std::sync::Arc;

use super::conv::{self, ConvGeom, PadMode};
use super::{Result, Tensor, TensorError};
use crate::resample;
use crate::spectral;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        mode: PadMode,
    },
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Reshape(Var),
    Select(Var, usize),
    Concat(Vec<Var>, usize),
    BandFilter(Var, Arc<Vec<f64>>),
    Resize(Var),
    AvgPool2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Node ids are assigned in insertion order, so
/// every input precedes its consumer.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Linear input offset for every output element under broadcasting.
fn broadcast_offsets(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn last_dim_rows(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap();
    (shape.iter().product::<usize>() / n, n)
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Invalid(format!(
            "{op}: expected [..., H, W], got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v` that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64>;
        let shape: Vec<usize>;
        if ta.shape() == tb.shape() {
            shape = ta.shape().to_vec();
            data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        } else {
            shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| mismatch(name, ta.shape(), tb.shape()))?;
            let oa = broadcast_offsets(ta.shape(), &shape);
            let ob = broadcast_offsets(tb.shape(), &shape);
            data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Errors on any zero divisor.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(&z) = self.value(b).data().iter().find(|&&v| v == 0.0) {
            return Err(TensorError::Domain { op: "div", value: z });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with no guard: non-positive entries are an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", value: v });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", value: v });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `k: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad, mode)?;
        let data = conv::forward(self.value(x).data(), self.value(k).data(), &geom, mode);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor {
                shape: vec![geom.b, geom.o, geom.oh, geom.ow],
                data,
            },
            Op::Conv2d { x, k, geom, mode },
            rg,
        ))
    }

    /// Softmax along the last dimension, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (rows, n) = last_dim_rows(t.shape());
        let mut data = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a), rg))
    }

    /// `log Σ exp` along the last dimension; the result drops that dimension.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "logsumexp" });
        }
        let (rows, n) = last_dim_rows(t.shape());
        let data: Vec<f64> = (0..rows)
            .map(|r| logsumexp_raw(&t.data()[r * n..(r + 1) * n]))
            .collect();
        let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::LogSumExp(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Inner product of two equally shaped tensors, flattened.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Index along axis 0, dropping it (`[B, ...] -> [...]`).
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if index >= s[0] {
            return Err(TensorError::Invalid(format!(
                "select: index {index} out of range for {s:?}"
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = t.data()[index * inner..(index + 1) * inner].to_vec();
        let mut shape = s[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Select(a, index), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| TensorError::Invalid("concat: no inputs".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Stacks scalar nodes into a vector `[K]`.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            if self.shape(p) != [1] {
                return Err(mismatch("stack_scalars", &[1], self.shape(p)));
            }
        }
        self.concat(parts, 0)
    }

    /// Keeps the spectral bins selected by `mask` (uncentered layout, `H·W`
    /// entries of 0/1) in every trailing `[H, W]` plane. The mask must be
    /// point-symmetric so the filtered plane stays real; the map is then an
    /// orthogonal projection and its own adjoint.
    pub fn band_filter(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let t = self.value(a);
        let (planes, h, w) = plane_dims(t.shape(), "band_filter")?;
        if mask.len() != h * w {
            return Err(mismatch("band_filter", t.shape(), &[mask.len()]));
        }
        let data = spectral::filter_planes(t.data(), planes, h, w, &mask);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::BandFilter(a, mask), rg))
    }

    /// Bilinear resize of the trailing `[H, W]` planes (half-pixel centers).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        let (planes, h, w) = plane_dims(t.shape(), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid("resize_bilinear: empty target".into()));
        }
        let data = resample::bilinear_planes(t.data(), planes, h, w, out_h, out_w);
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Resize(a), rg))
    }

    /// 2×2 average pooling of the trailing planes; extents must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (planes, h, w) = plane_dims(t.shape(), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "avg_pool2: extents must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut data = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    let base = p * h * w + 2 * y * w + 2 * x;
                    data[p * oh * ow + y * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::AvgPool2(a), rg))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes that do not
    /// reach the loss read back as zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(TensorError::Invalid(format!(
                "backward: loss must be a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Accumulated gradient of the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.clone()) {
            Some(data) => Tensor { shape, data },
            None => Tensor::zeros(shape),
        }
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if self.rg(v) {
            add_into(&mut grads[v.0], contrib);
        }
    }

    fn send_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, out: &[usize], g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        if shape == out {
            add_into(&mut grads[v.0], g);
            return;
        }
        let mut red = vec![0.0; self.value(v).len()];
        for (o, gv) in broadcast_offsets(shape, out).into_iter().zip(g) {
            red[o] += gv;
        }
        add_into(&mut grads[v.0], red);
    }

    fn operand<'a>(&'a self, v: Var, out: &[usize]) -> std::borrow::Cow<'a, [f64]> {
        let t = self.value(v);
        if t.shape() == out {
            std::borrow::Cow::Borrowed(t.data())
        } else {
            let d = t.data();
            std::borrow::Cow::Owned(broadcast_offsets(t.shape(), out).into_iter().map(|i| d[i]).collect())
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_broadcast(grads, *a, out, g.to_vec());
                self.send_broadcast(grads, *b, out, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send_broadcast(grads, *a, out, g.to_vec());
                self.send_broadcast(grads, *b, out, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.operand(*a, out), self.operand(*b, out));
                if self.rg(*a) {
                    let ga = g.iter().zip(vb.iter()).map(|(g, b)| g * b).collect();
                    self.send_broadcast(grads, *a, out, ga);
                }
                if self.rg(*b) {
                    let gb = g.iter().zip(va.iter()).map(|(g, a)| g * a).collect();
                    self.send_broadcast(grads, *b, out, gb);
                }
            }
            Op::Div(a, b) => {
                let vb = self.operand(*b, out);
                if self.rg(*a) {
                    let ga = g.iter().zip(vb.iter()).map(|(g, b)| g / b).collect();
                    self.send_broadcast(grads, *a, out, ga);
                }
                if self.rg(*b) {
                    let gb = g.iter().zip(y).zip(vb.iter()).map(|((g, y), b)| -g * y / b).collect();
                    self.send_broadcast(grads, *b, out, gb);
                }
            }
            Op::Neg(a) => self.send(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) => self.send(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 });
                self.send(grads, *a, ga.collect());
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                });
                self.send(grads, *a, ga.collect());
            }
            Op::Exp(a) => self.send(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.send(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Sqrt(a) => {
                self.send(grads, *a, g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect());
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bt = transpose(self.value(*b).data(), k, n);
                    self.send(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose(self.value(*a).data(), m, k);
                    self.send(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Conv2d { x, k, geom, mode } => {
                let (gx, gk) = conv::backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    geom,
                    *mode,
                    self.rg(*x),
                    self.rg(*k),
                );
                if let Some(gx) = gx {
                    self.send(grads, *x, gx);
                }
                if let Some(gk) = gk {
                    self.send(grads, *k, gk);
                }
            }
            Op::Softmax(a) => {
                let (rows, n) = last_dim_rows(out);
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let inner: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[r * n + j] = ys[j] * (gs[j] - inner);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let (rows, n) = last_dim_rows(x.shape());
                let mut ga = x.data().to_vec();
                for r in 0..rows {
                    let row = &mut ga[r * n..(r + 1) * n];
                    softmax_in_place(row);
                    row.iter_mut().for_each(|v| *v *= g[r]);
                }
                self.send(grads, *a, ga);
            }
            Op::Sum(a) => self.send(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                if self.rg(*a) {
                    let gb = self.value(*b).data().iter().map(|v| g[0] * v).collect();
                    self.send(grads, *a, gb);
                }
                if self.rg(*b) {
                    let ga = self.value(*a).data().iter().map(|v| g[0] * v).collect();
                    self.send(grads, *b, ga);
                }
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Select(a, index) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                let inner = g.len();
                ga[index * inner..(index + 1) * inner].copy_from_slice(g);
                self.send(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out[..*axis].iter().product();
                let inner: usize = out[axis + 1..].iter().product();
                let total = out[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + start..o * total + start + chunk]);
                        }
                        self.send(grads, p, gp);
                    }
                    start += chunk;
                }
            }
            Op::BandFilter(a, mask) => {
                let (planes, h, w) = plane_dims(out, "band_filter").expect("checked at record");
                self.send(grads, *a, spectral::filter_planes(g, planes, h, w, mask));
            }
            Op::Resize(a) => {
                let (planes, h, w) = plane_dims(self.shape(*a), "resize").expect("checked");
                let (oh, ow) = (out[out.len() - 2], out[out.len() - 1]);
                let ga = resample::bilinear_planes_adjoint(g, planes, h, w, oh, ow);
                self.send(grads, *a, ga);
            }
            Op::AvgPool2(a) => {
                let (planes, h, w) = plane_dims(self.shape(*a), "avg_pool2").expect("checked");
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[p * oh * ow + yy * ow + xx];
                            let base = p * h * w + 2 * yy * w + 2 * xx;
                            ga[base] += v;
                            ga[base + 1] += v;
                            ga[base + w] += v;
                            ga[base + w + 1] += v;
                        }
                    }
                }
                self.send(grads, *a, ga);
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn logsumexp_raw(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-0.3));
        let y = g.relu(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_derivative_at_zero_matches_central_difference() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.exp(x);
        g.backward(y).unwrap();
        let h: f64 = 1e-5;
        let fd = (h.exp() - (-h).exp()) / (2.0 * h);
        assert!((g.grad(x).item() - 1.0).abs() < 1e-12);
        assert!((g.grad(x).item() - fd).abs() < 1e-9);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4]));
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn broadcast_bias_gradient_reduces() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([2, 3, 2, 2], 1.0));
        let b = g.param(t(&[1, 3, 1, 1], &[0.5, 1.0, 2.0]));
        let y = g.mul(x, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).data(), &[8.0, 8.0, 8.0]);
        assert_eq!(g.grad(x).data()[4], 1.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y), g.value(m));
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[17.0, 39.0]);
        let c = g.constant(Tensor::zeros([3, 1]));
        assert!(g.matmul(a, c).is_err());
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[0.0, 1.0]));
        let s = g.softmax(b).unwrap();
        // 1 / (1 + e)
        assert!((g.value(s).data()[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((g.value(s).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let nan = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(g.softmax(nan).is_err());
    }

    #[test]
    fn softmax_shift_invariance_and_large_inputs() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.1, -2.0, 3.0]));
        let b = g.constant(t(&[3], &[1000.1, 998.0, 1003.0]));
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((g.value(sb).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreached_param_has_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::full([3], 1.0));
        let y = g.mul(a, a).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).item(), 4.0);
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(3.0));
        let d = g.detach(a);
        let y = g.mul(a, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).item(), 3.0);
    }

    #[test]
    fn concat_and_select_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let a = g.param(Tensor::randn([1, 2, 3], 1.0, &mut rng));
        let b = g.param(Tensor::randn([1, 1, 3], 1.0, &mut rng));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 3]);
        let s = g.select(c, 0).unwrap();
        assert_eq!(g.shape(s), &[3, 3]);
        assert_eq!(&g.value(s).data()[6..], g.value(b).data());
    }
}
