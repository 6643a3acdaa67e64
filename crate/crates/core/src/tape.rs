//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends one node holding the forward value and enough state to
//! replay its vector-Jacobian product. `backward` walks nodes in exact
//! reverse append order, accumulating gradients additively across fan-out;
//! calling it twice without `zero_grad` doubles leaf gradients.
//!
//! A tape is single-writer. Independent tapes may run concurrently.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{broadcast_shapes, contiguous_strides, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

pub const GELU_TANH_COEFF: f64 = 0.044715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Gelu,
    Silu,
    Tanh,
    Exp,
    Abs,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise with numpy broadcasting; `sub` negates b's gradient.
    Binary { kind: BinaryKind, a: ValueId, b: ValueId },
    /// mul * x + add, scalars.
    Affine { x: ValueId, mul: f64 },
    Unary { kind: UnaryKind, x: ValueId },
    Clamp { x: ValueId, lo: f64, hi: f64 },
    Matmul { a: ValueId, b: ValueId },
    Softmax { x: ValueId, axis: usize },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, eps: f64 },
    Conv1d { x: ValueId, w: ValueId, stride: usize, padding: usize },
    UpsampleNearest { x: ValueId, factor: usize },
    SumAll { x: ValueId },
    MeanAll { x: ValueId },
    Reshape { x: ValueId },
    Permute { x: ValueId, axes: Vec<usize> },
    Narrow { x: ValueId, axis: usize, start: usize },
    Concat { parts: Vec<ValueId>, axis: usize },
    /// Mask entries are 0 or 1/(1-p); forward and backward multiply by it.
    Dropout { x: ValueId, mask: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Append-only; topological order is append order.
pub struct GradTape {
    nodes: Vec<Node>,
    flops: u64,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations recorded by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        let requires_grad = t.requires_grad;
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> ValueId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any flowed into it.
    pub fn grad(&self, id: ValueId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn rg(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(va.shape(), vb.shape()).ok_or_else(|| {
            CoreError::ShapeMismatch {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
        })?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let out = broadcast_zip(va, vb, &out_shape, f);
        self.flops += out.numel() as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    /// mul * x + add, with scalar coefficients.
    pub fn affine(&mut self, x: ValueId, mul: f64, add: f64) -> ValueId {
        let v = self.nodes[x.0].value.map(|t| mul * t + add);
        self.flops += 2 * v.numel() as u64;
        let rg = self.rg(x);
        self.push(v, Op::Affine { x, mul }, rg)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn square(&mut self, x: ValueId) -> ValueId {
        self.unary(UnaryKind::Square, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: ValueId) -> ValueId {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Gelu => gelu_scalar,
            UnaryKind::Silu => |t| t * sigmoid(t),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Abs => f64::abs,
            UnaryKind::Square => |t| t * t,
        };
        let v = self.nodes[x.0].value.map(f);
        self.flops += 4 * v.numel() as u64;
        let rg = self.rg(x);
        self.push(v, Op::Unary { kind, x }, rg)
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> ValueId {
        let v = self.nodes[x.0].value.map(|t| t.clamp(lo, hi));
        self.flops += v.numel() as u64;
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    /// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p).
    pub fn dropout<R: Rng>(&mut self, x: ValueId, p: f64, rng: &mut R) -> ValueId {
        debug_assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return self.affine(x, 1.0, 0.0);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = &self.nodes[x.0].value;
        let data: Vec<f64> = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.flops += v.numel() as u64;
        let rg = self.rg(x);
        self.push(v, Op::Dropout { x, mask }, rg)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`,
    /// broadcasting leading batch dims.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (out_shape, m, k, n, batch) =
            matmul_out_shape(va.shape(), vb.shape()).ok_or_else(|| CoreError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
        let out = matmul_forward(va, vb, &out_shape, m, k, n);
        self.flops += 2 * (batch * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(CoreError::InvalidShape {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, vx.shape()),
            });
        }
        let out = softmax_forward(vx, axis);
        self.flops += 5 * out.numel() as u64;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let vx = &self.nodes[x.0].value;
        let dim = *vx.shape().last().ok_or_else(|| CoreError::InvalidShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let v = &self.nodes[id.0].value;
            if v.shape() != [dim] {
                return Err(CoreError::InvalidShape {
                    op: "layer_norm",
                    msg: format!("{} shape {:?} does not match feature dim {}", name, v.shape(), dim),
                });
            }
        }
        debug_assert!(eps > 0.0);
        let out = layer_norm_forward(
            vx,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
            eps,
        );
        self.flops += 8 * out.numel() as u64;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// 1D convolution with zero padding: x `[C_in, L]`, w `[C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let dims = conv1d_dims(vx.shape(), vw.shape(), stride, padding)?;
        let out = conv1d_forward(vx, vw, stride, padding, dims);
        let (c_out, c_in, ksz, l_out) = dims;
        self.flops += 2 * (c_out * c_in * ksz * l_out) as u64;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv1d { x, w, stride, padding }, rg))
    }

    /// Repeat each time step `factor` times: `[C, L] -> [C, L*factor]`.
    pub fn upsample_nearest(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 {
            return Err(CoreError::InvalidShape {
                op: "upsample_nearest",
                msg: format!("expected [C, L], got {:?}", vx.shape()),
            });
        }
        let (c, l) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vec![0.0; c * l * factor];
        for ch in 0..c {
            for i in 0..l {
                let v = vx.data()[ch * l + i];
                let base = ch * l * factor + i * factor;
                data[base..base + factor].fill(v);
            }
        }
        let out = Tensor::new(vec![c, l * factor], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::UpsampleNearest { x, factor }, rg))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.flops += self.nodes[x.0].value.numel() as u64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.flops += v.numel() as u64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, rg)
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let v = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let vx = &self.nodes[x.0].value;
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(CoreError::InvalidShape {
                op: "permute",
                msg: format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            });
        }
        let out = permute_forward(vx, axes);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let rank = self.nodes[x.0].value.rank();
        if rank < 2 {
            return Err(CoreError::InvalidShape {
                op: "transpose",
                msg: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn narrow(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() || start + len > vx.shape()[axis] {
            return Err(CoreError::InvalidShape {
                op: "narrow",
                msg: format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start,
                    start + len,
                    axis,
                    vx.shape()
                ),
            });
        }
        let out = narrow_forward(vx, axis, start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, axis: usize, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidShape { op: "concat", msg: "no inputs".into() });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(CoreError::InvalidShape {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let out = concat_forward(&tensors, axis, &out_shape);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Propagate d(loss)/d(node) to every node that requires grad.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut flowing: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        flowing[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = flowing[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Retain on the node itself (additive across backward calls).
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
                slot => *slot = Some(gout.clone()),
            }
            self.propagate(i, &gout, &mut flowing);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], flowing: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out_shape = node.value.shape();
                if self.rg(*a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            reduce_to_shape(gout, out_shape, va.shape())
                        }
                        BinaryKind::Mul => {
                            let prod = broadcast_zip_raw(gout, out_shape, vb, |g, y| g * y);
                            reduce_to_shape(&prod, out_shape, va.shape())
                        }
                    };
                    accumulate(flowing, a.0, ga);
                }
                if self.rg(*b) {
                    let gb = match kind {
                        BinaryKind::Add => reduce_to_shape(gout, out_shape, vb.shape()),
                        BinaryKind::Sub => {
                            let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                            reduce_to_shape(&neg, out_shape, vb.shape())
                        }
                        BinaryKind::Mul => {
                            let prod = broadcast_zip_raw(gout, out_shape, va, |g, x| g * x);
                            reduce_to_shape(&prod, out_shape, vb.shape())
                        }
                    };
                    accumulate(flowing, b.0, gb);
                }
            }
            Op::Affine { x, mul } => {
                if self.rg(*x) {
                    accumulate(flowing, x.0, gout.iter().map(|g| g * mul).collect());
                }
            }
            Op::Unary { kind, x } => {
                if self.rg(*x) {
                    let vx = self.nodes[x.0].value.data();
                    let vy = node.value.data();
                    let gx = match kind {
                        UnaryKind::Gelu => vx
                            .iter()
                            .zip(gout)
                            .map(|(&t, &g)| g * gelu_grad_scalar(t))
                            .collect(),
                        UnaryKind::Silu => vx
                            .iter()
                            .zip(gout)
                            .map(|(&t, &g)| {
                                let s = sigmoid(t);
                                g * (s * (1.0 + t * (1.0 - s)))
                            })
                            .collect(),
                        UnaryKind::Tanh => vy
                            .iter()
                            .zip(gout)
                            .map(|(&y, &g)| g * (1.0 - y * y))
                            .collect(),
                        UnaryKind::Exp => vy.iter().zip(gout).map(|(&y, &g)| g * y).collect(),
                        UnaryKind::Abs => vx
                            .iter()
                            .zip(gout)
                            .map(|(&t, &g)| g * if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 })
                            .collect(),
                        UnaryKind::Square => {
                            vx.iter().zip(gout).map(|(&t, &g)| g * 2.0 * t).collect()
                        }
                    };
                    accumulate(flowing, x.0, gx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let vx = self.nodes[x.0].value.data();
                    let gx = vx
                        .iter()
                        .zip(gout)
                        .map(|(&t, &g)| if t >= *lo && t <= *hi { g } else { 0.0 })
                        .collect();
                    accumulate(flowing, x.0, gx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    accumulate(
                        flowing,
                        x.0,
                        gout.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    );
                }
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ga, gb) =
                    matmul_backward(gout, node.value.shape(), va, vb, self.rg(*a), self.rg(*b));
                if let Some(g) = ga {
                    accumulate(flowing, a.0, g);
                }
                if let Some(g) = gb {
                    accumulate(flowing, b.0, g);
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    accumulate(flowing, x.0, softmax_backward(&node.value, gout, *axis));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (gx, gg, gb) = layer_norm_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[gain.0].value,
                    gout,
                    *eps,
                    self.rg(*x),
                    self.rg(*gain),
                    self.rg(*bias),
                );
                if let Some(g) = gx {
                    accumulate(flowing, x.0, g);
                }
                if let Some(g) = gg {
                    accumulate(flowing, gain.0, g);
                }
                if let Some(g) = gb {
                    accumulate(flowing, bias.0, g);
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let (gx, gw) = conv1d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    gout,
                    *stride,
                    *padding,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(g) = gx {
                    accumulate(flowing, x.0, g);
                }
                if let Some(g) = gw {
                    accumulate(flowing, w.0, g);
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.rg(*x) {
                    let vx = &self.nodes[x.0].value;
                    let (c, l) = (vx.shape()[0], vx.shape()[1]);
                    let mut gx = vec![0.0; c * l];
                    for ch in 0..c {
                        for i in 0..l {
                            let base = ch * l * factor + i * factor;
                            gx[ch * l + i] = gout[base..base + factor].iter().sum();
                        }
                    }
                    accumulate(flowing, x.0, gx);
                }
            }
            Op::SumAll { x } => {
                if self.rg(*x) {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(flowing, x.0, vec![gout[0]; n]);
                }
            }
            Op::MeanAll { x } => {
                if self.rg(*x) {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(flowing, x.0, vec![gout[0] / n as f64; n]);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    accumulate(flowing, x.0, gout.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if self.rg(*x) {
                    let inverse = invert_permutation(axes);
                    let gt = Tensor::new(node.value.shape().to_vec(), gout.to_vec())
                        .expect("grad matches output");
                    accumulate(flowing, x.0, permute_forward(&gt, &inverse).into_data());
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.rg(*x) {
                    let vx = &self.nodes[x.0].value;
                    let gx = narrow_backward(gout, node.value.shape(), vx.shape(), *axis, *start);
                    accumulate(flowing, x.0, gx);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape().to_vec();
                let mut start = 0;
                for &p in parts {
                    let pshape = self.nodes[p.0].value.shape().to_vec();
                    if self.rg(p) {
                        let gt = Tensor::new(out_shape.clone(), gout.to_vec())
                            .expect("grad matches output");
                        let slice = narrow_forward(&gt, *axis, start, pshape[*axis]);
                        accumulate(flowing, p.0, slice.into_data());
                    }
                    start += pshape[*axis];
                }
            }
        }
    }
}

fn accumulate(flowing: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut flowing[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot => *slot = Some(g),
    }
}

// ── Scalar helpers ──────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_TANH_COEFF * x.powi(3))).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_TANH_COEFF * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_TANH_COEFF * x * x)
}

// ── Broadcast kernels ───────────────────────────────────────────────

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("same shape");
    }
    let sa = effective_strides(a.shape(), out_shape);
    let sb = effective_strides(b.shape(), out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for slot in data.iter_mut() {
        *slot = f(a.data()[oa], b.data()[ob]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape.to_vec(), data).expect("broadcast shape")
}

/// Like `broadcast_zip` but the first operand is raw data already in `shape`.
fn broadcast_zip_raw(a: &[f64], shape: &[usize], b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if b.shape() == shape {
        return a.iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let sb = effective_strides(b.shape(), shape);
    let mut out = vec![0.0; a.len()];
    let mut idx = vec![0usize; shape.len()];
    let mut ob = 0usize;
    for (slot, &av) in out.iter_mut().zip(a) {
        *slot = f(av, b.data()[ob]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ob -= sb[ax] * shape[ax];
        }
    }
    out
}

/// Strides of `shape` viewed inside `out_shape`; broadcast axes get stride 0.
fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Sum `grad` (shaped `from`) down to `to` (broadcast-compatible).
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let st = effective_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * from[ax];
        }
    }
    out
}

// ── Matmul kernels ──────────────────────────────────────────────────

fn matmul_out_shape(
    a: &[usize],
    b: &[usize],
) -> Option<(Vec<usize>, usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return None;
    }
    let batch = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])?;
    let nbatch: usize = batch.iter().product();
    let mut out = batch;
    out.push(m);
    out.push(n);
    Some((out, m, ka, n, nbatch))
}

/// c[m,n] += a[m,k] * b[k,n]
fn matmul2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T
fn matmul2d_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let s: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * k + kk] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn matmul2d_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct BatchView {
    strides: Vec<usize>,
}

impl BatchView {
    /// Offsets for each broadcast batch index into a tensor whose own batch
    /// dims may be shorter or 1.
    fn new(shape: &[usize], batch: &[usize], mat_size: usize) -> Self {
        let own_batch = &shape[..shape.len() - 2];
        let own_strides = contiguous_strides(own_batch);
        let offset = batch.len() - own_batch.len();
        let strides = (0..batch.len())
            .map(|i| {
                if i < offset || own_batch[i - offset] == 1 {
                    0
                } else {
                    own_strides[i - offset] * mat_size
                }
            })
            .collect();
        Self { strides }
    }

    fn offset(&self, batch_idx: &[usize]) -> usize {
        batch_idx.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }
}

fn for_each_batch(batch: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let nbatch: usize = batch.iter().product();
    let mut idx = vec![0usize; batch.len()];
    for flat in 0..nbatch {
        f(&idx, flat);
        for ax in (0..batch.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor, out_shape: &[usize], m: usize, k: usize, n: usize) -> Tensor {
    let batch = &out_shape[..out_shape.len() - 2];
    let va = BatchView::new(a.shape(), batch, m * k);
    let vb = BatchView::new(b.shape(), batch, k * n);
    let mut data = vec![0.0; out_shape.iter().product()];
    for_each_batch(batch, |idx, flat| {
        let oa = va.offset(idx);
        let ob = vb.offset(idx);
        matmul2d(
            &a.data()[oa..oa + m * k],
            &b.data()[ob..ob + k * n],
            m,
            k,
            n,
            &mut data[flat * m * n..(flat + 1) * m * n],
        );
    });
    Tensor::new(out_shape.to_vec(), data).expect("matmul shape")
}

fn matmul_backward(
    gout: &[f64],
    out_shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rank = out_shape.len();
    let (m, n) = (out_shape[rank - 2], out_shape[rank - 1]);
    let k = a.shape()[a.rank() - 1];
    let batch = &out_shape[..rank - 2];
    let va = BatchView::new(a.shape(), batch, m * k);
    let vb = BatchView::new(b.shape(), batch, k * n);
    // Accumulating into stride-0 offsets performs the broadcast reduction.
    let mut ga = if need_a { Some(vec![0.0; a.numel()]) } else { None };
    let mut gb = if need_b { Some(vec![0.0; b.numel()]) } else { None };
    for_each_batch(batch, |idx, flat| {
        let g = &gout[flat * m * n..(flat + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let oa = va.offset(idx);
            let ob = vb.offset(idx);
            matmul2d_nt(g, &b.data()[ob..ob + k * n], m, n, k, &mut ga[oa..oa + m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            let oa = va.offset(idx);
            let ob = vb.offset(idx);
            matmul2d_tn(&a.data()[oa..oa + m * k], g, m, k, n, &mut gb[ob..ob + k * n]);
        }
    });
    (ga, gb)
}

// ── Softmax / layer norm kernels ────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(src[at(j)]);
            }
            let mut denom = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - mx).exp();
                data[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                data[at(j)] /= denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn softmax_backward(y: &Tensor, gout: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yv = y.data();
    let mut gx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += gout[at(j)] * yv[at(j)];
            }
            for j in 0..len {
                gx[at(j)] = yv[at(j)] * (gout[at(j)] - dot);
            }
        }
    }
    gx
}

fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let dim = *x.shape().last().unwrap();
    let rows = x.numel() / dim;
    let src = x.data();
    let (g, b) = (gain.data(), bias.data());
    let mut data = vec![0.0; src.len()];
    for r in 0..rows {
        let row = &src[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let out = &mut data[r * dim..(r + 1) * dim];
        for j in 0..dim {
            out[j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    gout: &[f64],
    eps: f64,
    need_x: bool,
    need_gain: bool,
    need_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let dim = *x.shape().last().unwrap();
    let rows = x.numel() / dim;
    let src = x.data();
    let g = gain.data();
    let mut gx = if need_x { Some(vec![0.0; src.len()]) } else { None };
    let mut gg = if need_gain { Some(vec![0.0; dim]) } else { None };
    let mut gb = if need_bias { Some(vec![0.0; dim]) } else { None };
    for r in 0..rows {
        let row = &src[r * dim..(r + 1) * dim];
        let dy = &gout[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + eps).sqrt();
        if let Some(gx) = gx.as_mut() {
            // dx = inv * (gd - mean(gd) - xhat * mean(gd * xhat)) with gd = gain*dy
            let mut mean_gd = 0.0;
            let mut mean_gdx = 0.0;
            for j in 0..dim {
                let xhat = (row[j] - mean) * inv;
                let gd = g[j] * dy[j];
                mean_gd += gd;
                mean_gdx += gd * xhat;
            }
            mean_gd /= dim as f64;
            mean_gdx /= dim as f64;
            let out = &mut gx[r * dim..(r + 1) * dim];
            for j in 0..dim {
                let xhat = (row[j] - mean) * inv;
                out[j] = inv * (g[j] * dy[j] - mean_gd - xhat * mean_gdx);
            }
        }
        if let Some(gg) = gg.as_mut() {
            for j in 0..dim {
                gg[j] += dy[j] * (row[j] - mean) * inv;
            }
        }
        if let Some(gb) = gb.as_mut() {
            for j in 0..dim {
                gb[j] += dy[j];
            }
        }
    }
    (gx, gg, gb)
}

// ── Conv kernels ────────────────────────────────────────────────────

type ConvDims = (usize, usize, usize, usize);

fn conv1d_dims(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvDims> {
    if x.len() != 2 || w.len() != 3 {
        return Err(CoreError::InvalidShape {
            op: "conv1d",
            msg: format!("expected x [C_in, L] and w [C_out, C_in, K], got {:?} and {:?}", x, w),
        });
    }
    let (c_in, l) = (x[0], x[1]);
    let (c_out, w_cin, ksz) = (w[0], w[1], w[2]);
    if w_cin != c_in {
        return Err(CoreError::ShapeMismatch { op: "conv1d", lhs: x.to_vec(), rhs: w.to_vec() });
    }
    if stride == 0 {
        return Err(CoreError::InvalidShape { op: "conv1d", msg: "stride must be positive".into() });
    }
    if l + 2 * padding < ksz {
        return Err(CoreError::InvalidShape {
            op: "conv1d",
            msg: format!("kernel {} larger than padded input {}", ksz, l + 2 * padding),
        });
    }
    let l_out = (l + 2 * padding - ksz) / stride + 1;
    Ok((c_out, c_in, ksz, l_out))
}

fn conv1d_forward(x: &Tensor, w: &Tensor, stride: usize, padding: usize, dims: ConvDims) -> Tensor {
    let (c_out, c_in, ksz, l_out) = dims;
    let l = x.shape()[1];
    let xs = x.data();
    let ws = w.data();
    let mut data = vec![0.0; c_out * l_out];
    for oc in 0..c_out {
        for p in 0..l_out {
            let base = (p * stride) as isize - padding as isize;
            let mut s = 0.0;
            for ic in 0..c_in {
                let xrow = &xs[ic * l..(ic + 1) * l];
                let wrow = &ws[(oc * c_in + ic) * ksz..(oc * c_in + ic + 1) * ksz];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let pos = base + kk as isize;
                    if pos >= 0 && (pos as usize) < l {
                        s += xrow[pos as usize] * wv;
                    }
                }
            }
            data[oc * l_out + p] = s;
        }
    }
    Tensor::new(vec![c_out, l_out], data).expect("conv shape")
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: usize,
    padding: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let (c_out, _, ksz) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let l_out = (l + 2 * padding - ksz) / stride + 1;
    let xs = x.data();
    let ws = w.data();
    let mut gx = if need_x { Some(vec![0.0; x.numel()]) } else { None };
    let mut gw = if need_w { Some(vec![0.0; w.numel()]) } else { None };
    for oc in 0..c_out {
        for p in 0..l_out {
            let g = gout[oc * l_out + p];
            let base = (p * stride) as isize - padding as isize;
            for ic in 0..c_in {
                for kk in 0..ksz {
                    let pos = base + kk as isize;
                    if pos >= 0 && (pos as usize) < l {
                        let pos = pos as usize;
                        if let Some(gx) = gx.as_mut() {
                            gx[ic * l + pos] += g * ws[(oc * c_in + ic) * ksz + kk];
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[(oc * c_in + ic) * ksz + kk] += g * xs[ic * l + pos];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

// ── Shape kernels ───────────────────────────────────────────────────

fn permute_forward(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = contiguous_strides(in_shape);
    let numel = x.numel();
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; out_shape.len()];
    let mut src_off = 0usize;
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for slot in data.iter_mut() {
        *slot = x.data()[src_off];
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src_off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src_off -= perm_strides[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &x.data()[(o * full + start) * inner..(o * full + start + len) * inner];
        data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Tensor::new(out_shape, data).expect("narrow shape")
}

fn narrow_backward(
    gout: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Vec<f64> {
    let (outer, full, inner) = axis_split(in_shape, axis);
    let len = out_shape[axis];
    let mut gx = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
        dst.copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}

fn concat_forward(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    let (outer, total, inner) = axis_split(out_shape, axis);
    let mut data = vec![0.0; outer * total * inner];
    let mut start = 0;
    for t in parts {
        let len = t.shape()[axis];
        for o in 0..outer {
            let src = &t.data()[o * len * inner..(o + 1) * len * inner];
            let dst_off = (o * total + start) * inner;
            data[dst_off..dst_off + len * inner].copy_from_slice(src);
        }
        start += len;
    }
    Tensor::new(out_shape.to_vec(), data).expect("concat shape")
}
