//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Each evaluation builds a fresh `Tape`: operations append nodes holding
//! their output value plus the information needed for the vector–Jacobian
//! product, and `backward` replays the tape in reverse. Tapes created in
//! eval mode skip all gradient bookkeeping and act as a plain evaluator.

use crate::error::{FlowError, Result};
use crate::linalg::LuFactors;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

enum BinKind {
    Same,
    ScalarLhs,
    ScalarRhs,
}

enum Op<T: Scalar> {
    Leaf,
    Sigmoid { x: NodeId },
    LogSigmoid { x: NodeId },
    Log { x: NodeId },
    Exp { x: NodeId },
    Relu { x: NodeId },
    Abs { x: NodeId },
    Negate { x: NodeId },
    Recip { x: NodeId },
    AddScalar { x: NodeId },
    Scale { x: NodeId, c: T },
    Add { a: NodeId, b: NodeId, kind: BinKind },
    Sub { a: NodeId, b: NodeId, kind: BinKind },
    Mul { a: NodeId, b: NodeId, kind: BinKind },
    Sum { x: NodeId },
    GaussianLogPdf { x: NodeId, mean: T, std: T },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    ChannelMul { x: NodeId, s: NodeId },
    ChannelAdd { x: NodeId, b: NodeId },
    ChannelSlice { x: NodeId, start: usize, len: usize },
    ChannelConcat { a: NodeId, b: NodeId },
    Squeeze { x: NodeId },
    Unsqueeze { x: NodeId },
    Reshape { x: NodeId },
    LogAbsDet { w: NodeId, w_inv_t: Option<Tensor<T>> },
    PixelSolve { x: NodeId, w: NodeId, lu: LuFactors<T> },
    MatVec { m: NodeId, x: NodeId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward output w.r.t. node `id`; nodes off the
    /// differentiation path get zeros.
    pub fn get(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(id).to_vec()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Evaluation-only tape: records values, no gradient information.
    pub fn new_eval() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        let ng = needs_grad;
        self.push(value, Op::Leaf, ng)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid { x }, ng)
    }

    /// log(sigmoid(x)), computed stably as -softplus(-x).
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| -softplus_scalar(-v));
        let ng = self.needs(x);
        self.push(value, Op::LogSigmoid { x }, ng)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let input = &self.nodes[x].value;
        if let Some(idx) = input.data().iter().position(|v| *v <= T::zero()) {
            return Err(FlowError::Domain {
                op: "log",
                index: idx,
                reason: format!("non-positive value {}", input.data()[idx]),
            });
        }
        let value = input.map(|v| v.ln());
        let ng = self.needs(x);
        Ok(self.push(value, Op::Log { x }, ng))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.exp());
        let ng = self.needs(x);
        self.push(value, Op::Exp { x }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(value, Op::Relu { x }, ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.abs());
        let ng = self.needs(x);
        self.push(value, Op::Abs { x }, ng)
    }

    pub fn negate(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| -v);
        let ng = self.needs(x);
        self.push(value, Op::Negate { x }, ng)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| T::one() / v);
        let ng = self.needs(x);
        self.push(value, Op::Recip { x }, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.nodes[x].value.map(|v| v + c);
        let ng = self.needs(x);
        self.push(value, Op::AddScalar { x }, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * c);
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, c }, ng)
    }

    fn binary_kind(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<BinKind> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(BinKind::Same)
        } else if self.nodes[a].value.is_scalar() {
            Ok(BinKind::ScalarLhs)
        } else if self.nodes[b].value.is_scalar() {
            Ok(BinKind::ScalarRhs)
        } else {
            Err(FlowError::shape(format!(
                "{op}: operand shapes {sa:?} vs {sb:?} (need equal shapes or a scalar operand)"
            )))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl Fn(NodeId, NodeId, BinKind) -> Op<T>,
    ) -> Result<NodeId> {
        let kind = self.binary_kind(a, b, op_name)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = match kind {
            BinKind::Same => va.zip_map(vb, &f)?,
            BinKind::ScalarLhs => {
                let s = va.item();
                vb.map(|v| f(s, v))
            }
            BinKind::ScalarRhs => {
                let s = vb.item();
                va.map(|v| f(v, s))
            }
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, make(a, b, kind), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, |a, b, kind| Op::Add { a, b, kind })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b, kind| Op::Sub { a, b, kind })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b, kind| Op::Mul { a, b, kind })
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[x].value.sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum { x }, ng)
    }

    /// Σᵢ log N(xᵢ; mean, std²), as a rank-0 node.
    pub fn gaussian_logpdf(&mut self, x: NodeId, mean: T, std: T) -> Result<NodeId> {
        if std <= T::zero() {
            return Err(FlowError::Invalid(format!(
                "gaussian_logpdf: std must be positive, got {std}"
            )));
        }
        let half = T::from_f64(0.5);
        let log_2pi = T::from_f64(core::f64::consts::TAU.ln());
        let base = -half * log_2pi - std.ln();
        let mut acc = T::zero();
        for &v in self.nodes[x].value.data() {
            let u = (v - mean) / std;
            acc += base - half * u * u;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), Op::GaussianLogPdf { x, mean, std }, ng))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// 2-D cross-correlation: x[Cin,H,W] ⋆ w[Cout,Cin,k,k] + b[Cout].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(FlowError::shape(format!(
                "conv2d input: expected rank-3 (C,H,W), got {xs:?}"
            )));
        }
        if ws.len() != 4 {
            return Err(FlowError::shape(format!(
                "conv2d weight: expected rank-4 (Cout,Cin,k,k), got {ws:?}"
            )));
        }
        if ws[1] != xs[0] {
            return Err(FlowError::shape(format!(
                "conv2d channel axis: weight expects {} input channels, input has {}",
                ws[1], xs[0]
            )));
        }
        let k = ws[2];
        if ws[3] != k || !(k == 1 || k == 3) {
            return Err(FlowError::shape(format!(
                "conv2d kernel axes: expected square kernel of size 1 or 3, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if pad != 0 && pad != (k - 1) / 2 {
            return Err(FlowError::Invalid(format!(
                "conv2d: padding {pad} not in {{0, {}}} for kernel {k}",
                (k - 1) / 2
            )));
        }
        if bs != [ws[0]] {
            return Err(FlowError::shape(format!(
                "conv2d bias axis: expected [{}], got {bs:?}",
                ws[0]
            )));
        }
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(FlowError::shape(format!(
                "conv2d spatial axes: input {}x{} too small for kernel {k} with padding {pad}",
                xs[1], xs[2]
            )));
        }
        let value = conv_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            pad,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, ng))
    }

    /// Per-channel scaling of a (C,H,W) tensor by a length-C vector.
    pub fn channel_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.nodes[x].value.dims3()?;
        if self.shape(s) != [c] {
            return Err(FlowError::shape(format!(
                "channel_mul: channel axis {c} vs scale shape {:?}",
                self.shape(s)
            )));
        }
        let value = channel_apply(&self.nodes[x].value, &self.nodes[s].value, |v, sc| v * sc);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::ChannelMul { x, s }, ng))
    }

    /// Per-channel shift of a (C,H,W) tensor by a length-C vector.
    pub fn channel_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.nodes[x].value.dims3()?;
        if self.shape(b) != [c] {
            return Err(FlowError::shape(format!(
                "channel_add: channel axis {c} vs bias shape {:?}",
                self.shape(b)
            )));
        }
        let value = channel_apply(&self.nodes[x].value, &self.nodes[b].value, |v, bc| v + bc);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::ChannelAdd { x, b }, ng))
    }

    pub fn channel_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (c, h, w) = self.nodes[x].value.dims3()?;
        if start + len > c {
            return Err(FlowError::shape(format!(
                "channel_slice: channels [{start}, {}) out of range for axis of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let data = self.nodes[x].value.data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::new(vec![len, h, w], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::ChannelSlice { x, start, len }, ng))
    }

    pub fn channel_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.nodes[a].value.dims3()?;
        let (cb, hb, wb) = self.nodes[b].value.dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(FlowError::shape(format!(
                "channel_concat: spatial axes {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.nodes[a].value.data());
        data.extend_from_slice(self.nodes[b].value.data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ChannelConcat { a, b }, ng))
    }

    /// Space-to-depth: (C,H,W) → (4C,H/2,W/2), 2×2 blocks in TL,TR,BL,BR order.
    pub fn squeeze(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, h, w) = self.nodes[x].value.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(FlowError::shape(format!(
                "squeeze: spatial axes must be even, got {h}x{w}"
            )));
        }
        let value = squeeze_raw(&self.nodes[x].value);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Squeeze { x }, ng))
    }

    pub fn unsqueeze(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.nodes[x].value.dims3()?;
        if c % 4 != 0 {
            return Err(FlowError::shape(format!(
                "unsqueeze: channel axis must be divisible by 4, got {c}"
            )));
        }
        let value = unsqueeze_raw(&self.nodes[x].value);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Unsqueeze { x }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// log|det W| of a square matrix node, as a rank-0 node.
    pub fn log_abs_det(&mut self, w: NodeId) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != ws[1] {
            return Err(FlowError::shape(format!(
                "log_abs_det: expected square matrix, got {ws:?}"
            )));
        }
        let n = ws[0];
        let lu = LuFactors::factor(self.nodes[w].value.data(), n, "log_abs_det")?;
        let det = lu.det();
        if det.abs().to_f64() < 1e-12 {
            return Err(FlowError::Singular {
                context: "log_abs_det: |det| below 1e-12".to_string(),
            });
        }
        // d log|det W| / dW = W^{-T}; only needed for gradient passes.
        let w_inv_t = if self.grad_enabled && self.needs(w) {
            let inv = lu.inverse();
            let mut inv_t = vec![T::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    inv_t[i * n + j] = inv[j * n + i];
                }
            }
            Some(Tensor::new(vec![n, n], inv_t)?)
        } else {
            None
        };
        let value = Tensor::scalar(det.abs().ln());
        let ng = self.needs(w);
        Ok(self.push(value, Op::LogAbsDet { w, w_inv_t }, ng))
    }

    /// Applies W⁻¹ to every spatial position of a (C,H,W) tensor.
    pub fn pixel_solve(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.nodes[x].value.dims3()?;
        let ws = self.shape(w).to_vec();
        if ws != [c, c] {
            return Err(FlowError::shape(format!(
                "pixel_solve: weight {ws:?} vs channel axis {c}"
            )));
        }
        let lu = LuFactors::factor(self.nodes[w].value.data(), c, "pixel_solve")?;
        let plane = h * wd;
        let xv = self.nodes[x].value.data();
        let mut out = vec![T::zero(); c * plane];
        let mut col = vec![T::zero(); c];
        for p in 0..plane {
            for ch in 0..c {
                col[ch] = xv[ch * plane + p];
            }
            let sol = lu.solve(&col);
            for ch in 0..c {
                out[ch * plane + p] = sol[ch];
            }
        }
        let value = Tensor::new(vec![c, h, wd], out)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::PixelSolve { x, w, lu }, ng))
    }

    /// Matrix–vector product: m[r,c] · x[c] → [r].
    pub fn mat_vec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let ms = self.shape(m).to_vec();
        let xs = self.shape(x).to_vec();
        if ms.len() != 2 || xs.len() != 1 || ms[1] != xs[0] {
            return Err(FlowError::shape(format!(
                "mat_vec: matrix {ms:?} vs vector {xs:?}"
            )));
        }
        let (r, c) = (ms[0], ms[1]);
        let mv = self.nodes[m].value.data();
        let xv = self.nodes[x].value.data();
        let mut out = vec![T::zero(); r];
        for i in 0..r {
            let mut acc = T::zero();
            for j in 0..c {
                acc += mv[i * c + j] * xv[j];
            }
            out[i] = acc;
        }
        let value = Tensor::from_vec(out);
        let ng = self.needs(m) || self.needs(x);
        Ok(self.push(value, Op::MatVec { m, x }, ng))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar node w.r.t. everything recorded before it.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(FlowError::Invalid(
                "backward on an eval-mode tape".to_string(),
            ));
        }
        if self.nodes[output].value.numel() != 1 {
            return Err(FlowError::Invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::full(
            self.nodes[output].value.shape().to_vec(),
            T::one(),
        ));
        for id in (0..=output).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Sigmoid { x } => {
                let d = node
                    .value
                    .zip_map(g, |y, gi| gi * y * (T::one() - y))
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::LogSigmoid { x } => {
                let d = self.nodes[*x]
                    .value
                    .zip_map(g, |v, gi| gi * sigmoid_scalar(-v))
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Log { x } => {
                let d = self.nodes[*x].value.zip_map(g, |v, gi| gi / v).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Exp { x } => {
                let d = node.value.zip_map(g, |y, gi| gi * y).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Relu { x } => {
                let d = self.nodes[*x]
                    .value
                    .zip_map(g, |v, gi| if v > T::zero() { gi } else { T::zero() })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Abs { x } => {
                let d = self.nodes[*x]
                    .value
                    .zip_map(g, |v, gi| {
                        if v > T::zero() {
                            gi
                        } else if v < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Negate { x } => {
                self.accumulate(grads, *x, g.map(|v| -v));
            }
            Op::Recip { x } => {
                let d = node.value.zip_map(g, |y, gi| -gi * y * y).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Add { a, b, kind } => match kind {
                BinKind::Same => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                BinKind::ScalarLhs => {
                    self.accumulate(grads, *a, Tensor::scalar(g.sum()));
                    self.accumulate(grads, *b, g.clone());
                }
                BinKind::ScalarRhs => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, Tensor::scalar(g.sum()));
                }
            },
            Op::Sub { a, b, kind } => match kind {
                BinKind::Same => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                BinKind::ScalarLhs => {
                    self.accumulate(grads, *a, Tensor::scalar(g.sum()));
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                BinKind::ScalarRhs => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, Tensor::scalar(-g.sum()));
                }
            },
            Op::Mul { a, b, kind } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                match kind {
                    BinKind::Same => {
                        self.accumulate(grads, *a, g.zip_map(vb, |gi, y| gi * y).unwrap());
                        self.accumulate(grads, *b, g.zip_map(va, |gi, y| gi * y).unwrap());
                    }
                    BinKind::ScalarLhs => {
                        let s = va.item();
                        let ga = g
                            .data()
                            .iter()
                            .zip(vb.data().iter())
                            .fold(T::zero(), |acc, (&gi, &y)| acc + gi * y);
                        self.accumulate(grads, *a, Tensor::scalar(ga));
                        self.accumulate(grads, *b, g.map(|gi| gi * s));
                    }
                    BinKind::ScalarRhs => {
                        let s = vb.item();
                        let gb = g
                            .data()
                            .iter()
                            .zip(va.data().iter())
                            .fold(T::zero(), |acc, (&gi, &y)| acc + gi * y);
                        self.accumulate(grads, *a, g.map(|gi| gi * s));
                        self.accumulate(grads, *b, Tensor::scalar(gb));
                    }
                }
            }
            Op::Sum { x } => {
                let gi = g.item();
                self.accumulate(
                    grads,
                    *x,
                    Tensor::full(self.shape(*x).to_vec(), gi),
                );
            }
            Op::GaussianLogPdf { x, mean, std } => {
                let gi = g.item();
                let inv_var = T::one() / (*std * *std);
                let d = self.nodes[*x]
                    .value
                    .map(|v| -gi * (v - *mean) * inv_var);
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *pad,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::ChannelMul { x, s } => {
                let sv = &self.nodes[*s].value;
                self.accumulate(grads, *x, channel_apply(g, sv, |gi, sc| gi * sc));
                if self.nodes[*s].needs_grad {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = xv.dims3().unwrap();
                    let plane = h * w;
                    let mut gs = vec![T::zero(); c];
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for p in 0..plane {
                            acc += g.data()[ch * plane + p] * xv.data()[ch * plane + p];
                        }
                        gs[ch] = acc;
                    }
                    self.accumulate(grads, *s, Tensor::from_vec(gs));
                }
            }
            Op::ChannelAdd { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[*b].needs_grad {
                    let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                    let plane = h * w;
                    let mut gb = vec![T::zero(); c];
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for p in 0..plane {
                            acc += g.data()[ch * plane + p];
                        }
                        gb[ch] = acc;
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::ChannelSlice { x, start, len } => {
                let (c, h, w) = self.nodes[*x].value.dims3().unwrap();
                let plane = h * w;
                let mut d = Tensor::zeros(vec![c, h, w]);
                d.data_mut()[start * plane..(start + len) * plane].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::ChannelConcat { a, b } => {
                let (ca, h, w) = self.nodes[*a].value.dims3().unwrap();
                let plane = h * w;
                let split = ca * plane;
                let ga = Tensor::new(self.shape(*a).to_vec(), g.data()[..split].to_vec()).unwrap();
                let gb = Tensor::new(self.shape(*b).to_vec(), g.data()[split..].to_vec()).unwrap();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Squeeze { x } => {
                self.accumulate(grads, *x, unsqueeze_raw(g));
            }
            Op::Unsqueeze { x } => {
                self.accumulate(grads, *x, squeeze_raw(g));
            }
            Op::Reshape { x } => {
                self.accumulate(
                    grads,
                    *x,
                    g.reshaped(self.shape(*x).to_vec()).unwrap(),
                );
            }
            Op::LogAbsDet { w, w_inv_t } => {
                let gi = g.item();
                let d = w_inv_t
                    .as_ref()
                    .expect("LogAbsDet without saved inverse on a grad tape")
                    .map(|v| v * gi);
                self.accumulate(grads, *w, d);
            }
            Op::PixelSolve { x, w, lu } => {
                let (c, h, wd) = node.value.dims3().unwrap();
                let plane = h * wd;
                let mut col = vec![T::zero(); c];
                let mut gx = Tensor::zeros(vec![c, h, wd]);
                let want_w = self.nodes[*w].needs_grad;
                let mut gw = if want_w {
                    Some(vec![T::zero(); c * c])
                } else {
                    None
                };
                for p in 0..plane {
                    for ch in 0..c {
                        col[ch] = g.data()[ch * plane + p];
                    }
                    // ∂/∂x: W⁻ᵀ·g per pixel.
                    let u = lu.solve_transposed(&col);
                    for ch in 0..c {
                        gx.data_mut()[ch * plane + p] = u[ch];
                    }
                    // ∂/∂W: −(W⁻ᵀ g) ⊗ out per pixel.
                    if let Some(gw) = gw.as_mut() {
                        for i in 0..c {
                            let ui = u[i];
                            for j in 0..c {
                                gw[i * c + j] =
                                    gw[i * c + j] - ui * node.value.data()[j * plane + p];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::new(vec![c, c], gw).unwrap());
                }
            }
            Op::MatVec { m, x } => {
                let ms = self.shape(*m).to_vec();
                let (r, c) = (ms[0], ms[1]);
                let mv = self.nodes[*m].value.data();
                let xv = self.nodes[*x].value.data();
                if self.nodes[*x].needs_grad {
                    let mut gx = vec![T::zero(); c];
                    for i in 0..r {
                        let gi = g.data()[i];
                        for j in 0..c {
                            gx[j] += mv[i * c + j] * gi;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(gx));
                }
                if self.nodes[*m].needs_grad {
                    let mut gm = vec![T::zero(); r * c];
                    for i in 0..r {
                        let gi = g.data()[i];
                        for j in 0..c {
                            gm[i * c + j] = gi * xv[j];
                        }
                    }
                    self.accumulate(grads, *m, Tensor::new(vec![r, c], gm).unwrap());
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(v: T) -> T {
    // ln(1 + e^v) without overflow.
    v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln()
}

fn channel_apply<T: Scalar>(x: &Tensor<T>, per_c: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (c, h, w) = x.dims3().unwrap();
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        let sc = per_c.data()[ch];
        for p in 0..plane {
            out[ch * plane + p] = f(x.data()[ch * plane + p], sc);
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

pub(crate) fn squeeze_raw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); c * h * w];
    let plane_out = ho * wo;
    for k in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = 4 * k + 2 * dy + dx;
                for i in 0..ho {
                    for j in 0..wo {
                        out[oc * plane_out + i * wo + j] =
                            x.data()[k * h * w + (2 * i + dy) * w + (2 * j + dx)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![4 * c, ho, wo], out).unwrap()
}

pub(crate) fn unsqueeze_raw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, ho, wo) = x.dims3().unwrap();
    let c = c4 / 4;
    let (h, w) = (ho * 2, wo * 2);
    let mut out = vec![T::zero(); c4 * ho * wo];
    let plane_in = ho * wo;
    for k in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let ic = 4 * k + 2 * dy + dx;
                for i in 0..ho {
                    for j in 0..wo {
                        out[k * h * w + (2 * i + dy) * w + (2 * j + dx)] =
                            x.data()[ic * plane_in + i * wo + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

fn out_spatial(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, pad: usize) -> Vec<T> {
    let (c, h, w) = x.dims3().unwrap();
    let (ho, wo) = out_spatial(h, w, k, pad);
    let l = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * l];
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for oy in 0..ho {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + dx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        cols[row * l + oy * wo + ox] = x.data()[ci * h * w + iy * w + (ix - pad)];
                    }
                }
            }
        }
    }
    cols
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (_, h, wd) = x.dims3().unwrap();
    let (cout, _cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = out_spatial(h, wd, k, pad);
    let l = ho * wo;
    let kk = w.shape()[1] * k * k;
    let mut out = vec![T::zero(); cout * l];
    if k == 1 && pad == 0 {
        T::gemm(cout, kk, l, T::one(), w.data(), x.data(), T::zero(), &mut out);
    } else {
        let cols = im2col(x, k, pad);
        T::gemm(cout, kk, l, T::one(), w.data(), &cols, T::zero(), &mut out);
    }
    for o in 0..cout {
        let bo = b.data()[o];
        for p in 0..l {
            out[o * l + p] += bo;
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

fn col2im<T: Scalar>(gcols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Tensor<T> {
    let (ho, wo) = out_spatial(h, w, k, pad);
    let l = ho * wo;
    let mut gx = Tensor::zeros(vec![c, h, w]);
    let data = gx.data_mut();
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                for oy in 0..ho {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + dx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        data[ci * h * w + iy * w + (ix - pad)] += gcols[row * l + oy * wo + ox];
                    }
                }
            }
        }
    }
    gx
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (c, h, wd) = x.dims3().unwrap();
    let (cout, _cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = out_spatial(h, wd, k, pad);
    let l = ho * wo;
    let kk = c * k * k;

    let mut gb = vec![T::zero(); cout];
    for o in 0..cout {
        let mut acc = T::zero();
        for p in 0..l {
            acc += g.data()[o * l + p];
        }
        gb[o] = acc;
    }
    let gb = Tensor::from_vec(gb);

    let gw = if want_w {
        // gw = g(Cout×L) · colsᵀ(L×CKK)
        let mut gw = vec![T::zero(); cout * kk];
        if k == 1 && pad == 0 {
            T::gemm_strided(
                cout, l, kk,
                T::one(),
                g.data(), l as isize, 1,
                x.data(), 1, l as isize,
                T::zero(),
                &mut gw, kk as isize, 1,
            );
        } else {
            let cols = im2col(x, k, pad);
            T::gemm_strided(
                cout, l, kk,
                T::one(),
                g.data(), l as isize, 1,
                &cols, 1, l as isize,
                T::zero(),
                &mut gw, kk as isize, 1,
            );
        }
        Some(Tensor::new(w.shape().to_vec(), gw).unwrap())
    } else {
        None
    };

    let gx = if want_x {
        // gcols = wᵀ(CKK×Cout) · g(Cout×L)
        let mut gcols = vec![T::zero(); kk * l];
        T::gemm_strided(
            kk, cout, l,
            T::one(),
            w.data(), 1, kk as isize,
            g.data(), l as isize, 1,
            T::zero(),
            &mut gcols, l as isize, 1,
        );
        if k == 1 && pad == 0 {
            Some(Tensor::new(vec![c, h, wd], gcols).unwrap())
        } else {
            Some(col2im(&gcols, c, h, wd, k, pad))
        }
    } else {
        None
    };

    (gx, gw, gb)
}
