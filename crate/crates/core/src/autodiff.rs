//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes in construction order; [`Tape::backward`] walks
//! the node list in exact reverse construction order and accumulates
//! gradients additively into every node that requires them. Graphs are
//! DAGs by construction (an op can only reference earlier nodes), so no
//! explicit sort is needed.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, reduce_to_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Sigmoid {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Silu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: F,
    },
    Clamp {
        x: usize,
        lo: F,
        hi: F,
    },
    /// `y = m*x + c` with scalar constants; only the slope matters for
    /// the backward pass.
    Affine {
        x: usize,
        m: F,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose2d {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Select {
        x: usize,
        indices: Vec<usize>,
    },
    ScatterFlat {
        x: usize,
        positions: Vec<usize>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    MseLoss {
        pred: usize,
        target: usize,
    },
    BceLoss {
        logits: usize,
        target: usize,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Silu { .. } => "silu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Matmul { .. } => "matmul",
            Op::Transpose2d { .. } => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Reshape { .. } => "reshape",
            Op::Select { .. } => "select",
            Op::ScatterFlat { .. } => "scatter",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MseLoss { .. } => "mse_loss",
            Op::BceLoss { .. } => "bce_loss",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // split on sign for numerical stability
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Reverse-mode autodiff graph over dense tensors.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// A tape that fails fast with the offending op's name whenever a
    /// forward value turns non-finite. Used to diagnose NaN aborts.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Result<Var> {
        let idx = self.nodes.len();
        // Leaves carry caller data (inputs, targets); only op outputs are
        // subject to the finite check.
        if self.check_finite && !matches!(op, Op::Leaf) && !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
                node: idx,
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(idx))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
            .expect("leaf push cannot fail")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let f = match kind {
            BinaryKind::Add => |x: F, y: F| x + y,
            BinaryKind::Sub => |x: F, y: F| x - y,
            BinaryKind::Mul => |x: F, y: F| x * y,
            BinaryKind::Div => |x: F, y: F| x / y,
        };
        let value = broadcast_zip(self.value(a), self.value(b), f)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Binary { kind, a: a.0, b: b.0 })
    }

    /// Elementwise sum with trailing-dimension broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product with trailing-dimension broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.requires(x);
        self.push(value, rg, Op::Sigmoid { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.requires(x);
        self.push(value, rg, Op::Exp { x: x.0 })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid_scalar(v));
        let rg = self.requires(x);
        self.push(value, rg, Op::Silu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > F::zero() { v } else { v * slope });
        let rg = self.requires(x);
        self.push(value, rg, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, F::zero())
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.requires(x);
        self.push(value, rg, Op::Clamp { x: x.0, lo, hi })
    }

    /// `m*x + c` with scalar constants.
    pub fn affine(&mut self, x: Var, m: F, c: F) -> Result<Var> {
        let value = self.value(x).map(|v| m * v + c);
        let rg = self.requires(x);
        self.push(value, rg, Op::Affine { x: x.0, m })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -F::one(), F::zero())
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa
                .iter()
                .zip(sb)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_span = sa[axis] * inner;
        let b_span = sb[axis] * inner;
        let mut data = Vec::with_capacity(outer * (a_span + b_span));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_span..(o + 1) * a_span]);
            data.extend_from_slice(&bd[o * b_span..(o + 1) * b_span]);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Concat { a: a.0, b: b.0, axis })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b), false, false)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let src = v.data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Transpose2d { x: x.0 })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            value,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = kernels::upsample2x_forward(self.value(x))?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Upsample2x { x: x.0 })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool_forward(self.value(x))?;
        let rg = self.requires(x);
        self.push(value, rg, Op::GlobalAvgPool { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Reshape { x: x.0 })
    }

    /// Gather flat elements: `out[j] = x[indices[j]]`.
    pub fn select(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let n = src.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidConfig(format!(
                "select index {bad} out of range for {n} elements"
            )));
        }
        let data: Vec<F> = indices.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::Select { x: x.0, indices })
    }

    /// Place `x` (a vector) at `positions` of a fresh vector of length
    /// `out_len` whose remaining elements are `fill`. Positions must be
    /// distinct.
    pub fn scatter_flat(
        &mut self,
        x: Var,
        positions: Vec<usize>,
        out_len: usize,
        fill: F,
    ) -> Result<Var> {
        let src = self.value(x);
        if src.numel() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                lhs: src.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let mut data = vec![fill; out_len];
        let mut seen = vec![false; out_len];
        for (j, &p) in positions.iter().enumerate() {
            if p >= out_len || seen[p] {
                return Err(Error::InvalidConfig(format!(
                    "scatter position {p} out of range or duplicated (len {out_len})"
                )));
            }
            seen[p] = true;
            data[p] = src.data()[j];
        }
        let value = Tensor::new(vec![out_len], data)?;
        let rg = self.requires(x);
        self.push(value, rg, Op::ScatterFlat { x: x.0, positions })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(acc), rg, Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / F::from_f64(n as f64));
        let rg = self.requires(x);
        self.push(value, rg, Op::Mean { x: x.0 })
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let mut acc = F::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = a - b;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / F::from_f64(p.numel() as f64));
        let rg = self.requires(pred) || self.requires(target);
        self.push(
            value,
            rg,
            Op::MseLoss {
                pred: pred.0,
                target: target.0,
            },
        )
    }

    /// Mean binary cross-entropy from logits:
    /// `mean(max(x,0) - x*t + ln(1 + exp(-|x|)))`.
    pub fn bce_loss(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, t) = (self.value(logits), self.value(target));
        if x.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: x.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let mut acc = F::zero();
        for (&xi, &ti) in x.data().iter().zip(t.data()) {
            let pos = xi.max(F::zero());
            acc += pos - xi * ti + (F::one() + (-xi.abs()).exp()).ln();
        }
        let value = Tensor::scalar(acc / F::from_f64(x.numel() as f64));
        let rg = self.requires(logits) || self.requires(target);
        self.push(
            value,
            rg,
            Op::BceLoss {
                logits: logits.0,
                target: target.0,
            },
        )
    }

    /// `sum_i weights[i] * terms[i]` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.affine(v, w, F::zero())?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidConfig("weighted_sum of no terms".into()))
    }

    fn accumulate(&mut self, idx: usize, contribution: Tensor<F>) {
        let node = &mut self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), contribution.shape());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += *ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse pass from a scalar loss. Gradients of earlier backward
    /// calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.nodes[i].grad.is_none() {
                continue;
            }
            // Leaves keep their gradient for the caller; interior nodes
            // give theirs up once consumed.
            let g = if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            } else {
                self.nodes[i].grad.take().expect("checked above")
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Binary { kind, a, b } => {
                    let (sa, sb) = (
                        self.nodes[a].value.shape().to_vec(),
                        self.nodes[b].value.shape().to_vec(),
                    );
                    match kind {
                        BinaryKind::Add => {
                            if self.nodes[a].requires_grad {
                                self.accumulate(a, reduce_to_shape(&g, &sa));
                            }
                            if self.nodes[b].requires_grad {
                                self.accumulate(b, reduce_to_shape(&g, &sb));
                            }
                        }
                        BinaryKind::Sub => {
                            if self.nodes[a].requires_grad {
                                self.accumulate(a, reduce_to_shape(&g, &sa));
                            }
                            if self.nodes[b].requires_grad {
                                let neg = g.map(|v| -v);
                                self.accumulate(b, reduce_to_shape(&neg, &sb));
                            }
                        }
                        BinaryKind::Mul => {
                            if self.nodes[a].requires_grad {
                                let ga = broadcast_zip(&g, &self.nodes[b].value, |g, b| g * b)?;
                                self.accumulate(a, reduce_to_shape(&ga, &sa));
                            }
                            if self.nodes[b].requires_grad {
                                let gb = broadcast_zip(&g, &self.nodes[a].value, |g, a| g * a)?;
                                self.accumulate(b, reduce_to_shape(&gb, &sb));
                            }
                        }
                        BinaryKind::Div => {
                            if self.nodes[a].requires_grad {
                                let ga = broadcast_zip(&g, &self.nodes[b].value, |g, b| g / b)?;
                                self.accumulate(a, reduce_to_shape(&ga, &sa));
                            }
                            if self.nodes[b].requires_grad {
                                let num = broadcast_zip(&g, &self.nodes[a].value, |g, a| g * a)?;
                                let gb = broadcast_zip(&num, &self.nodes[b].value, |n, b| {
                                    -(n / (b * b))
                                })?;
                                self.accumulate(b, reduce_to_shape(&gb, &sb));
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let gx = broadcast_zip(&g, y, |g, y| g * y * (F::one() - y))?;
                    self.accumulate(x, gx);
                }
                Op::Exp { x } => {
                    let y = &self.nodes[i].value;
                    let gx = broadcast_zip(&g, y, |g, y| g * y)?;
                    self.accumulate(x, gx);
                }
                Op::Silu { x } => {
                    let gx = broadcast_zip(&g, &self.nodes[x].value, |g, v| {
                        let s = sigmoid_scalar(v);
                        g * (s + v * s * (F::one() - s))
                    })?;
                    self.accumulate(x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = broadcast_zip(&g, &self.nodes[x].value, |g, v| {
                        if v > F::zero() {
                            g
                        } else {
                            g * slope
                        }
                    })?;
                    self.accumulate(x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx = broadcast_zip(&g, &self.nodes[x].value, |g, v| {
                        if v >= lo && v <= hi {
                            g
                        } else {
                            F::zero()
                        }
                    })?;
                    self.accumulate(x, gx);
                }
                Op::Affine { x, m, .. } => {
                    let gx = g.map(|v| v * m);
                    self.accumulate(x, gx);
                }
                Op::Concat { a, b, axis } => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let a_span = sa[axis] * inner;
                    let b_span = sb[axis] * inner;
                    let gd = g.data();
                    let mut ga = Vec::with_capacity(outer * a_span);
                    let mut gb = Vec::with_capacity(outer * b_span);
                    for o in 0..outer {
                        let base = o * (a_span + b_span);
                        ga.extend_from_slice(&gd[base..base + a_span]);
                        gb.extend_from_slice(&gd[base + a_span..base + a_span + b_span]);
                    }
                    if self.nodes[a].requires_grad {
                        self.accumulate(a, Tensor::new(sa, ga)?);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate(b, Tensor::new(sb, gb)?);
                    }
                }
                Op::Matmul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let ga = kernels::matmul(&g, &self.nodes[b].value, false, true)?;
                        self.accumulate(a, ga);
                    }
                    if self.nodes[b].requires_grad {
                        let gb = kernels::matmul(&self.nodes[a].value, &g, true, false)?;
                        self.accumulate(b, gb);
                    }
                }
                Op::Transpose2d { x } => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let gd = g.data();
                    let mut data = vec![F::zero(); r * c];
                    for p in 0..r {
                        for q in 0..c {
                            data[q * r + p] = gd[p * c + q];
                        }
                    }
                    self.accumulate(x, Tensor::new(vec![c, r], data)?);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let mut gx = if self.nodes[x].requires_grad {
                        Some(Tensor::zeros(self.nodes[x].value.shape()))
                    } else {
                        None
                    };
                    let mut gw = if self.nodes[w].requires_grad {
                        Some(Tensor::zeros(self.nodes[w].value.shape()))
                    } else {
                        None
                    };
                    let mut gb = if self.nodes[b].requires_grad {
                        Some(Tensor::zeros(self.nodes[b].value.shape()))
                    } else {
                        None
                    };
                    kernels::conv2d_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        stride,
                        pad,
                        &g,
                        gx.as_mut(),
                        gw.as_mut(),
                        gb.as_mut(),
                    );
                    if let Some(gx) = gx {
                        self.accumulate(x, gx);
                    }
                    if let Some(gw) = gw {
                        self.accumulate(w, gw);
                    }
                    if let Some(gb) = gb {
                        self.accumulate(b, gb);
                    }
                }
                Op::Upsample2x { x } => {
                    let mut gx = Tensor::zeros(self.nodes[x].value.shape());
                    kernels::upsample2x_backward(&g, &mut gx);
                    self.accumulate(x, gx);
                }
                Op::GlobalAvgPool { x } => {
                    let shape = self.nodes[x].value.shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let inv = F::from_f64(1.0 / (h * w) as f64);
                    let gd = g.data();
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for nc in 0..shape[0] * shape[1] {
                        let v = gd[nc] * inv;
                        data.extend(std::iter::repeat(v).take(h * w));
                    }
                    self.accumulate(x, Tensor::new(shape, data)?);
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x].value.shape().to_vec();
                    self.accumulate(x, g.reshape(&shape)?);
                }
                Op::Select { x, ref indices } => {
                    let mut gx = Tensor::zeros(self.nodes[x].value.shape());
                    for (j, &p) in indices.iter().enumerate() {
                        gx.data_mut()[p] += g.data()[j];
                    }
                    self.accumulate(x, gx);
                }
                Op::ScatterFlat { x, ref positions } => {
                    let data: Vec<F> = positions.iter().map(|&p| g.data()[p]).collect();
                    let gx = Tensor::new(self.nodes[x].value.shape().to_vec(), data)?;
                    self.accumulate(x, gx);
                }
                Op::Sum { x } => {
                    let gv = g.item();
                    self.accumulate(x, Tensor::full(self.nodes[x].value.shape(), gv));
                }
                Op::Mean { x } => {
                    let n = self.nodes[x].value.numel();
                    let gv = g.item() / F::from_f64(n as f64);
                    self.accumulate(x, Tensor::full(self.nodes[x].value.shape(), gv));
                }
                Op::MseLoss { pred, target } => {
                    let n = F::from_f64(self.nodes[pred].value.numel() as f64);
                    let two = F::from_f64(2.0);
                    let gv = g.item();
                    let diff = broadcast_zip(
                        &self.nodes[pred].value,
                        &self.nodes[target].value,
                        |p, t| gv * two * (p - t) / n,
                    )?;
                    if self.nodes[pred].requires_grad {
                        self.accumulate(pred, diff.clone());
                    }
                    if self.nodes[target].requires_grad {
                        self.accumulate(target, diff.map(|v| -v));
                    }
                }
                Op::BceLoss { logits, target } => {
                    let n = F::from_f64(self.nodes[logits].value.numel() as f64);
                    let gv = g.item();
                    if self.nodes[logits].requires_grad {
                        let gx = broadcast_zip(
                            &self.nodes[logits].value,
                            &self.nodes[target].value,
                            |x, t| gv * (sigmoid_scalar(x) - t) / n,
                        )?;
                        self.accumulate(logits, gx);
                    }
                    if self.nodes[target].requires_grad {
                        let gt = self.nodes[logits].value.map(|x| gv * (-x) / n);
                        self.accumulate(target, gt);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_identity_and_broadcast() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::ones(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let out = t.add(a, b).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 1.0));

        let x = t.constant(Tensor::ones(&[1, 4, 8, 8]));
        let bias = t.constant(Tensor::from_fn(&[4, 1, 1], |i| i as f64));
        let y = t.add(x, bias).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 4, 8, 8]);
        // channel c should be 1 + c everywhere
        for c in 0..4 {
            for s in 0..64 {
                assert_eq!(t.value(y).data()[c * 64 + s], 1.0 + c as f64);
            }
        }
    }

    #[test]
    fn add_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[2, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 2], 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let out = t.add(va, vb).unwrap();
        for i in 0..4 {
            assert_eq!(t.value(out).data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn mul_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(&[3, 4], 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let ones = t.constant(Tensor::ones(&[3, 4]));
        let zeros = t.constant(Tensor::zeros(&[3, 4]));
        let keep = t.mul(va, ones).unwrap();
        assert_eq!(t.value(keep).data(), a.data());
        let kill = t.mul(va, zeros).unwrap();
        assert!(t.value(kill).data().iter().all(|&v| v == 0.0));
        // scalar-loop oracle
        let b = Tensor::<f64>::randn(&[3, 4], 0.0, 1.0, &mut rng);
        let vb = t.constant(b.clone());
        let prod = t.mul(va, vb).unwrap();
        for i in 0..12 {
            assert_eq!(t.value(prod).data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn mul_broadcast_gradient_sums_over_expanded_dims() {
        // gradient of broadcast operand equals full gradient summed over
        // broadcast dimensions; checked against an explicit tiling oracle
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 0.0, 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[3, 1, 1], 0.0, 1.0, &mut rng);

        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let vc = t.param(c.clone());
        let y = t.mul(vx, vc).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        let got = t.grad(vc).unwrap().clone();

        // tiling oracle: explicitly tile c to full shape, recompute
        let mut tiled = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        for n in 0..2 {
            for ch in 0..3 {
                for s in 0..4 {
                    tiled.data_mut()[(n * 3 + ch) * 4 + s] = c.data()[ch];
                }
            }
        }
        let mut t2 = Tape::new();
        let vx2 = t2.constant(x.clone());
        let vt = t2.param(tiled);
        let y2 = t2.mul(vx2, vt).unwrap();
        let loss2 = t2.sum(y2).unwrap();
        t2.backward(loss2).unwrap();
        let full = t2.grad(vt).unwrap();
        for ch in 0..3 {
            let mut want = 0.0;
            for n in 0..2 {
                for s in 0..4 {
                    want += full.data()[(n * 3 + ch) * 4 + s];
                }
            }
            assert!((got.data()[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_shapes_split_backward() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::ones(&[1, 4, 8, 8]));
        let b = t.param(Tensor::full(&[1, 2, 8, 8], 2.0));
        let y = t.concat(a, b, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 6, 8, 8]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(t.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_then_split_returns_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[2, 3, 2, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 2, 2, 2], 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let y = t.concat(va, vb, 1).unwrap();
        // manual split along channel axis
        let yd = t.value(y).data();
        for n in 0..2 {
            for c in 0..5 {
                for s in 0..4 {
                    let v = yd[(n * 5 + c) * 4 + s];
                    let want = if c < 3 {
                        a.data()[(n * 3 + c) * 4 + s]
                    } else {
                        b.data()[(n * 2 + (c - 3)) * 4 + s]
                    };
                    assert_eq!(v, want);
                }
            }
        }
        let bad = t.constant(Tensor::ones(&[2, 2, 3, 2]));
        assert!(matches!(
            t.concat(va, bad, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.value(s).data()[0], 0.5);
        let e = t.exp(x).unwrap();
        assert_eq!(t.value(e).data()[0], 1.0);
        let si = t.silu(x).unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((t.value(si).data()[1] - sig1).abs() < 1e-12);
        assert!((t.value(si).data()[1] - 0.7311).abs() < 1e-4);
        let lr = t.leaky_relu(x, 0.1).unwrap();
        assert_eq!(t.value(lr).data(), &[0.0, 1.0, -0.2]);
    }

    #[test]
    fn reduction_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let z = t.constant(Tensor::zeros(&[2]));
        let m = t.mse_loss(x, x).unwrap();
        assert_eq!(t.value(m).item(), 0.0);
        let m2 = t.mse_loss(x, z).unwrap();
        assert_eq!(t.value(m2).item(), 5.0);
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item(), 4.0);
        let mean = t.mean(x).unwrap();
        assert_eq!(t.value(mean).item(), 2.0);
    }

    #[test]
    fn select_scatter_roundtrip_and_grads() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![5], vec![10., 20., 30., 40., 50.]).unwrap());
        let sel = t.select(x, vec![4, 0, 2]).unwrap();
        assert_eq!(t.value(sel).data(), &[50., 10., 30.]);
        let sc = t.scatter_flat(sel, vec![1, 2, 3], 6, -1.0).unwrap();
        assert_eq!(t.value(sc).data(), &[-1., 50., 10., 30., -1., -1.]);
        let loss = t.sum(sc).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1., 0., 1., 0., 1.]);
    }

    #[test]
    fn finite_check_names_offending_op() {
        let mut t = Tape::<f64>::with_finite_checks();
        let x = t.constant(Tensor::new(vec![1], vec![800.0]).unwrap());
        let e = t.exp(x); // overflows to +inf
        match e {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_determinism() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::randn(&[2, 3, 6, 6], 0.0, 1.0, &mut rng));
            let w = t.param(Tensor::randn(&[4, 3, 3, 3], 0.0, 0.2, &mut rng));
            let b = t.param(Tensor::zeros(&[4]));
            let c = t.conv2d(x, w, b, 1, 1).unwrap();
            let a = t.silu(c).unwrap();
            let loss = t.mean(a).unwrap();
            t.backward(loss).unwrap();
            (
                t.value(loss).item(),
                t.grad(w).unwrap().clone(),
                t.grad(b).unwrap().clone(),
            )
        };
        let (l1, gw1, gb1) = run();
        let (l2, gw2, gb2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gw1, gw2);
        assert_eq!(gb1, gb2);
    }
}
