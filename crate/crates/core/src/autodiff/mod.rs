//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! appends one node holding its output, and knows its exact vector-Jacobian
//! product. [`Graph::backward`] walks the tape once in reverse append order.
//!
//! Rectifier kinks (`relu`, `max_with_zero` at exactly zero) take subgradient
//! zero. Max-pool ties route the gradient to the lowest input index.

mod fd;
pub(crate) mod kernels;

pub use fd::finite_difference_grad;

use crate::special;
use crate::tensor::{Tensor, TensorError};
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive recorded by a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddAlong,
    MulAlong,
    Relu,
    Sigmoid,
    Softmax,
    Exp,
    Log,
    Neg,
    MaxWithZero,
    MaskedSelectMean,
    Sum,
    Mean,
    Conv2d,
    MaxPool2d,
    Reshape,
    GatherColumns,
    SoftmaxCrossEntropy,
    Softplus,
    Sqrt,
    NormalCdf,
    LeaveOneOutLogSumExp,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::MatMul => "matmul",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::ScalarMul => "scalar-mul",
            Self::AddAlong => "add-along",
            Self::MulAlong => "mul-along",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
            Self::MaxWithZero => "max-with-zero",
            Self::MaskedSelectMean => "masked-select-mean",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Conv2d => "conv2d",
            Self::MaxPool2d => "maxpool2d",
            Self::Reshape => "reshape",
            Self::GatherColumns => "gather-columns",
            Self::SoftmaxCrossEntropy => "softmax-cross-entropy",
            Self::Softplus => "softplus",
            Self::Sqrt => "sqrt",
            Self::NormalCdf => "normal-cdf",
            Self::LeaveOneOutLogSumExp => "loo-logsumexp",
        }
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Scalar(f64),
    Axis(usize),
    Mask(Vec<bool>),
    Argmax(Vec<usize>),
    Probs { labels: Vec<usize>, probs: Vec<f64> },
    Indices(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    kind: PrimitiveKind,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    aux: Aux,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<PrimitiveKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn grad(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn grad_data(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong (scaled
    /// by 1.5). Exists so gradient checkers can be tested against a known
    /// offender.
    #[doc(hidden)]
    pub fn with_corrupted_backward(kind: PrimitiveKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].kind
    }

    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(PrimitiveKind::Leaf, vec![], t, true, Aux::None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(PrimitiveKind::Leaf, vec![], t, false, Aux::None)
    }

    fn push_unchecked(
        &mut self,
        kind: PrimitiveKind,
        inputs: Vec<usize>,
        value: Tensor,
        requires_grad: bool,
        aux: Aux,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        kind: PrimitiveKind,
        inputs: &[Var],
        value: Tensor,
        aux: Aux,
    ) -> Result<Var, TensorError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node,
                op: kind.name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(
            kind,
            inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            aux,
        ))
    }

    fn unary(
        &mut self,
        kind: PrimitiveKind,
        x: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(kind, &[x], out, Aux::None)
    }

    fn binary(
        &mut self,
        kind: PrimitiveKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            let data = av.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if av.is_scalar() {
            let x = av.data()[0];
            let data = bv.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(bv.shape().to_vec(), data)?
        } else {
            return Err(mismatch(
                kind.name(),
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        };
        self.push(kind, &[a, b], out, Aux::None)
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, 0.0);
        let out = Tensor::new(vec![m, n], c)?;
        self.push(PrimitiveKind::MatMul, &[a, b], out, Aux::None)
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(PrimitiveKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(PrimitiveKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(PrimitiveKind::Mul, a, b, |x, y| x * y)
    }

    /// Multiplication by a fixed (non-differentiable) constant.
    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| a * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(PrimitiveKind::ScalarMul, &[x], out, Aux::Scalar(c))
    }

    /// Adds the vector `v` along `axis` of `x` (bias add).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var, TensorError> {
        self.along(PrimitiveKind::AddAlong, x, v, axis, |a, b| a + b)
    }

    /// Scales `x` along `axis` by the vector `v` (per-unit or per-channel gate).
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var, TensorError> {
        self.along(PrimitiveKind::MulAlong, x, v, axis, |a, b| a * b)
    }

    fn along(
        &mut self,
        kind: PrimitiveKind,
        x: Var,
        v: Var,
        axis: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (xv, vv) = (self.value(x), self.value(v));
        let shape = xv.shape();
        if axis >= shape.len() || vv.numel() != shape[axis] {
            return Err(mismatch(
                kind.name(),
                format!("vector of {} along axis {axis} of {shape:?}", vv.numel()),
            ));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let (xd, vd) = (xv.data(), vv.data());
        let mut data = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for (a, &b) in vd.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                data.extend(xd[base..base + inner].iter().map(|&e| f(e, b)));
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(kind, &[x, v], out, Aux::Axis(axis))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Relu, x, |a| a.max(0.0))
    }

    /// Same function as [`Graph::relu`]; recorded separately so the gate
    /// rectifier is distinguishable in the tape.
    pub fn max_with_zero(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::MaxWithZero, x, |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Sigmoid, x, special::sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let last = *xv.shape().last().unwrap_or(&1);
        let data = xv.data().chunks(last).flat_map(special::softmax).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(PrimitiveKind::Softmax, &[x], out, Aux::None)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Log, x, f64::ln)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Neg, x, |a| -a)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Softplus, x, special::softplus)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::Sqrt, x, f64::sqrt)
    }

    /// Standard Normal CDF, elementwise.
    pub fn normal_cdf(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(PrimitiveKind::NormalCdf, x, special::normal_cdf)
    }

    /// `o_k = ln Σ_{l≠k} e^{x_l}` over a 1-D input of length ≥ 2.
    pub fn leave_one_out_logsumexp(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.numel() < 2 {
            return Err(mismatch(
                "loo-logsumexp",
                format!("needs a vector of length >= 2, got {:?}", xv.shape()),
            ));
        }
        let out = Tensor::vector(special::leave_one_out_logsumexp(xv.data()));
        self.push(PrimitiveKind::LeaveOneOutLogSumExp, &[x], out, Aux::None)
    }

    /// Mean of the entries of `x` where `mask` is true, as a scalar. An empty
    /// mask yields zero.
    pub fn masked_select_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(mismatch(
                "masked-select-mean",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let n = mask.iter().filter(|&&m| m).count();
        let s: f64 = xv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let mean = if n == 0 { 0.0 } else { s / n as f64 };
        self.push(
            PrimitiveKind::MaskedSelectMean,
            &[x],
            Tensor::scalar(mean),
            Aux::Mask(mask.to_vec()),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push(PrimitiveKind::Sum, &[x], Tensor::scalar(s), Aux::None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(PrimitiveKind::Mean, &[x], Tensor::scalar(s), Aux::None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(PrimitiveKind::Reshape, &[x], out, Aux::None)
    }

    /// `[n, ...] → [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.value(x).shape();
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    /// Selects columns of a `[n, f]` matrix.
    pub fn gather_columns(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[1]) {
            return Err(mismatch(
                "gather-columns",
                format!("{} indices into {shape:?}", indices.len()),
            ));
        }
        let f = shape[1];
        let data = xv
            .data()
            .chunks(f)
            .flat_map(|row| indices.iter().map(move |&i| row[i]))
            .collect();
        let out = Tensor::new(vec![shape[0], indices.len()], data)?;
        self.push(
            PrimitiveKind::GatherColumns,
            &[x],
            out,
            Aux::Indices(indices.to_vec()),
        )
    }

    /// Valid-padding, stride-1 convolution: `x [n,c_in,h,w]`, `w [c_out,c_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let g = self.conv_geom(x, w)?;
        let n = self.value(x).shape()[0];
        let data = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), &g);
        let out = Tensor::new(vec![n, g.c_out, g.ho(), g.wo()], data)?;
        self.push(PrimitiveKind::Conv2d, &[x, w], out, Aux::None)
    }

    fn conv_geom(&self, x: Var, w: Var) -> Result<ConvGeom, TensorError> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] > sx[2] || sw[3] > sx[3] {
            return Err(mismatch("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        Ok(ConvGeom {
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            c_out: sw[0],
        })
    }

    /// 2×2, stride-2 max pooling over `[n, c, h, w]`.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(mismatch("maxpool2d", format!("input {s:?}")));
        }
        let (vals, arg) = kernels::maxpool2x2(xv.data(), s[0] * s[1], s[2], s[3]);
        let out = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], vals)?;
        self.push(PrimitiveKind::MaxPool2d, &[x], out, Aux::Argmax(arg))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(mismatch(
                "softmax-cross-entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let c = s[1];
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = 0.0;
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += m + z.ln() - row[y];
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        self.push(
            PrimitiveKind::SoftmaxCrossEntropy,
            &[logits],
            out,
            Aux::Probs {
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// On/off state of every rectifier, gate mask and pooling switch in the
    /// tape. Two evaluations with equal patterns lie in the same smooth piece.
    pub fn switch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match (&node.kind, &node.aux) {
                (PrimitiveKind::Relu | PrimitiveKind::MaxWithZero, _) => {
                    out.extend(node.value.data().iter().map(|&v| (v > 0.0) as u64));
                }
                (_, Aux::Mask(m)) => out.extend(m.iter().map(|&b| b as u64)),
                (_, Aux::Argmax(a)) => out.extend(a.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    /// Smallest `|input|` seen by any rectifier in the tape.
    pub fn min_rectifier_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, PrimitiveKind::Relu | PrimitiveKind::MaxWithZero))
            .flat_map(|n| self.nodes[n.inputs[0]].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.kind == PrimitiveKind::Leaf || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut input_grads = self.vjp(node, &g);
            if self.fault == Some(node.kind) {
                for ig in &mut input_grads {
                    ig.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian product of one node: one gradient per input, each the
    /// size of that input.
    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<Vec<f64>> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let out = node.value.data();
        // Gradient of a broadcast binary operand: reduce when it was a scalar.
        let reduce = |full: Vec<f64>, operand: &Tensor| -> Vec<f64> {
            if operand.numel() == full.len() {
                full
            } else {
                vec![full.iter().sum()]
            }
        };
        let bcast = |t: &Tensor, i: usize| -> f64 {
            if t.numel() == 1 {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        match node.kind {
            PrimitiveKind::Leaf => vec![],
            PrimitiveKind::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                kernels::gemm(m, n, k, g, false, b.data(), true, &mut da, 0.0);
                kernels::gemm(k, m, n, a.data(), true, g, false, &mut db, 0.0);
                vec![da, db]
            }
            PrimitiveKind::Add | PrimitiveKind::Sub => {
                let (a, b) = (input(0), input(1));
                let n = g.len();
                let ga = reduce(g.to_vec(), a);
                let sign = if node.kind == PrimitiveKind::Sub {
                    -1.0
                } else {
                    1.0
                };
                let gb = reduce((0..n).map(|i| sign * g[i]).collect(), b);
                vec![ga, gb]
            }
            PrimitiveKind::Mul => {
                let (a, b) = (input(0), input(1));
                let n = g.len();
                let ga = reduce((0..n).map(|i| g[i] * bcast(b, i)).collect(), a);
                let gb = reduce((0..n).map(|i| g[i] * bcast(a, i)).collect(), b);
                vec![ga, gb]
            }
            PrimitiveKind::ScalarMul => {
                let Aux::Scalar(c) = node.aux else {
                    unreachable!()
                };
                vec![g.iter().map(|v| v * c).collect()]
            }
            PrimitiveKind::AddAlong | PrimitiveKind::MulAlong => {
                let Aux::Axis(axis) = node.aux else {
                    unreachable!()
                };
                let (x, v) = (input(0), input(1));
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let mut gx = vec![0.0; x.numel()];
                let mut gv = vec![0.0; len];
                let is_mul = node.kind == PrimitiveKind::MulAlong;
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        let scale = v.data()[a];
                        for i in base..base + inner {
                            if is_mul {
                                gx[i] = g[i] * scale;
                                gv[a] += g[i] * x.data()[i];
                            } else {
                                gx[i] = g[i];
                                gv[a] += g[i];
                            }
                        }
                    }
                }
                vec![gx, gv]
            }
            PrimitiveKind::Relu | PrimitiveKind::MaxWithZero => {
                let x = input(0).data();
                vec![g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect()]
            }
            PrimitiveKind::Sigmoid => {
                vec![g
                    .iter()
                    .zip(out)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect()]
            }
            PrimitiveKind::Softmax => {
                let last = *node.value.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(last).zip(out.chunks(last)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                vec![gx]
            }
            PrimitiveKind::Exp => vec![g.iter().zip(out).map(|(a, y)| a * y).collect()],
            PrimitiveKind::Log => {
                vec![g.iter().zip(input(0).data()).map(|(a, x)| a / x).collect()]
            }
            PrimitiveKind::Neg => vec![g.iter().map(|a| -a).collect()],
            PrimitiveKind::Softplus => vec![g
                .iter()
                .zip(input(0).data())
                .map(|(a, &x)| a * special::sigmoid(x))
                .collect()],
            PrimitiveKind::Sqrt => vec![g.iter().zip(out).map(|(a, y)| a / (2.0 * y)).collect()],
            PrimitiveKind::NormalCdf => vec![g
                .iter()
                .zip(input(0).data())
                .map(|(a, &x)| a * special::normal_pdf(x))
                .collect()],
            PrimitiveKind::LeaveOneOutLogSumExp => vec![loo_lse_vjp(input(0).data(), out, g)],
            PrimitiveKind::MaskedSelectMean => {
                let Aux::Mask(mask) = &node.aux else {
                    unreachable!()
                };
                let n = mask.iter().filter(|&&m| m).count();
                let share = if n == 0 { 0.0 } else { g[0] / n as f64 };
                vec![mask.iter().map(|&m| if m { share } else { 0.0 }).collect()]
            }
            PrimitiveKind::Sum => vec![vec![g[0]; input(0).numel()]],
            PrimitiveKind::Mean => {
                let n = input(0).numel();
                vec![vec![g[0] / n as f64; n]]
            }
            PrimitiveKind::Reshape => vec![g.to_vec()],
            PrimitiveKind::GatherColumns => {
                let Aux::Indices(idx) = &node.aux else {
                    unreachable!()
                };
                let x = input(0);
                let f = x.shape()[1];
                let mut gx = vec![0.0; x.numel()];
                for (r, grow) in g.chunks(idx.len()).enumerate() {
                    for (&i, gv) in idx.iter().zip(grow) {
                        gx[r * f + i] += gv;
                    }
                }
                vec![gx]
            }
            PrimitiveKind::Conv2d => {
                let (x, w) = (input(0), input(1));
                let (sx, sw) = (x.shape(), w.shape());
                let geom = ConvGeom {
                    c_in: sx[1],
                    h: sx[2],
                    w: sx[3],
                    kh: sw[2],
                    kw: sw[3],
                    c_out: sw[0],
                };
                let (dx, dw) = kernels::conv2d_backward(x.data(), sx[0], w.data(), &geom, g);
                vec![dx, dw]
            }
            PrimitiveKind::MaxPool2d => {
                let Aux::Argmax(arg) = &node.aux else {
                    unreachable!()
                };
                let mut gx = vec![0.0; input(0).numel()];
                for (&i, gv) in arg.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![gx]
            }
            PrimitiveKind::SoftmaxCrossEntropy => {
                let Aux::Probs { labels, probs } = &node.aux else {
                    unreachable!()
                };
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gx[r * c + y] -= scale;
                }
                vec![gx]
            }
        }
    }
}

/// `∂o_k/∂x_l = e^{x_l − o_k}` for `l ≠ k`, zero on the diagonal. Evaluated in
/// linear time with every exponent kept non-positive.
fn loo_lse_vjp(x: &[f64], o: &[f64], g: &[f64]) -> Vec<f64> {
    let mut top = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[top] {
            top = i;
        }
    }
    let m = x[top];
    // Terms k ≠ top have o_k ≥ m, so e^{m − o_k} ≤ 1.
    let t: f64 = (0..x.len())
        .filter(|&k| k != top)
        .map(|k| g[k] * (m - o[k]).exp())
        .sum();
    (0..x.len())
        .map(|l| {
            if l == top {
                t
            } else {
                (x[l] - m).exp() * (t - g[l] * (m - o[l]).exp()) + g[top] * (x[l] - o[top]).exp()
            }
        })
        .collect()
}
