//! Reverse-mode autodiff over a flat tape. Each op records the handles of its
//! inputs plus whatever it must save for the backward pass; `backward` walks
//! the tape once in reverse. The op set is exactly what the conv trunk and its
//! two heads need, nothing more.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elem::Elem;
use crate::ops;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    Tensor(TensorError),
    /// stride outside {1,2} or input smaller than the kernel
    BadConvGeometry { h: usize, w: usize, stride: usize },
    /// train-mode batchnorm over a single sample has no variance
    DegenerateVariance { samples_per_channel: usize },
    /// label >= number of classes
    LabelOutOfRange { label: usize, classes: usize },
    /// backward on a non-scalar node
    NonScalarLoss { shape: Vec<usize> },
    /// the tape has already been walked
    GraphConsumed,
    /// dueling head with an empty action set
    EmptyActions,
    /// action index >= action count in a gather
    ActionOutOfRange { action: usize, actions: usize },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::Tensor(e) => write!(f, "{}", e),
            GraphError::BadConvGeometry { h, w, stride } => {
                write!(f, "invalid conv geometry: input {}x{}, stride {} (need >=3x>=3, stride in {{1,2}})", h, w, stride)
            }
            GraphError::DegenerateVariance { samples_per_channel } => {
                write!(f, "batchnorm needs >=2 samples per channel in train mode, got {}", samples_per_channel)
            }
            GraphError::LabelOutOfRange { label, classes } => {
                write!(f, "label {} out of range for {} classes", label, classes)
            }
            GraphError::NonScalarLoss { shape } => write!(f, "backward requires a scalar loss, got shape {:?}", shape),
            GraphError::GraphConsumed => write!(f, "graph already consumed by a previous backward"),
            GraphError::EmptyActions => write!(f, "dueling aggregation requires at least one action"),
            GraphError::ActionOutOfRange { action, actions } => {
                write!(f, "action index {} out of range for {} actions", action, actions)
            }
        }
    }
}

impl core::error::Error for GraphError {}

impl From<TensorError> for GraphError {
    fn from(e: TensorError) -> Self {
        GraphError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum OpRecord<E: Elem> {
    Leaf,
    Relu { x: VarId },
    Dense { x: VarId, w: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<E>, inv_std: Vec<E>, stats_from_batch: bool },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<E> },
    Mse { pred: VarId, target: VarId },
    DuelingAggregate { value: VarId, advantage: VarId },
    GatherActions { q: VarId, actions: Vec<usize> },
    Sum { x: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Reshape { x: VarId },
}

struct Node<E: Elem> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    op: OpRecord<E>,
}

/// Per-channel statistics a train-mode batchnorm computed from its batch,
/// handed back so the owning model can fold them into its running estimates.
#[derive(Debug, Clone)]
pub struct BatchNormStats<E: Elem> {
    pub mean: Vec<E>,
    pub biased_var: Vec<E>,
    pub samples_per_channel: usize,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: OpRecord<E>) -> VarId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        VarId(self.nodes.len() - 1)
    }

    /// Inserts non-trainable data (images, targets). Rejects non-finite input.
    pub fn input(&mut self, value: Tensor<E>) -> Result<VarId, GraphError> {
        value.check_finite("graph input")?;
        Ok(self.push(value, false, OpRecord::Leaf))
    }

    /// Inserts a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor<E>) -> VarId {
        self.push(value, true, OpRecord::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data: Vec<E> = self.nodes[x.0].value.data().iter().map(|&v| v.maximum(E::ZERO)).collect();
        let t = Tensor::from_vec(self.nodes[x.0].value.shape(), data).expect("relu preserves shape");
        let ng = self.needs(x);
        self.push(t, ng, OpRecord::Relu { x })
    }

    /// x: N x F, w: F x U, b: U -> N x U
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, GraphError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(TensorError::DimMismatch {
                expected: vec![xs[0], ws.first().copied().unwrap_or(0)],
                got: xs.clone(),
                context: String::from("dense: need x[N,F], w[F,U], b[U]"),
            }
            .into());
        }
        let (n, f, u) = (xs[0], xs[1], ws[1]);
        let mut out = vec![E::ZERO; n * u];
        let bd = self.nodes[b.0].value.data();
        for row in out.chunks_exact_mut(u) {
            row.copy_from_slice(bd);
        }
        ops::matmul_acc(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), n, f, u, &mut out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&[n, u], out)?, ng, OpRecord::Dense { x, w, b }))
    }

    /// Valid 3x3 convolution. x: N x Cin x H x W, w: Cout x Cin x 3 x 3, b: Cout.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> Result<VarId, GraphError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::DimMismatch {
                expected: vec![4],
                got: xs.clone(),
                context: String::from("conv2d: need x[N,C,H,W] and w[Cout,Cin,3,3]"),
            }
            .into());
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || kh != ops::KERNEL || kw != ops::KERNEL || bs != [cout] {
            return Err(TensorError::DimMismatch {
                expected: vec![cout, cin, ops::KERNEL, ops::KERNEL],
                got: ws.clone(),
                context: String::from("conv2d: weight/bias shape"),
            }
            .into());
        }
        if !(stride == 1 || stride == 2) || h < ops::KERNEL || wd < ops::KERNEL {
            return Err(GraphError::BadConvGeometry { h, w: wd, stride });
        }
        let oh = ops::conv_out_extent(h, stride);
        let ow = ops::conv_out_extent(wd, stride);
        let out = ops::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            n,
            cin,
            h,
            wd,
            cout,
            stride,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&[n, cout, oh, ow], out)?, ng, OpRecord::Conv2d { x, w, b, stride }))
    }

    /// Train-mode batchnorm: normalizes per channel over batch and space with
    /// statistics from this batch, and reports them for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: E,
    ) -> Result<(VarId, BatchNormStats<E>), GraphError> {
        let (n, c, plane) = self.batchnorm_geometry(x, gamma, beta)?;
        if n * plane < 2 {
            return Err(GraphError::DegenerateVariance { samples_per_channel: n * plane });
        }
        let (mean, inv_std, biased_var) = ops::batch_stats(self.nodes[x.0].value.data(), n, c, plane, eps);
        let y = ops::batchnorm_apply(
            self.nodes[x.0].value.data(),
            n,
            c,
            plane,
            &mean,
            &inv_std,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let shape = self.nodes[x.0].value.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchNormStats { mean: mean.clone(), biased_var, samples_per_channel: n * plane };
        let id = self.push(
            Tensor::from_vec(&shape, y)?,
            ng,
            OpRecord::BatchNorm { x, gamma, beta, mean, inv_std, stats_from_batch: true },
        );
        Ok((id, stats))
    }

    /// Eval-mode batchnorm: uses the supplied running statistics as constants.
    pub fn batchnorm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<VarId, GraphError> {
        let (n, c, plane) = self.batchnorm_geometry(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::DimMismatch {
                expected: vec![c],
                got: vec![running_mean.len()],
                context: String::from("batchnorm running stats"),
            }
            .into());
        }
        let inv_std: Vec<E> = running_var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let y = ops::batchnorm_apply(
            self.nodes[x.0].value.data(),
            n,
            c,
            plane,
            running_mean,
            &inv_std,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let shape = self.nodes[x.0].value.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            ng,
            OpRecord::BatchNorm { x, gamma, beta, mean: running_mean.to_vec(), inv_std, stats_from_batch: false },
        ))
    }

    fn batchnorm_geometry(&self, x: VarId, gamma: VarId, beta: VarId) -> Result<(usize, usize, usize), GraphError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::DimMismatch {
                expected: vec![4],
                got: xs,
                context: String::from("batchnorm: need x[N,C,H,W]"),
            }
            .into());
        }
        let (n, c) = (xs[0], xs[1]);
        let plane = xs[2] * xs[3];
        let gs = self.nodes[gamma.0].value.shape();
        let bs = self.nodes[beta.0].value.shape();
        if gs != [c] || bs != [c] {
            return Err(TensorError::DimMismatch {
                expected: vec![c],
                got: gs.to_vec(),
                context: String::from("batchnorm: gamma/beta must be [C]"),
            }
            .into());
        }
        Ok((n, c, plane))
    }

    /// Mean softmax cross-entropy over the batch. logits: N x K.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId, GraphError> {
        let ls = self.nodes[logits.0].value.shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::DimMismatch {
                expected: vec![labels.len(), 0],
                got: ls,
                context: String::from("softmax_cross_entropy: need logits[N,K] with N labels"),
            }
            .into());
        }
        let (n, k) = (ls[0], ls[1]);
        for &l in labels {
            if l >= k {
                return Err(GraphError::LabelOutOfRange { label: l, classes: k });
            }
        }
        let probs = ops::softmax_rows(self.nodes[logits.0].value.data(), n, k);
        let mut loss = E::ZERO;
        for (i, &l) in labels.iter().enumerate() {
            loss = loss - probs[i * k + l].ln();
        }
        loss = loss / E::from_usize(n);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            ng,
            OpRecord::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: VarId, target: VarId) -> Result<VarId, GraphError> {
        let ps = self.nodes[pred.0].value.shape().to_vec();
        let ts = self.nodes[target.0].value.shape().to_vec();
        if ps != ts {
            return Err(TensorError::DimMismatch { expected: ps, got: ts, context: String::from("mse") }.into());
        }
        let pd = self.nodes[pred.0].value.data();
        let td = self.nodes[target.0].value.data();
        let mut acc = E::ZERO;
        for (&p, &t) in pd.iter().zip(td.iter()) {
            let d = p - t;
            acc = acc + d * d;
        }
        let loss = acc / E::from_usize(pd.len());
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), ng, OpRecord::Mse { pred, target }))
    }

    /// Q[i,j] = v[i] + a[i,j] - mean_j a[i,:]. v: N x 1, a: N x A.
    pub fn dueling_aggregate(&mut self, value: VarId, advantage: VarId) -> Result<VarId, GraphError> {
        let vs = self.nodes[value.0].value.shape().to_vec();
        let as_ = self.nodes[advantage.0].value.shape().to_vec();
        if as_.len() != 2 || vs != [as_[0], 1] {
            return Err(TensorError::DimMismatch {
                expected: vec![as_.first().copied().unwrap_or(0), 1],
                got: vs,
                context: String::from("dueling_aggregate: need v[N,1], a[N,A]"),
            }
            .into());
        }
        let (n, a_dim) = (as_[0], as_[1]);
        if a_dim == 0 {
            return Err(GraphError::EmptyActions);
        }
        let vd = self.nodes[value.0].value.data();
        let ad = self.nodes[advantage.0].value.data();
        let inv_a = E::ONE / E::from_usize(a_dim);
        let mut out = vec![E::ZERO; n * a_dim];
        for i in 0..n {
            let row = &ad[i * a_dim..(i + 1) * a_dim];
            let mut mean = E::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_a;
            let orow = &mut out[i * a_dim..(i + 1) * a_dim];
            for (o, &av) in orow.iter_mut().zip(row.iter()) {
                *o = vd[i] + av - mean;
            }
        }
        let ng = self.needs(value) || self.needs(advantage);
        Ok(self.push(Tensor::from_vec(&[n, a_dim], out)?, ng, OpRecord::DuelingAggregate { value, advantage }))
    }

    /// out[i] = q[i, actions[i]]. q: N x A -> N x 1.
    pub fn gather_actions(&mut self, q: VarId, actions: &[usize]) -> Result<VarId, GraphError> {
        let qs = self.nodes[q.0].value.shape().to_vec();
        if qs.len() != 2 || qs[0] != actions.len() {
            return Err(TensorError::DimMismatch {
                expected: vec![actions.len(), 0],
                got: qs,
                context: String::from("gather_actions: need q[N,A] with N actions"),
            }
            .into());
        }
        let (n, a_dim) = (qs[0], qs[1]);
        let qd = self.nodes[q.0].value.data();
        let mut out = vec![E::ZERO; n];
        for (i, &a) in actions.iter().enumerate() {
            if a >= a_dim {
                return Err(GraphError::ActionOutOfRange { action: a, actions: a_dim });
            }
            out[i] = qd[i * a_dim + a];
        }
        let ng = self.needs(q);
        Ok(self.push(Tensor::from_vec(&[n, 1], out)?, ng, OpRecord::GatherActions { q, actions: actions.to_vec() }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = E::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let ng = self.needs(x);
        self.push(Tensor::scalar(acc), ng, OpRecord::Sum { x })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, GraphError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa != sb {
            return Err(TensorError::DimMismatch { expected: sa, got: sb, context: String::from("add") }.into());
        }
        let data: Vec<E> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&sa, data)?, ng, OpRecord::Add { a, b }))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, GraphError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa != sb {
            return Err(TensorError::DimMismatch { expected: sa, got: sb, context: String::from("mul") }.into());
        }
        let data: Vec<E> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&sa, data)?, ng, OpRecord::Mul { a, b }))
    }

    /// Shape reinterpretation (same element count).
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, GraphError> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, ng, OpRecord::Reshape { x }))
    }

    /// Reverse-mode accumulation from a scalar loss into every reachable
    /// parameter leaf. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: VarId) -> Result<(), GraphError> {
        if self.consumed {
            return Err(GraphError::GraphConsumed);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(GraphError::NonScalarLoss { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![E::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let grad = node.grad.as_ref().expect("checked above").clone();
            match &node.op {
                OpRecord::Leaf => {}
                OpRecord::Relu { x } => {
                    if before[x.0].needs_grad {
                        let xd = before[x.0].value.data();
                        let dst = grad_buf(&mut before[x.0].grad, xd.len());
                        for ((d, &g), &xv) in dst.iter_mut().zip(grad.iter()).zip(xd.iter()) {
                            if xv > E::ZERO {
                                *d = *d + g;
                            }
                        }
                    }
                }
                OpRecord::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = before[x.0].value.shape();
                    let ws = before[w.0].value.shape();
                    let (n, f, u) = (xs[0], xs[1], ws[1]);
                    if before[x.0].needs_grad {
                        let wd = before[w.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[x.0].grad, n * f);
                        ops::matmul_abt_acc(&grad, &wd, n, u, f, dst);
                    }
                    if before[w.0].needs_grad {
                        let xd = before[x.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[w.0].grad, f * u);
                        ops::matmul_atb_acc(&xd, &grad, n, f, u, dst);
                    }
                    if before[b.0].needs_grad {
                        let dst = grad_buf(&mut before[b.0].grad, u);
                        for row in grad.chunks_exact(u) {
                            for (d, &g) in dst.iter_mut().zip(row.iter()) {
                                *d = *d + g;
                            }
                        }
                    }
                }
                OpRecord::Conv2d { x, w, b, stride } => {
                    let (x, w, b, stride) = (*x, *w, *b, *stride);
                    let xs = before[x.0].value.shape().to_vec();
                    let ws = before[w.0].value.shape().to_vec();
                    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let cout = ws[0];
                    let need_dx = before[x.0].needs_grad;
                    let (dx, dw, db) = ops::conv2d_backward(
                        before[x.0].value.data(),
                        before[w.0].value.data(),
                        &grad,
                        n,
                        cin,
                        h,
                        wd,
                        cout,
                        stride,
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        accumulate(grad_buf(&mut before[x.0].grad, dx.len()), &dx);
                    }
                    if before[w.0].needs_grad {
                        accumulate(grad_buf(&mut before[w.0].grad, dw.len()), &dw);
                    }
                    if before[b.0].needs_grad {
                        accumulate(grad_buf(&mut before[b.0].grad, db.len()), &db);
                    }
                }
                OpRecord::BatchNorm { x, gamma, beta, mean, inv_std, stats_from_batch } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let sfb = *stats_from_batch;
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let xs = before[x.0].value.shape().to_vec();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let need_dx = before[x.0].needs_grad;
                    let (dx, dgamma, dbeta) = ops::batchnorm_backward(
                        before[x.0].value.data(),
                        &grad,
                        n,
                        c,
                        plane,
                        &mean,
                        &inv_std,
                        before[gamma.0].value.data(),
                        sfb,
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        accumulate(grad_buf(&mut before[x.0].grad, dx.len()), &dx);
                    }
                    if before[gamma.0].needs_grad {
                        accumulate(grad_buf(&mut before[gamma.0].grad, dgamma.len()), &dgamma);
                    }
                    if before[beta.0].needs_grad {
                        accumulate(grad_buf(&mut before[beta.0].grad, dbeta.len()), &dbeta);
                    }
                }
                OpRecord::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    if before[logits.0].needs_grad {
                        let n = labels.len();
                        let k = probs.len() / n;
                        let scale = grad[0] / E::from_usize(n);
                        let labels = labels.clone();
                        let probs = probs.clone();
                        let dst = grad_buf(&mut before[logits.0].grad, probs.len());
                        for i in 0..n {
                            let prow = &probs[i * k..(i + 1) * k];
                            let drow = &mut dst[i * k..(i + 1) * k];
                            for (j, (d, &p)) in drow.iter_mut().zip(prow.iter()).enumerate() {
                                let t = if j == labels[i] { E::ONE } else { E::ZERO };
                                *d = *d + (p - t) * scale;
                            }
                        }
                    }
                }
                OpRecord::Mse { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let n = before[pred.0].value.numel();
                    let scale = grad[0] * E::from_f64(2.0) / E::from_usize(n);
                    if before[pred.0].needs_grad {
                        let pd = before[pred.0].value.data().to_vec();
                        let td = before[target.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[pred.0].grad, n);
                        for ((d, &p), &t) in dst.iter_mut().zip(pd.iter()).zip(td.iter()) {
                            *d = *d + (p - t) * scale;
                        }
                    }
                    if before[target.0].needs_grad {
                        let pd = before[pred.0].value.data().to_vec();
                        let td = before[target.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[target.0].grad, n);
                        for ((d, &p), &t) in dst.iter_mut().zip(pd.iter()).zip(td.iter()) {
                            *d = *d - (p - t) * scale;
                        }
                    }
                }
                OpRecord::DuelingAggregate { value, advantage } => {
                    let (value, advantage) = (*value, *advantage);
                    let as_ = before[advantage.0].value.shape().to_vec();
                    let (n, a_dim) = (as_[0], as_[1]);
                    let inv_a = E::ONE / E::from_usize(a_dim);
                    if before[value.0].needs_grad {
                        let dst = grad_buf(&mut before[value.0].grad, n);
                        for (i, d) in dst.iter_mut().enumerate() {
                            let mut s = E::ZERO;
                            for &g in &grad[i * a_dim..(i + 1) * a_dim] {
                                s = s + g;
                            }
                            *d = *d + s;
                        }
                    }
                    if before[advantage.0].needs_grad {
                        let dst = grad_buf(&mut before[advantage.0].grad, n * a_dim);
                        for i in 0..n {
                            let grow = &grad[i * a_dim..(i + 1) * a_dim];
                            let mut s = E::ZERO;
                            for &g in grow {
                                s = s + g;
                            }
                            let row_mean = s * inv_a;
                            let drow = &mut dst[i * a_dim..(i + 1) * a_dim];
                            for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                                *d = *d + g - row_mean;
                            }
                        }
                    }
                }
                OpRecord::GatherActions { q, actions } => {
                    let q = *q;
                    if before[q.0].needs_grad {
                        let a_dim = before[q.0].value.shape()[1];
                        let actions = actions.clone();
                        let dst = grad_buf(&mut before[q.0].grad, before[q.0].value.numel());
                        for (i, &a) in actions.iter().enumerate() {
                            dst[i * a_dim + a] = dst[i * a_dim + a] + grad[i];
                        }
                    }
                }
                OpRecord::Sum { x } => {
                    let x = *x;
                    if before[x.0].needs_grad {
                        let g = grad[0];
                        let n = before[x.0].value.numel();
                        let dst = grad_buf(&mut before[x.0].grad, n);
                        for d in dst.iter_mut() {
                            *d = *d + g;
                        }
                    }
                }
                OpRecord::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        accumulate(grad_buf(&mut before[a.0].grad, grad.len()), &grad);
                    }
                    if before[b.0].needs_grad {
                        accumulate(grad_buf(&mut before[b.0].grad, grad.len()), &grad);
                    }
                }
                OpRecord::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        let bd = before[b.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[a.0].grad, grad.len());
                        for ((d, &g), &bv) in dst.iter_mut().zip(grad.iter()).zip(bd.iter()) {
                            *d = *d + g * bv;
                        }
                    }
                    if before[b.0].needs_grad {
                        let ad = before[a.0].value.data().to_vec();
                        let dst = grad_buf(&mut before[b.0].grad, grad.len());
                        for ((d, &g), &av) in dst.iter_mut().zip(grad.iter()).zip(ad.iter()) {
                            *d = *d + g * av;
                        }
                    }
                }
                OpRecord::Reshape { x } => {
                    let x = *x;
                    if before[x.0].needs_grad {
                        accumulate(grad_buf(&mut before[x.0].grad, grad.len()), &grad);
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_buf<E: Elem>(slot: &mut Option<Vec<E>>, len: usize) -> &mut [E] {
    slot.get_or_insert_with(|| vec![E::ZERO; len]).as_mut_slice()
}

fn accumulate<E: Elem>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_backward_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(GraphError::GraphConsumed));
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        match g.backward(x) {
            Err(GraphError::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {:?}", other),
        }
    }

    #[test]
    fn relu_clamps_and_masks() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_identity_passes_through() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 2], vec![5.0, -3.0]).unwrap()).unwrap();
        let w = g.param(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -3.0]);
    }

    #[test]
    fn dense_fixed_case() {
        // [[1,2]] * I + [3,4] = [[4,6]]
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = g.param(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let w = g.param(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        assert!(g.dense(x, w, b).is_err());
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 5, 5])).unwrap();
        let w = g.param(Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap());
        let b = g.param(Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap());
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 3, 3]);
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let want = if i < 9 { 0.25 } else { -1.5 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn conv_rejects_non_finite_input() {
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, f64::INFINITY, 0.0, 0.0, 0.0, 0.0]).unwrap_or_else(|_| Tensor::zeros(&[1, 1, 3, 3])));
        // non-finite data is rejected at the input boundary already
        let _ = r;
        let mut g2 = Graph::<f64>::new();
        let bad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(g2.input(bad).is_err());
    }

    #[test]
    fn conv_output_extents_follow_floor_rule() {
        // 128 -> 63 under stride 2
        assert_eq!(ops::conv_out_extent(128, 2), 63);
        assert_eq!(ops::conv_out_extent(63, 2), 31);
        assert_eq!(ops::conv_out_extent(31, 1), 29);
        assert_eq!(ops::conv_out_extent(29, 1), 27);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_vec(&[2, 5], vec![0.7; 10]).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        assert_eq!(
            g.softmax_cross_entropy(logits, &[3]),
            Err(GraphError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn mse_of_identical_tensors_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = g.input(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let loss = g.mse(a, t).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dueling_constant_advantage_returns_value() {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::from_vec(&[2, 1], vec![3.0, -1.0]).unwrap());
        let a = g.param(Tensor::from_vec(&[2, 3], vec![5.0, 5.0, 5.0, 2.0, 2.0, 2.0]).unwrap());
        let q = g.dueling_aggregate(v, a).unwrap();
        assert_eq!(g.value(q).data(), &[3.0, 3.0, 3.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn dueling_fixed_case() {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
        let a = g.param(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let q = g.dueling_aggregate(v, a).unwrap();
        assert_eq!(g.value(q).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn gather_then_mse_matches_td_error_square() {
        // single transition with y - Q = 2 -> loss 4
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 5.0]).unwrap());
        let sel = g.gather_actions(q, &[1]).unwrap();
        let target = g.input(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap()).unwrap();
        let loss = g.mse(sel, target).unwrap();
        assert_eq!(g.value(loss).item(), 4.0);
        g.backward(loss).unwrap();
        // d/dq[1] = 2*(1-3)/1 = -4, others zero
        assert_eq!(g.grad(q).unwrap(), &[0.0, -4.0, 0.0]);
    }
}
