use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::PartitionedAdjacency;
use crate::ops::{graph_forward, shift_difference, spatial_unshift};
use crate::tensor::{axpy_many, broadcast_rowsum, channel_stats, dot, FeatureMap, Matrix};

/// A value held on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Map(FeatureMap),
    Mat(Matrix),
    Scalar(f64),
}

impl Value {
    pub fn as_map(&self) -> Option<&FeatureMap> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_mat(&self) -> Option<&Matrix> {
        match self {
            Value::Mat(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Value::Map(m) => m.as_slice(),
            Value::Mat(m) => m.as_slice(),
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Value::Map(m) => m.as_mut_slice(),
            Value::Mat(m) => m.as_mut_slice(),
            Value::Scalar(s) => std::slice::from_mut(s),
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Map(m) => Value::Map(FeatureMap::zeros(m.shape())),
            Value::Mat(m) => Value::Mat(Matrix::zeros(m.rows(), m.cols())),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }

    pub fn same_shape(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Map(a), Value::Map(b)) => a.shape() == b.shape(),
            (Value::Mat(a), Value::Mat(b)) => a.shape() == b.shape(),
            (Value::Scalar(_), Value::Scalar(_)) => true,
            _ => false,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Value::Map(m) => format!("map {}", m.shape()),
            Value::Mat(m) => format!("matrix {:?}", m.shape()),
            Value::Scalar(_) => "scalar".into(),
        }
    }

    fn accumulate(&mut self, other: &Value) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }
}

impl From<FeatureMap> for Value {
    fn from(m: FeatureMap) -> Self {
        Value::Map(m)
    }
}

impl From<Matrix> for Value {
    fn from(m: Matrix) -> Self {
        Value::Mat(m)
    }
}

impl From<f64> for Value {
    fn from(s: f64) -> Self {
        Value::Scalar(s)
    }
}

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Graph {
        x: Var,
        weights: Vec<Var>,
        alpha: Option<Var>,
        adj: Arc<PartitionedAdjacency>,
        aggregates: Vec<FeatureMap>,
    },
    Shift {
        x: Var,
        weight: Var,
        mask: Var,
        alpha: Var,
        diff: FeatureMap,
        masked: FeatureMap,
    },
    MixChannels {
        x: Var,
        w: Var,
    },
    TemporalShift {
        x: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
        kernel: usize,
    },
    Subsample {
        x: Var,
        stride: usize,
        frames: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: FeatureMap,
        inv_std: Vec<f64>,
    },
    BatchNormFrozen,
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Pool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Value,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Graph { .. } => "graph",
            Op::Shift { .. } => "shift",
            Op::MixChannels { .. } => "mix_channels",
            Op::TemporalShift { .. } => "temporal_shift",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::Subsample { .. } => "subsample",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormFrozen => "batch_norm_frozen",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Pool { .. } => "pool",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Record of a forward pass. Each primitive stores what its backward needs;
/// [`GradientTape::backward`] walks the record once, newest first.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn map(&self, v: Var) -> Result<&FeatureMap> {
        self.value(v)
            .as_map()
            .ok_or_else(|| Error::arg(format!("expected a feature map, got {}", self.value(v).describe())))
    }

    pub fn mat(&self, v: Var) -> Result<&Matrix> {
        self.value(v)
            .as_mat()
            .ok_or_else(|| Error::arg(format!("expected a matrix, got {}", self.value(v).describe())))
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v)
            .as_scalar()
            .ok_or_else(|| Error::arg(format!("expected a scalar, got {}", self.value(v).describe())))
    }

    pub fn leaf(&mut self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Leaf)
    }

    /// `sum_k A_k X W_k`.
    pub fn vanilla_gconv(&mut self, x: Var, weights: &[Var], adj: &Arc<PartitionedAdjacency>) -> Result<Var> {
        self.graph_op(x, weights, None, adj)
    }

    /// `sum_k (A_k X - alpha * Abar_k (.) X) W_k`.
    pub fn cdgc_matrix(&mut self, x: Var, weights: &[Var], alpha: Var, adj: &Arc<PartitionedAdjacency>) -> Result<Var> {
        self.graph_op(x, weights, Some(alpha), adj)
    }

    fn graph_op(&mut self, x: Var, weights: &[Var], alpha: Option<Var>, adj: &Arc<PartitionedAdjacency>) -> Result<Var> {
        let xv = self.map(x)?;
        if weights.len() != adj.num_subsets() {
            return Err(Error::dim("graph op subsets", weights.len(), adj.num_subsets()));
        }
        if xv.shape().vertices != adj.num_vertices() {
            return Err(Error::dim("graph op vertices", xv.shape(), adj.num_vertices()));
        }
        let ws = weights.iter().map(|&w| self.mat(w).cloned()).collect::<Result<Vec<_>>>()?;
        let cout = ws[0].cols();
        for w in &ws {
            if w.rows() != xv.shape().channels || w.cols() != cout {
                return Err(Error::dim("graph op weights", xv.shape(), w.shape()));
            }
        }
        let a = match alpha {
            Some(a) => self.scalar(a)?,
            None => 0.0,
        };
        let (y, aggregates) = graph_forward(xv, adj, &ws, a, true)?;
        Ok(self.push(
            y.into(),
            Op::Graph {
                x,
                weights: weights.to_vec(),
                alpha,
                adj: Arc::clone(adj),
                aggregates,
            },
        ))
    }

    /// `((shift(X0) - alpha * X0) (.) M) W`.
    pub fn accelerated_cdgc(&mut self, x: Var, weight: Var, mask: Var, alpha: Var) -> Result<Var> {
        let xv = self.map(x)?;
        let s = xv.shape();
        let w = self.mat(weight)?;
        let m = self.mat(mask)?;
        if w.rows() != s.channels {
            return Err(Error::dim("accelerated weight", s, w.shape()));
        }
        if m.shape() != (s.vertices, s.channels) {
            return Err(Error::dim("accelerated mask", s, m.shape()));
        }
        let a = self.scalar(alpha)?;
        let diff = shift_difference(xv, a);
        let masked = diff.hadamard_frame(m)?;
        let y = masked.mix_channels(w)?;
        Ok(self.push(
            y.into(),
            Op::Shift {
                x,
                weight,
                mask,
                alpha,
                diff,
                masked,
            },
        ))
    }

    /// Pointwise channel map, `w` shaped `(in, out)`.
    pub fn mix_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = self.map(x)?.mix_channels(self.mat(w)?)?;
        Ok(self.push(y.into(), Op::MixChannels { x, w }))
    }

    /// Channel-grouped temporal shift: the first third of the channels reads
    /// frame `t + 1`, the last third frame `t - 1`, the rest frame `t`;
    /// out-of-range frames read zero.
    pub fn temporal_shift(&mut self, x: Var) -> Result<Var> {
        let y = temporal_shift(self.map(x)?, false);
        Ok(self.push(y.into(), Op::TemporalShift { x }))
    }

    /// Zero-padded temporal convolution with an odd `kernel`; `w` is
    /// `(kernel * in, out)` with row `k * in + c`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, kernel: usize) -> Result<Var> {
        let xv = self.map(x)?;
        let wv = self.mat(w)?;
        if kernel % 2 == 0 {
            return Err(Error::arg(format!("temporal kernel must be odd, got {kernel}")));
        }
        if wv.rows() != kernel * xv.shape().channels {
            return Err(Error::dim("temporal_conv weight", xv.shape(), wv.shape()));
        }
        let y = temporal_conv(xv, wv, kernel);
        Ok(self.push(y.into(), Op::TemporalConv { x, w, kernel }))
    }

    /// Keeps every `stride`-th frame starting at frame 0.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        let xv = self.map(x)?;
        let frames = xv.shape().frames;
        if stride == 1 {
            return Ok(x);
        }
        let y = subsample(xv, stride);
        Ok(self.push(y.into(), Op::Subsample { x, stride, frames }))
    }

    /// Training-mode batch norm; returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.map(x)?;
        let s = xv.shape();
        let g = self.mat(gamma)?.as_slice().to_vec();
        let b = self.mat(beta)?.as_slice().to_vec();
        if g.len() != s.channels || b.len() != s.channels {
            return Err(Error::dim("batch_norm affine", s, (g.len(), b.len())));
        }
        if !(eps > 0.0) {
            return Err(Error::arg(format!("batchnorm eps must be positive, got {eps}")));
        }
        let (mean, var) = channel_stats(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = xv.clone();
        for c in 0..s.channels {
            for n in 0..s.batch {
                for e in normalized.plane_mut(n, c) {
                    *e = (*e - mean[c]) * inv_std[c];
                }
            }
        }
        let mut y = normalized.clone();
        for c in 0..s.channels {
            for n in 0..s.batch {
                for e in y.plane_mut(n, c) {
                    *e = *e * g[c] + b[c];
                }
            }
        }
        let var_out = self.push(
            y.into(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        );
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm against fixed statistics. It has no
    /// gradient path; backpropagating through it is an error.
    pub fn batch_norm_frozen(&mut self, x: Var, gamma: &[f64], beta: &[f64], stats: &BatchStats, eps: f64) -> Result<Var> {
        let y = crate::tensor::batchnorm_with_stats(self.map(x)?, &stats.mean, &stats.var, gamma, beta, eps)?;
        Ok(self.push(y.into(), Op::BatchNormFrozen))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = crate::tensor::relu(self.map(x)?);
        Ok(self.push(y.into(), Op::Relu { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::dim("add", av.describe(), bv.describe()));
        }
        let mut y = av.clone();
        y.accumulate(bv);
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Global average over frames and vertices: `(N, C, T, V) -> N x C`.
    pub fn global_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.map(x)?;
        let s = xv.shape();
        let denom = s.plane() as f64;
        let mut y = Matrix::zeros(s.batch, s.channels);
        for n in 0..s.batch {
            for c in 0..s.channels {
                y.set(n, c, xv.plane(n, c).iter().sum::<f64>() / denom);
            }
        }
        Ok(self.push(y.into(), Op::Pool { x }))
    }

    /// `x W + b` for `x: N x C`, `w: C x K`, `b: 1 x K`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.mat(x)?, self.mat(w)?, self.mat(b)?);
        if bv.shape() != (1, wv.cols()) {
            return Err(Error::dim("linear bias", wv.shape(), bv.shape()));
        }
        let mut y = xv.matmul(wv)?;
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let v = y.get(r, c) + bv.get(0, c);
                y.set(r, c, v);
            }
        }
        Ok(self.push(y.into(), Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.mat(logits)?;
        if labels.len() != lv.rows() {
            return Err(Error::dim("cross_entropy labels", lv.shape(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::arg(format!("label {bad} out of range for {} classes", lv.cols())));
        }
        let probs = softmax_rows(lv);
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -log_softmax_at(lv.row(r), l))
            .sum::<f64>()
            / n;
        Ok(self.push(
            loss.into(),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).as_slice().iter().sum();
        self.push(s.into(), Op::Sum { x })
    }

    /// `sum(x (.) weights)` for a fixed same-shape `weights`.
    pub fn dot(&mut self, x: Var, weights: Value) -> Result<Var> {
        let xv = self.value(x);
        if !xv.same_shape(&weights) {
            return Err(Error::dim("dot", xv.describe(), weights.describe()));
        }
        let s = dot(xv.as_slice(), weights.as_slice());
        Ok(self.push(s.into(), Op::Dot { x, weights }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).as_scalar().is_none() {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got {}",
                self.value(loss).describe()
            )));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Value::Scalar(1.0));
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            self.backward_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node, dy: &Value, grads: &mut [Option<Value>]) -> Result<()> {
        let mut acc = |v: Var, g: Value| match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        };
        let dy_map = || dy.as_map().expect("map gradient");
        match &node.op {
            Op::Leaf => {}
            Op::Graph {
                x,
                weights,
                alpha,
                adj,
                aggregates,
            } => {
                let dy = dy_map();
                let xv = self.map(*x)?;
                let a = match alpha {
                    Some(a) => self.scalar(*a)?,
                    None => 0.0,
                };
                let channels = xv.shape().channels;
                let mut dx = FeatureMap::zeros(xv.shape());
                let mut dalpha = 0.0;
                for (k, &w) in weights.iter().enumerate() {
                    let wv = self.mat(w)?;
                    acc(w, aggregates[k].channel_outer(dy).into());
                    let dz = dy.mix_channels(&wv.transpose())?;
                    dx.add_assign(&dz.mix_vertices(&adj.subset(k).transpose())?);
                    if alpha.is_some() {
                        let hx = xv.hadamard_frame(&broadcast_rowsum(&adj.rowsum_matrix(k), channels)?)?;
                        dalpha -= dot(hx.as_slice(), dz.as_slice());
                        if a != 0.0 {
                            let hdz = dz.scale_vertices(adj.rowsum(k))?;
                            for (d, &h) in dx.as_mut_slice().iter_mut().zip(hdz.as_slice()) {
                                *d -= a * h;
                            }
                        }
                    }
                }
                acc(*x, dx.into());
                if let Some(a) = alpha {
                    acc(*a, dalpha.into());
                }
            }
            Op::Shift {
                x,
                weight,
                mask,
                alpha,
                diff,
                masked,
            } => {
                let dy = dy_map();
                let wv = self.mat(*weight)?;
                let mv = self.mat(*mask)?;
                let a = self.scalar(*alpha)?;
                acc(*weight, masked.channel_outer(dy).into());
                let dmasked = dy.mix_channels(&wv.transpose())?;
                acc(*mask, diff.frame_outer(&dmasked).into());
                let ddiff = dmasked.hadamard_frame(mv)?;
                let x0 = self.map(*x)?;
                acc(*alpha, (-dot(x0.as_slice(), ddiff.as_slice())).into());
                let mut dx = spatial_unshift(&ddiff);
                if a != 0.0 {
                    for (d, &g) in dx.as_mut_slice().iter_mut().zip(ddiff.as_slice()) {
                        *d -= a * g;
                    }
                }
                acc(*x, dx.into());
            }
            Op::MixChannels { x, w } => {
                let dy = dy_map();
                let wv = self.mat(*w)?;
                acc(*w, self.map(*x)?.channel_outer(dy).into());
                acc(*x, dy.mix_channels(&wv.transpose())?.into());
            }
            Op::TemporalShift { x } => acc(*x, temporal_shift(dy_map(), true).into()),
            Op::TemporalConv { x, w, kernel } => {
                let (dx, dw) = temporal_conv_backward(self.map(*x)?, self.mat(*w)?, *kernel, dy_map());
                acc(*w, dw.into());
                acc(*x, dx.into());
            }
            Op::Subsample { x, stride, frames } => {
                let dy = dy_map();
                let s = dy.shape().with_frames(*frames);
                let mut dx = FeatureMap::zeros(s);
                let v = s.vertices;
                for n in 0..s.batch {
                    for c in 0..s.channels {
                        let src = dy.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for (tp, row) in src.chunks_exact(v).enumerate() {
                            let t = tp * stride;
                            dst[t * v..(t + 1) * v].copy_from_slice(row);
                        }
                    }
                }
                acc(*x, dx.into());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let dy = dy_map();
                let s = dy.shape();
                let g = self.mat(*gamma)?;
                let count = (s.batch * s.plane()) as f64;
                let mut dgamma = Matrix::zeros(g.rows(), g.cols());
                let mut dbeta = Matrix::zeros(g.rows(), g.cols());
                let mut dx = FeatureMap::zeros(s);
                for c in 0..s.channels {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for n in 0..s.batch {
                        sum_dy += dy.plane(n, c).iter().sum::<f64>();
                        sum_dy_xhat += dot(dy.plane(n, c), normalized.plane(n, c));
                    }
                    dgamma.as_mut_slice()[c] = sum_dy_xhat;
                    dbeta.as_mut_slice()[c] = sum_dy;
                    let scale = g.as_slice()[c] * inv_std[c] / count;
                    for n in 0..s.batch {
                        let (d, xh) = (dy.plane(n, c), normalized.plane(n, c));
                        for ((o, &di), &xi) in dx.plane_mut(n, c).iter_mut().zip(d).zip(xh) {
                            *o = scale * (count * di - sum_dy - xi * sum_dy_xhat);
                        }
                    }
                }
                acc(*gamma, dgamma.into());
                acc(*beta, dbeta.into());
                acc(*x, dx.into());
            }
            Op::BatchNormFrozen => {
                return Err(Error::arg(
                    "inference-mode batch norm has no gradient path; use training mode",
                ))
            }
            Op::Relu { x } => {
                let xv = self.map(*x)?;
                let mut dx = dy_map().clone();
                for (d, &xi) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx.into());
            }
            Op::Add { a, b } => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Pool { x } => {
                let dy = dy.as_mat().expect("matrix gradient");
                let s = self.map(*x)?.shape();
                let denom = s.plane() as f64;
                let mut dx = FeatureMap::zeros(s);
                for n in 0..s.batch {
                    for c in 0..s.channels {
                        dx.plane_mut(n, c).fill(dy.get(n, c) / denom);
                    }
                }
                acc(*x, dx.into());
            }
            Op::Linear { x, w, b } => {
                let dy = dy.as_mat().expect("matrix gradient");
                let (xv, wv) = (self.mat(*x)?, self.mat(*w)?);
                acc(*x, dy.matmul(&wv.transpose())?.into());
                acc(*w, xv.transpose().matmul(dy)?.into());
                let mut db = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        let v = db.get(0, c) + dy.get(r, c);
                        db.set(0, c, v);
                    }
                }
                acc(*b, db.into());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = dy.as_scalar().expect("scalar gradient") / labels.len() as f64;
                let mut dl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = dl.get(r, l) - 1.0;
                    dl.set(r, l, v);
                }
                for e in dl.as_mut_slice() {
                    *e *= scale;
                }
                acc(*logits, dl.into());
            }
            Op::Sum { x } => {
                let s = dy.as_scalar().expect("scalar gradient");
                let mut dx = self.value(*x).zeros_like();
                dx.as_mut_slice().fill(s);
                acc(*x, dx);
            }
            Op::Dot { x, weights } => {
                let s = dy.as_scalar().expect("scalar gradient");
                let mut dx = weights.clone();
                for e in dx.as_mut_slice() {
                    *e *= s;
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled like `primal` when the loss ignores it.
    pub fn get_or_zero(&self, v: Var, primal: &Value) -> Value {
        self.get(v).cloned().unwrap_or_else(|| primal.zeros_like())
    }

    /// Node indices in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = &mut out.as_mut_slice()[r * logits.cols()..(r + 1) * logits.cols()];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            total += *e;
        }
        for e in row.iter_mut() {
            *e /= total;
        }
    }
    out
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

fn shift_offsets(channels: usize) -> impl Fn(usize) -> isize {
    let third = channels / 3;
    move |c| {
        if c < third {
            1
        } else if c >= channels - third {
            -1
        } else {
            0
        }
    }
}

/// `y[t] = x[t + off_c]` with zero padding; `inverse` applies `-off_c`.
pub(crate) fn temporal_shift(x: &FeatureMap, inverse: bool) -> FeatureMap {
    let s = x.shape();
    let offset = shift_offsets(s.channels);
    let (t_len, v) = (s.frames as isize, s.vertices);
    let mut out = FeatureMap::zeros(s);
    for c in 0..s.channels {
        let off = if inverse { -offset(c) } else { offset(c) };
        let t0 = (-off).max(0);
        let t1 = (t_len - off).min(t_len);
        if t1 <= t0 {
            continue;
        }
        let (d0, d1) = (t0 as usize * v, t1 as usize * v);
        let (s0, s1) = ((t0 + off) as usize * v, (t1 + off) as usize * v);
        for n in 0..s.batch {
            let src = x.plane(n, c)[s0..s1].to_vec();
            out.plane_mut(n, c)[d0..d1].copy_from_slice(&src);
        }
    }
    out
}

fn conv_range(frames: usize, off: isize) -> Option<(usize, usize)> {
    let t = frames as isize;
    let t0 = (-off).max(0);
    let t1 = (t - off).min(t);
    (t1 > t0).then_some((t0 as usize, t1 as usize))
}

pub(crate) fn temporal_conv(x: &FeatureMap, w: &Matrix, kernel: usize) -> FeatureMap {
    let s = x.shape();
    let (cin, cout, v) = (s.channels, w.cols(), s.vertices);
    let pad = (kernel / 2) as isize;
    let wt = w.transpose();
    let mut y = FeatureMap::zeros(s.with_channels(cout));
    for k in 0..kernel {
        let off = k as isize - pad;
        let Some((t0, t1)) = conv_range(s.frames, off) else { continue };
        let src = (t0 as isize + off) as usize * v;
        let len = (t1 - t0) * v;
        for n in 0..s.batch {
            let xs: Vec<&[f64]> = (0..cin).map(|c| &x.plane(n, c)[src..src + len]).collect();
            for o in 0..cout {
                let taps = &wt.row(o)[k * cin..(k + 1) * cin];
                axpy_many(taps, &xs, &mut y.plane_mut(n, o)[t0 * v..t0 * v + len]);
            }
        }
    }
    y
}

fn temporal_conv_backward(x: &FeatureMap, w: &Matrix, kernel: usize, dy: &FeatureMap) -> (FeatureMap, Matrix) {
    let s = x.shape();
    let (cin, cout, v) = (s.channels, w.cols(), s.vertices);
    let pad = (kernel / 2) as isize;
    let mut dx = FeatureMap::zeros(s);
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    for k in 0..kernel {
        let off = k as isize - pad;
        let Some((t0, t1)) = conv_range(s.frames, off) else { continue };
        let src = (t0 as isize + off) as usize * v;
        let len = (t1 - t0) * v;
        for n in 0..s.batch {
            let ds: Vec<&[f64]> = (0..cout).map(|o| &dy.plane(n, o)[t0 * v..t0 * v + len]).collect();
            for c in 0..cin {
                let row = k * cin + c;
                let xs = &x.plane(n, c)[src..src + len];
                for (o, d) in ds.iter().enumerate() {
                    let g = dw.get(row, o) + dot(xs, d);
                    dw.set(row, o, g);
                }
                axpy_many(w.row(row), &ds, &mut dx.plane_mut(n, c)[src..src + len]);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn subsample(x: &FeatureMap, stride: usize) -> FeatureMap {
    let s = x.shape();
    let frames = s.frames.div_ceil(stride);
    let v = s.vertices;
    let mut y = FeatureMap::zeros(s.with_frames(frames));
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for tp in 0..frames {
                let t = tp * stride;
                dst[tp * v..(tp + 1) * v].copy_from_slice(&src[t * v..(t + 1) * v]);
            }
        }
    }
    y
}
