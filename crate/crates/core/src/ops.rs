//! The spatial operator family: vanilla graph convolution, the per-node
//! central-difference reference, its vectorized matrix form, the non-local
//! spatial shift and the shift-based accelerated operator.

use crate::error::{Error, Result};
use crate::graph::{Labeling, PartitionedAdjacency, SkeletonGraph};
use crate::tensor::{broadcast_rowsum, FeatureMap, Matrix};

/// Weights and blend coefficient of one spatial layer.
///
/// Graph operators use one weight matrix per partition subset; the
/// accelerated operator uses a single weight plus a `(vertices x channels)`
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CdgcLayerParams {
    pub weights: Vec<Matrix>,
    pub alpha: f64,
    pub learnable_alpha: bool,
    pub mask: Option<Matrix>,
}

impl CdgcLayerParams {
    pub fn graph(weights: Vec<Matrix>, alpha: f64) -> Self {
        Self {
            weights,
            alpha,
            learnable_alpha: false,
            mask: None,
        }
    }

    /// Accelerated-operator parameters with an all-ones mask.
    pub fn shift(weight: Matrix, vertices: usize, alpha: f64) -> Self {
        let mask = Matrix::ones(vertices, weight.rows());
        Self {
            weights: vec![weight],
            alpha,
            learnable_alpha: false,
            mask: Some(mask),
        }
    }

    pub fn learnable(mut self) -> Self {
        self.learnable_alpha = true;
        self
    }

    /// Trainable scalar count: weights, mask and a learnable alpha.
    pub fn param_count(&self) -> usize {
        let w: usize = self.weights.iter().map(|m| m.as_slice().len()).sum();
        let m = self.mask.as_ref().map_or(0, |m| m.as_slice().len());
        w + m + usize::from(self.learnable_alpha)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.first().map_or(0, Matrix::rows)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.first().map_or(0, Matrix::cols)
    }

    /// Projects alpha back onto `[0, 1]`.
    pub fn clamp_alpha(&mut self) {
        self.alpha = self.alpha.clamp(0.0, 1.0);
    }

    fn check_alpha(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::arg(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    fn check_weights(&self, in_channels: usize) -> Result<()> {
        let first = self
            .weights
            .first()
            .ok_or_else(|| Error::arg("layer has no weight matrices"))?;
        for w in &self.weights {
            if w.rows() != in_channels || w.cols() != first.cols() {
                return Err(Error::dim("layer weights", (in_channels, first.cols()), w.shape()));
            }
        }
        Ok(())
    }
}

fn check_graph_inputs(x: &FeatureMap, adj: &PartitionedAdjacency, params: &CdgcLayerParams) -> Result<()> {
    let s = x.shape();
    if s.vertices != adj.num_vertices() {
        return Err(Error::dim("graph operator vertices", s, adj.num_vertices()));
    }
    if params.weights.len() != adj.num_subsets() {
        return Err(Error::dim(
            "graph operator subsets",
            params.weights.len(),
            adj.num_subsets(),
        ));
    }
    params.check_weights(s.channels)?;
    params.check_alpha()
}

/// `Y = sum_k (A_k X - alpha * Abar_k (.) X) W_k`. With `alpha == 0` the
/// difference term is skipped entirely. Returns the output and, when
/// `keep` is set, the per-subset aggregates `Z_k` the weights multiply.
pub(crate) fn graph_forward(
    x: &FeatureMap,
    adj: &PartitionedAdjacency,
    weights: &[Matrix],
    alpha: f64,
    keep: bool,
) -> Result<(FeatureMap, Vec<FeatureMap>)> {
    let s = x.shape();
    let mut y = FeatureMap::zeros(s.with_channels(weights[0].cols()));
    let mut saved = Vec::new();
    for (k, w) in weights.iter().enumerate() {
        let mut z = x.mix_vertices(adj.subset(k))?;
        if alpha != 0.0 {
            let hat = broadcast_rowsum(&adj.rowsum_matrix(k), s.channels)?;
            let hx = x.hadamard_frame(&hat)?;
            for (zi, &h) in z.as_mut_slice().iter_mut().zip(hx.as_slice()) {
                *zi -= alpha * h;
            }
        }
        z.mix_channels_into(w, &mut y);
        if keep {
            saved.push(z);
        }
    }
    Ok((y, saved))
}

/// Vanilla partitioned graph convolution `Y = sum_k A_k X W_k`, per batch and frame.
pub fn vanilla_gconv(x: &FeatureMap, adj: &PartitionedAdjacency, params: &CdgcLayerParams) -> Result<FeatureMap> {
    check_graph_inputs(x, adj, params)?;
    Ok(graph_forward(x, adj, &params.weights, 0.0, false)?.0)
}

/// Vectorized central-difference graph convolution.
pub fn cdgc_matrix(x: &FeatureMap, adj: &PartitionedAdjacency, params: &CdgcLayerParams) -> Result<FeatureMap> {
    check_graph_inputs(x, adj, params)?;
    Ok(graph_forward(x, adj, &params.weights, params.alpha, false)?.0)
}

/// Per-node central-difference graph convolution, written as the literal
/// blend of difference aggregation and plain aggregation over each labeled
/// neighborhood. Slow; it is the reference the matrix form is checked against.
pub fn cdgc_naive(
    x: &FeatureMap,
    graph: &SkeletonGraph,
    labeling: &Labeling,
    params: &CdgcLayerParams,
) -> Result<FeatureMap> {
    let s = x.shape();
    if s.vertices != graph.num_vertices() || labeling.num_vertices() != graph.num_vertices() {
        return Err(Error::dim("cdgc_naive vertices", s, graph.num_vertices()));
    }
    if params.weights.len() != 3 {
        return Err(Error::dim("cdgc_naive subsets", params.weights.len(), 3));
    }
    params.check_weights(s.channels)?;
    params.check_alpha()?;
    let alpha = params.alpha;
    let c_out = params.out_channels();
    let mut y = FeatureMap::zeros(s.with_channels(c_out));
    for n in 0..s.batch {
        for t in 0..s.frames {
            for i in 0..s.vertices {
                for (j, subset) in labeling.row(i) {
                    let z = labeling.count(i, subset) as f64;
                    let w = &params.weights[subset.index()];
                    for o in 0..c_out {
                        let mut diff = 0.0;
                        let mut plain = 0.0;
                        for c in 0..s.channels {
                            let xi = x.get(n, c, t, i);
                            let xj = x.get(n, c, t, j);
                            diff += w.get(c, o) * (xj - xi);
                            plain += w.get(c, o) * xj;
                        }
                        let acc = y.get(n, o, t, i) + (alpha * diff + (1.0 - alpha) * plain) / z;
                        y.set(n, o, t, i, acc);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Non-local circular shift: `x'[n, c, t, i] = x[n, c, t, (i + c) mod V]`.
pub fn spatial_shift(x: &FeatureMap) -> FeatureMap {
    shift_by(x, 1)
}

/// Inverse of [`spatial_shift`].
pub fn spatial_unshift(x: &FeatureMap) -> FeatureMap {
    shift_by(x, -1)
}

fn shift_by(x: &FeatureMap, dir: isize) -> FeatureMap {
    let s = x.shape();
    let v = s.vertices;
    let mut out = FeatureMap::zeros(s);
    for n in 0..s.batch {
        for c in 0..s.channels {
            let off = (c % v) as isize * dir;
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (sr, dr) in src.chunks_exact(v).zip(dst.chunks_exact_mut(v)) {
                for (i, d) in dr.iter_mut().enumerate() {
                    *d = sr[(i as isize + off).rem_euclid(v as isize) as usize];
                }
            }
        }
    }
    out
}

fn check_shift_inputs(x0: &FeatureMap, params: &CdgcLayerParams) -> Result<()> {
    let s = x0.shape();
    if params.weights.len() != 1 {
        return Err(Error::dim("accelerated_cdgc weights", params.weights.len(), 1));
    }
    params.check_weights(s.channels)?;
    params.check_alpha()?;
    let mask = params
        .mask
        .as_ref()
        .ok_or_else(|| Error::arg("accelerated_cdgc needs a mask"))?;
    if mask.shape() != (s.vertices, s.channels) {
        return Err(Error::dim("accelerated_cdgc mask", mask.shape(), (s.vertices, s.channels)));
    }
    Ok(())
}

/// Shifted-minus-scaled-original features `X - alpha * X0`.
pub(crate) fn shift_difference(x0: &FeatureMap, alpha: f64) -> FeatureMap {
    let mut d = spatial_shift(x0);
    if alpha != 0.0 {
        for (di, &o) in d.as_mut_slice().iter_mut().zip(x0.as_slice()) {
            *di -= alpha * o;
        }
    }
    d
}

/// Accelerated central-difference operator `Y = ((X - alpha * X0) (.) M) W`
/// where `X` is the spatially shifted input and `M` is broadcast over batch
/// and frames.
pub fn accelerated_cdgc(x0: &FeatureMap, params: &CdgcLayerParams) -> Result<FeatureMap> {
    check_shift_inputs(x0, params)?;
    let mask = params.mask.as_ref().expect("checked");
    let d = shift_difference(x0, params.alpha);
    d.hadamard_frame(mask)?.mix_channels(&params.weights[0])
}

/// Center-oriented gradients of an adjacent pair, over every `(n, c, t)`:
/// `(x(v_j) - x(v_i), x(v_i) - x(v_j))`.
pub fn gradient_antisymmetry_probe(
    x: &FeatureMap,
    graph: &SkeletonGraph,
    i: usize,
    j: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    if s.vertices != graph.num_vertices() {
        return Err(Error::dim("gradient_antisymmetry_probe", s, graph.num_vertices()));
    }
    if i >= s.vertices || j >= s.vertices || !graph.is_adjacent(i, j) {
        return Err(Error::arg(format!("vertices {i} and {j} are not adjacent")));
    }
    let mut at_i = Vec::with_capacity(s.batch * s.channels * s.frames);
    let mut at_j = Vec::with_capacity(at_i.capacity());
    for n in 0..s.batch {
        for c in 0..s.channels {
            for t in 0..s.frames {
                let (xi, xj) = (x.get(n, c, t, i), x.get(n, c, t, j));
                at_i.push(xj - xi);
                at_j.push(xi - xj);
            }
        }
    }
    Ok((at_i, at_j))
}
