//! Dense f64 arrays and the kernels the graph operators are built from.
//!
//! [`FeatureMap`] is laid out row-major as `(batch, channels, frames, vertices)`
//! with vertices innermost, so every `(n, c, t)` row is a contiguous vertex
//! vector and every `(n, c)` plane is a contiguous `frames * vertices` slab.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::new", (rows, cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have the same length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", (i, r.len()), cols));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector (`n x 1`).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        hadamard(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            axpy(aik, b.row(k), out_row);
        }
    }
    Ok(out)
}

/// Element-wise product. `b` may match `a` exactly, be an `rows x 1` column
/// (broadcast across columns) or a `1 x 1` scalar.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    if b.shape() == a.shape() {
        for (o, &bv) in out.data.iter_mut().zip(&b.data) {
            *o *= bv;
        }
    } else if b.cols == 1 && b.rows == a.rows {
        for r in 0..a.rows {
            let s = b.data[r];
            for o in &mut out.data[r * a.cols..(r + 1) * a.cols] {
                *o *= s;
            }
        }
    } else if b.shape() == (1, 1) {
        let s = b.data[0];
        for o in &mut out.data {
            *o *= s;
        }
    } else {
        return Err(Error::dim("hadamard", a.shape(), b.shape()));
    }
    Ok(out)
}

/// Broadcasts an `N x 1` row-sum vector to `N x channels`.
pub fn broadcast_rowsum(v: &Matrix, channels: usize) -> Result<Matrix> {
    if v.cols != 1 {
        return Err(Error::dim("broadcast_rowsum", v.shape(), "(N, 1)"));
    }
    if channels < 1 {
        return Err(Error::arg("broadcast_rowsum needs at least one channel"));
    }
    let mut out = Matrix::zeros(v.rows, channels);
    for r in 0..v.rows {
        out.data[r * channels..(r + 1) * channels].fill(v.data[r]);
    }
    Ok(out)
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y += a0 x0 + a1 x1 + a2 x2 + a3 x3`.
#[inline]
pub(crate) fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] += a[0] * x0[i] + a[1] * x1[i] + a[2] * x2[i] + a[3] * x3[i];
    }
}

/// `y += sum_k a[k] x[k]`, four terms per pass over `y`.
pub(crate) fn axpy_many(a: &[f64], x: &[&[f64]], y: &mut [f64]) {
    debug_assert_eq!(a.len(), x.len());
    let mut k = 0;
    while k + 4 <= a.len() {
        axpy4([a[k], a[k + 1], a[k + 2], a[k + 3]], [x[k], x[k + 1], x[k + 2], x[k + 3]], y);
        k += 4;
    }
    for k in k..a.len() {
        axpy(a[k], x[k], y);
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub frames: usize,
    pub vertices: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, frames: usize, vertices: usize) -> Self {
        Self {
            batch,
            channels,
            frames,
            vertices,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.frames * self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn with_frames(self, frames: usize) -> Self {
        Self { frames, ..self }
    }

    /// Length of one `(n, c)` plane.
    pub fn plane(&self) -> usize {
        self.frames * self.vertices
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.frames, self.vertices
        )
    }
}

/// Rank-4 feature tensor `(batch, channels, frames, vertices)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: Shape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.batch == 0 || shape.channels == 0 || shape.frames == 0 || shape.vertices == 0 {
            return Err(Error::arg(format!("feature map shape {shape} has a zero axis")));
        }
        if data.len() != shape.len() {
            return Err(Error::dim("FeatureMap::new", shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for t in 0..shape.frames {
                    for v in 0..shape.vertices {
                        data.push(f(n, c, t, v));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, t: usize, v: usize) -> usize {
        let s = &self.shape;
        ((n * s.channels + c) * s.frames + t) * s.vertices + v
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, t: usize, v: usize) -> f64 {
        self.data[self.index(n, c, t, v)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, v: usize, value: f64) {
        let i = self.index(n, c, t, v);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// One `(vertices x channels)` frame, the `X` of the per-frame graph equations.
    pub fn frame(&self, n: usize, t: usize) -> Matrix {
        let s = self.shape;
        let mut m = Matrix::zeros(s.vertices, s.channels);
        for c in 0..s.channels {
            for v in 0..s.vertices {
                m.set(v, c, self.get(n, c, t, v));
            }
        }
        m
    }

    pub fn set_frame(&mut self, n: usize, t: usize, frame: &Matrix) -> Result<()> {
        let s = self.shape;
        if frame.shape() != (s.vertices, s.channels) {
            return Err(Error::dim("set_frame", frame.shape(), (s.vertices, s.channels)));
        }
        for c in 0..s.channels {
            for v in 0..s.vertices {
                self.set(n, c, t, v, frame.get(v, c));
            }
        }
        Ok(())
    }

    /// Builds a single-sample, single-frame map from a `(vertices x channels)` matrix.
    pub fn from_frame(frame: &Matrix) -> Self {
        let mut out = Self::zeros(Shape::new(1, frame.cols(), 1, frame.rows()));
        out.set_frame(0, 0, frame).expect("shape derived from frame");
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_same(other, "sub")?;
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o -= b;
        }
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.shape, other.shape);
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o += b;
        }
    }

    pub fn scale(&self, s: f64) -> FeatureMap {
        self.map(|v| v * s)
    }

    /// Element-wise product with a same-shape map.
    pub fn hadamard(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_same(other, "hadamard")?;
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o *= b;
        }
        Ok(out)
    }

    /// Element-wise product with a `(vertices x channels)` matrix broadcast
    /// over batch and frames. This is how the row-sum matrix and the shift
    /// mask are applied.
    pub fn hadamard_frame(&self, m: &Matrix) -> Result<FeatureMap> {
        let s = self.shape;
        if m.shape() != (s.vertices, s.channels) {
            return Err(Error::dim("hadamard_frame", s, m.shape()));
        }
        let mut out = self.clone();
        for n in 0..s.batch {
            for c in 0..s.channels {
                let plane = out.plane_mut(n, c);
                for row in plane.chunks_exact_mut(s.vertices) {
                    for (v, x) in row.iter_mut().enumerate() {
                        *x *= m.get(v, c);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `y[.., i] = sum_j a[i][j] * x[.., j]` on every `(n, c, t)` row.
    pub fn mix_vertices(&self, a: &Matrix) -> Result<FeatureMap> {
        let v = self.shape.vertices;
        if a.shape() != (v, v) {
            return Err(Error::dim("mix_vertices", self.shape, a.shape()));
        }
        let mut out = FeatureMap::zeros(self.shape);
        for (xr, yr) in self
            .data
            .chunks_exact(v)
            .zip(out.data.chunks_exact_mut(v))
        {
            for (i, y) in yr.iter_mut().enumerate() {
                *y = dot(a.row(i), xr);
            }
        }
        Ok(out)
    }

    /// `y[.., v] = s[v] * x[.., v]`.
    pub fn scale_vertices(&self, s: &[f64]) -> Result<FeatureMap> {
        if s.len() != self.shape.vertices {
            return Err(Error::dim("scale_vertices", self.shape, s.len()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(s.len()) {
            for (x, &k) in row.iter_mut().zip(s) {
                *x *= k;
            }
        }
        Ok(out)
    }

    /// Pointwise channel map: `y[n, o, t, v] = sum_c w[c][o] * x[n, c, t, v]`.
    pub fn mix_channels(&self, w: &Matrix) -> Result<FeatureMap> {
        let s = self.shape;
        if w.rows() != s.channels {
            return Err(Error::dim("mix_channels", s, w.shape()));
        }
        let mut out = FeatureMap::zeros(s.with_channels(w.cols()));
        self.mix_channels_into(w, &mut out);
        Ok(out)
    }

    pub(crate) fn mix_channels_into(&self, w: &Matrix, out: &mut FeatureMap) {
        let s = self.shape;
        let wt = w.transpose();
        for n in 0..s.batch {
            let xs: Vec<&[f64]> = (0..s.channels).map(|c| self.plane(n, c)).collect();
            for o in 0..w.cols() {
                axpy_many(wt.row(o), &xs, out.plane_mut(n, o));
            }
        }
    }

    /// Gradient of [`mix_channels`](Self::mix_channels) with respect to its
    /// weight: `dw[c][o] = sum_{n,t,v} x[n,c,t,v] * dy[n,o,t,v]`.
    pub(crate) fn channel_outer(&self, dy: &FeatureMap) -> Matrix {
        let s = self.shape;
        let co = dy.shape.channels;
        let mut dw = Matrix::zeros(s.channels, co);
        for n in 0..s.batch {
            for c in 0..s.channels {
                let x = self.plane(n, c);
                for o in 0..co {
                    let acc = dw.get(c, o) + dot(x, dy.plane(n, o));
                    dw.set(c, o, acc);
                }
            }
        }
        dw
    }

    /// `out[v][c] = sum_{n,t} self[n,c,t,v] * other[n,c,t,v]`.
    pub(crate) fn frame_outer(&self, other: &FeatureMap) -> Matrix {
        let s = self.shape;
        let mut m = Matrix::zeros(s.vertices, s.channels);
        for n in 0..s.batch {
            for c in 0..s.channels {
                let (a, b) = (self.plane(n, c), other.plane(n, c));
                for (ra, rb) in a.chunks_exact(s.vertices).zip(b.chunks_exact(s.vertices)) {
                    for v in 0..s.vertices {
                        let acc = m.get(v, c) + ra[v] * rb[v];
                        m.set(v, c, acc);
                    }
                }
            }
        }
        m
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &FeatureMap) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::arg("cannot stack an empty list of feature maps"))?;
        let inner = Shape { batch: 1, ..first.shape };
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
        let mut batch = 0;
        for m in maps {
            if (Shape { batch: 1, ..m.shape }) != inner {
                return Err(Error::dim("stack", first.shape, m.shape));
            }
            batch += m.shape.batch;
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            shape: Shape { batch, ..inner },
            data,
        })
    }

    /// Sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> FeatureMap {
        let s = self.shape;
        let per = s.channels * s.plane();
        FeatureMap {
            shape: Shape { batch: 1, ..s },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Per-channel mean and biased variance over `(batch, frames, vertices)`.
pub fn channel_stats(x: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.batch * s.plane()) as f64;
    let mut mean = vec![0.0; s.channels];
    let mut var = vec![0.0; s.channels];
    for (c, m) in mean.iter_mut().enumerate() {
        let total: f64 = (0..s.batch).map(|n| x.plane(n, c).iter().sum::<f64>()).sum();
        *m = total / count;
    }
    for (c, v) in var.iter_mut().enumerate() {
        let m = mean[c];
        let total: f64 = (0..s.batch)
            .map(|n| x.plane(n, c).iter().map(|&e| (e - m) * (e - m)).sum::<f64>())
            .sum();
        *v = total / count;
    }
    (mean, var)
}

/// Training-mode batch normalization with per-channel affine parameters.
pub fn batchnorm_forward(x: &FeatureMap, gamma: &[f64], beta: &[f64], eps: f64) -> Result<FeatureMap> {
    let (mean, var) = channel_stats(x);
    batchnorm_with_stats(x, &mean, &var, gamma, beta, eps)
}

/// Batch normalization against supplied statistics (running stats in eval mode).
pub fn batchnorm_with_stats(
    x: &FeatureMap,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<FeatureMap> {
    if !(eps > 0.0) {
        return Err(Error::arg(format!("batchnorm eps must be positive, got {eps}")));
    }
    let s = x.shape();
    for (name, len) in [("mean", mean.len()), ("var", var.len()), ("gamma", gamma.len()), ("beta", beta.len())] {
        if len != s.channels {
            return Err(Error::Dimension {
                op: "batchnorm",
                left: format!("{s}"),
                right: format!("{name} of length {len}"),
            });
        }
    }
    let mut out = x.clone();
    for c in 0..s.channels {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let (g, b, m) = (gamma[c], beta[c], mean[c]);
        for n in 0..s.batch {
            for e in out.plane_mut(n, c) {
                *e = (*e - m) * inv * g + b;
            }
        }
    }
    Ok(out)
}
