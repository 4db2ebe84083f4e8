//! Dense f32 matrix primitives, rotary position tables and the online-softmax
//! state shared by the attention kernels.
//!
//! Everything here is out-of-place and deterministic: matrix products always
//! accumulate the inner dimension sequentially in index order, so two calls
//! on the same inputs are bit-identical regardless of thread or platform
//! scheduling.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use thiserror::Error;

/// Logit substituted for causally masked positions.
pub const MASKED_LOGIT: f32 = -1e30;

/// Conventional RoPE frequency base.
pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix data has {len} values, expected {rows}x{cols}")]
    BadData { rows: usize, cols: usize, len: usize },
    #[error("head_dim must be even and non-zero, got {0}")]
    OddHeadDim(usize),
    #[error("position {position} exceeds rope table capacity {max_positions}")]
    PositionOverflow { position: usize, max_positions: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Row-major dense matrix of f32 values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadData { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::BadData { rows: rows.len(), cols, len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Uniform random entries in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, lo: f32, hi: f32) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView { data: &self.data, rows: self.rows, cols: self.cols, stride: self.cols, offset: 0 }
    }

    /// Matrix product with sequential inner accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul_view(self.view(), other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row slice {range:?} out of {} rows", self.rows);
        Matrix { rows: range.len(), cols: self.cols, data: self.data[range.start * self.cols..range.end * self.cols].to_vec() }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols, "col slice {range:?} out of {} cols", self.cols);
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Matrix { rows: self.rows, cols: range.len(), data }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(NumericsError::ShapeMismatch { op: "hcat", left: self.shape(), right: other.shape() });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix { rows: self.rows, cols: self.cols + other.cols, data })
    }

    /// Vertical concatenation.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(NumericsError::ShapeMismatch { op: "vcat", left: self.shape(), right: other.shape() });
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `||self - reference||_F / ||reference||_F`, with an absolute fallback
    /// when the reference is (near) zero.
    pub fn rel_error(&self, reference: &Matrix) -> f64 {
        assert_eq!(self.shape(), reference.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius();
        if norm < 1e-30 {
            diff
        } else {
            diff / norm
        }
    }

    fn check_same(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        self.check_same(op, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Borrowed strided window into row-major storage. Rows are `stride` apart and
/// each row starts `offset` values past its row origin.
#[derive(Clone, Copy, Debug)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    stride: usize,
    offset: usize,
}

impl<'a> MatrixView<'a> {
    /// Wraps `rows` rows of width `cols` starting at `data[offset]`, each row
    /// `stride` values apart.
    pub fn new(data: &'a [f32], rows: usize, cols: usize, stride: usize, offset: usize) -> Result<Self> {
        if cols > 0 && rows > 0 && offset + (rows - 1) * stride + cols > data.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "view {rows}x{cols} (stride {stride}, offset {offset}) exceeds {} values",
                data.len()
            )));
        }
        Ok(Self { data, rows, cols, stride, offset })
    }

    /// A view with no columns, used for layouts without a residual component.
    pub fn empty(rows: usize) -> MatrixView<'static> {
        MatrixView { data: &[], rows, cols: 0, stride: 0, offset: 0 }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &'a [f32] {
        let start = self.offset + r * self.stride;
        &self.data[start..start + self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[self.offset + r * self.stride + c]
    }

    pub fn narrow_cols(&self, start: usize, width: usize) -> MatrixView<'a> {
        assert!(start + width <= self.cols, "column window {start}+{width} exceeds {}", self.cols);
        MatrixView { data: self.data, rows: self.rows, cols: width, stride: self.stride, offset: self.offset + start }
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> MatrixView<'a> {
        assert!(start + len <= self.rows, "row window {start}+{len} exceeds {}", self.rows);
        if self.cols == 0 {
            return MatrixView { data: self.data, rows: len, cols: 0, stride: self.stride, offset: self.offset };
        }
        MatrixView { data: self.data, rows: len, cols: self.cols, stride: self.stride, offset: self.offset + start * self.stride }
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: self.rows, cols: self.cols, data }
    }
}

/// `a · b` where `a` is a borrowed view. Loop order is i-k-j, which keeps the
/// per-element accumulation sequential over k.
pub fn matmul_view(a: MatrixView<'_>, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows {
        return Err(NumericsError::ShapeMismatch { op: "matmul", left: (a.rows(), a.cols()), right: b.shape() });
    }
    let n = b.cols;
    let mut out = Matrix::zeros(a.rows(), n);
    for i in 0..a.rows() {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Precomputed sin/cos tables for rotary position embeddings.
#[derive(Clone, Debug)]
pub struct RopeTable {
    max_positions: usize,
    head_dim: usize,
    theta: f64,
    sin: Vec<f32>,
    cos: Vec<f32>,
}

impl RopeTable {
    /// `sin[p][j] = sin(p * theta^(-2j/head_dim))`, likewise for cos.
    pub fn new(max_positions: usize, head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(NumericsError::OddHeadDim(head_dim));
        }
        if max_positions == 0 {
            return Err(NumericsError::InvalidArgument("max_positions must be >= 1".into()));
        }
        if theta.is_nan() || theta <= 0.0 || !theta.is_finite() {
            return Err(NumericsError::InvalidArgument(format!("theta must be positive, got {theta}")));
        }
        let half = head_dim / 2;
        let mut sin = Vec::with_capacity(max_positions * half);
        let mut cos = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for j in 0..half {
                let inv_freq = theta.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = p as f64 * inv_freq;
                sin.push(angle.sin() as f32);
                cos.push(angle.cos() as f32);
            }
        }
        Ok(Self { max_positions, head_dim, theta, sin, cos })
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    #[inline]
    pub fn sin(&self, pos: usize, j: usize) -> f32 {
        self.sin[pos * self.head_dim / 2 + j]
    }

    #[inline]
    pub fn cos(&self, pos: usize, j: usize) -> f32 {
        self.cos[pos * self.head_dim / 2 + j]
    }

    fn check_position(&self, pos: usize) -> Result<()> {
        if pos >= self.max_positions {
            return Err(NumericsError::PositionOverflow { position: pos, max_positions: self.max_positions });
        }
        Ok(())
    }

    /// Rotates one `head_dim`-wide slice in place. `inverse` negates angles.
    #[inline]
    pub fn rotate_slice(&self, slice: &mut [f32], pos: usize, inverse: bool) {
        let half = self.head_dim / 2;
        let base = pos * half;
        for j in 0..half {
            let (s, c) = (self.sin[base + j], self.cos[base + j]);
            let s = if inverse { -s } else { s };
            let x0 = slice[2 * j];
            let x1 = slice[2 * j + 1];
            slice[2 * j] = x0 * c - x1 * s;
            slice[2 * j + 1] = x0 * s + x1 * c;
        }
    }
}

/// Free-function form of [`RopeTable::new`].
pub fn build_rope_table(max_positions: usize, head_dim: usize, theta: f64) -> Result<RopeTable> {
    RopeTable::new(max_positions, head_dim, theta)
}

fn rope_impl(x: &Matrix, positions: &[usize], table: &RopeTable, head_dim: usize, inverse: bool) -> Result<Matrix> {
    if head_dim != table.head_dim {
        return Err(NumericsError::InvalidArgument(format!("head_dim {head_dim} does not match rope table head_dim {}", table.head_dim)));
    }
    if !x.cols.is_multiple_of(head_dim) {
        return Err(NumericsError::InvalidArgument(format!("row width {} is not a multiple of head_dim {head_dim}", x.cols)));
    }
    if positions.len() != x.rows {
        return Err(NumericsError::InvalidArgument(format!("{} positions for {} rows", positions.len(), x.rows)));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        table.check_position(pos)?;
        for head in out.row_mut(r).chunks_exact_mut(head_dim) {
            table.rotate_slice(head, pos, inverse);
        }
    }
    Ok(out)
}

/// Rotates every `head_dim`-wide slice of each row by that row's absolute
/// position. Out of place.
pub fn apply_rope(x: &Matrix, positions: &[usize], table: &RopeTable, head_dim: usize) -> Result<Matrix> {
    rope_impl(x, positions, table, head_dim, false)
}

/// Inverse of [`apply_rope`] (rotation by negated angles).
pub fn apply_rope_inverse(x: &Matrix, positions: &[usize], table: &RopeTable, head_dim: usize) -> Result<Matrix> {
    rope_impl(x, positions, table, head_dim, true)
}

/// Running state of a blocked online softmax: per-query max `m`, sum `l`, the
/// base value accumulator `acc` (M x D_v) and the residual accumulator
/// `acc_r` (M x R). Both accumulators are weighted by the same probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub m: Vec<f32>,
    pub l: Vec<f32>,
    pub acc: Matrix,
    pub acc_r: Matrix,
}

impl AttentionState {
    pub fn new(queries: usize, value_dim: usize, rank: usize) -> Self {
        Self {
            m: vec![f32::NEG_INFINITY; queries],
            l: vec![0.0; queries],
            acc: Matrix::zeros(queries, value_dim),
            acc_r: Matrix::zeros(queries, rank),
        }
    }

    pub fn queries(&self) -> usize {
        self.m.len()
    }

    /// Folds one key block into the state.
    ///
    /// Per query row: `m_new = max(m, max S)`, `l = l·e^(m-m_new) + Σ e^(S-m_new)`,
    /// `acc = acc·e^(m-m_new) + P·V_base`, `acc_r = acc_r·e^(m-m_new) + P·V_res`.
    /// A row whose logits are all masked leaves that row untouched.
    pub fn update(&mut self, logits: &Matrix, v_base: MatrixView<'_>, v_res: MatrixView<'_>) -> Result<()> {
        let (mq, b) = logits.shape();
        if mq != self.queries()
            || v_base.rows() != b
            || v_res.rows() != b
            || v_base.cols() != self.acc.cols()
            || v_res.cols() != self.acc_r.cols()
        {
            return Err(NumericsError::ShapeMismatch {
                op: "online_softmax_update",
                left: (mq, b),
                right: (v_base.rows(), v_base.cols() + v_res.cols()),
            });
        }
        let dv = self.acc.cols();
        let rank = self.acc_r.cols();
        let mut p = vec![0.0f32; b];
        for i in 0..mq {
            let s = logits.row(i);
            let block_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if block_max <= MASKED_LOGIT {
                continue;
            }
            let m_old = self.m[i];
            let m_new = m_old.max(block_max);
            let correction = (m_old - m_new).exp();
            let mut row_sum = 0.0f32;
            for (pj, &sj) in p.iter_mut().zip(s) {
                *pj = (sj - m_new).exp();
                row_sum += *pj;
            }
            self.l[i] = self.l[i] * correction + row_sum;

            let acc = self.acc.row_mut(i);
            for a in acc.iter_mut() {
                *a *= correction;
            }
            for (j, &pj) in p.iter().enumerate() {
                let v = v_base.row(j);
                for c in 0..dv {
                    acc[c] += pj * v[c];
                }
            }
            let acc_r = self.acc_r.row_mut(i);
            for a in acc_r.iter_mut() {
                *a *= correction;
            }
            for (j, &pj) in p.iter().enumerate() {
                let v = v_res.row(j);
                for c in 0..rank {
                    acc_r[c] += pj * v[c];
                }
            }
            self.m[i] = m_new;
        }
        Ok(())
    }
}

/// Free-function form of [`AttentionState::update`].
pub fn online_softmax_update(
    mut state: AttentionState,
    logits: &Matrix,
    v_base: MatrixView<'_>,
    v_res: MatrixView<'_>,
) -> Result<AttentionState> {
    state.update(logits, v_base, v_res)?;
    Ok(state)
}

/// Parameter-free RMS normalisation of each row.
pub fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols().max(1) as f32;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / n;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
