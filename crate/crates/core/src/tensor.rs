//! Dense tensor algebra: storage, fibers, matricization and mode products.
//!
//! Everything here is deliberately naive. These routines are the reference
//! path that the factored (CP) computations elsewhere in the crate are
//! checked against, so the index arithmetic is kept explicit.
//!
//! Conventions:
//! - storage is row-major (last index fastest);
//! - modes are 0-based;
//! - `matricize(t, i)` orders columns with the *first* remaining index
//!   varying fastest, which makes
//!   `t ×_0 v_0 ×_1 … ×_{k-2} v_{k-2} == t_(k-1) · (v_{k-2} ⊗ … ⊗ v_0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "matrix buffer",
                format!("{rows}x{cols} = {} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("matrix row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul inner dimension",
                self.cols,
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul shared rows", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t shared cols", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim("t_matvec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &s) in v.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += s * a;
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "matrix add",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Arbitrary-order dense array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim(
                format!("tensor buffer for shape {shape:?}"),
                n,
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(1.0);
        Ok(t)
    }

    /// Builds a tensor by evaluating `f` at every multi-index (row-major order).
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let mut idx = vec![0; t.order()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            increment(&mut idx, &t.shape);
        }
        Ok(t)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.order()];
        for i in (0..self.order().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order());
        let mut off = 0;
        for (i, (&n, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(n < dim, "index {n} out of range in mode {i}");
            off = off * dim + n;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Mode-`mode` fiber through the multi-index `idx` (the entry at `mode` is ignored).
    pub fn fiber(&self, mode: usize, idx: &[usize]) -> Result<Vec<f64>> {
        self.check_mode(mode)?;
        let mut idx = idx.to_vec();
        Ok((0..self.shape[mode])
            .map(|n| {
                idx[mode] = n;
                self.get(&idx)
            })
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    /// Returns a copy with modes reordered: output mode `i` is input mode `perm[i]`.
    pub fn permute_modes(&self, perm: &[usize]) -> Result<DenseTensor> {
        let k = self.order();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src = vec![0; k];
        DenseTensor::from_fn(shape, |idx| {
            for (i, &p) in perm.iter().enumerate() {
                src[p] = idx[i];
            }
            self.get(&src)
        })
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::invalid(format!(
                "mode {mode} out of range for order-{} tensor",
                self.order()
            )));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor order must be at least 1"));
    }
    if let Some(i) = shape.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("dimension {i} of shape {shape:?} is zero")));
    }
    Ok(())
}

/// Advances a row-major multi-index; wraps to all zeros after the last entry.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

/// Column of `matricize(t, mode)` holding the fiber through `idx`.
fn unfolding_column(shape: &[usize], idx: &[usize], mode: usize) -> usize {
    let mut col = 0;
    let mut stride = 1;
    for (j, (&n, &dim)) in idx.iter().zip(shape).enumerate() {
        if j == mode {
            continue;
        }
        col += n * stride;
        stride *= dim;
    }
    col
}

/// Mode-`mode` unfolding: an `N_mode × ∏_{j≠mode} N_j` matrix whose columns are
/// the mode fibers, first remaining index fastest.
pub fn matricize(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    t.check_mode(mode)?;
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    let mut out = Matrix::zeros(rows, cols);
    let mut idx = vec![0; t.order()];
    for &v in &t.data {
        out.set(idx[mode], unfolding_column(&t.shape, &idx, mode), v);
        increment(&mut idx, &t.shape);
    }
    Ok(out)
}

/// Inverse of [`matricize`].
pub fn dematricize(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    let mut t = DenseTensor::zeros(shape.to_vec())?;
    t.check_mode(mode)?;
    let cols = t.len() / shape[mode];
    if m.shape() != (shape[mode], cols) {
        return Err(Error::dim(
            format!("mode-{mode} unfolding of {shape:?}"),
            format!("({}, {cols})", shape[mode]),
            format!("{:?}", m.shape()),
        ));
    }
    let mut idx = vec![0; shape.len()];
    for flat in 0..t.data.len() {
        t.data[flat] = m.get(idx[mode], unfolding_column(shape, &idx, mode));
        increment(&mut idx, shape);
    }
    Ok(t)
}

/// `t ×_mode v`. The result drops `mode`; contracting an order-1 tensor is
/// rejected since the crate has no order-0 tensors (see [`multi_mode_product`]).
pub fn mode_vec_product(t: &DenseTensor, mode: usize, v: &[f64]) -> Result<DenseTensor> {
    t.check_mode(mode)?;
    if v.len() != t.shape[mode] {
        return Err(Error::invalid(format!(
            "vector of length {} cannot contract mode {mode} of size {}",
            v.len(),
            t.shape[mode]
        )));
    }
    if t.order() == 1 {
        return Err(Error::invalid(
            "mode product of an order-1 tensor is a scalar; use multi_mode_product",
        ));
    }
    let outer: usize = t.shape[..mode].iter().product();
    let inner: usize = t.shape[mode + 1..].iter().product();
    let n = t.shape[mode];
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for (m, &vm) in v.iter().enumerate() {
            let src = &t.data[(o * n + m) * inner..(o * n + m + 1) * inner];
            for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s * vm;
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(mode);
    DenseTensor::new(shape, data)
}

/// Result of contracting leading modes of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Contraction {
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Contraction {
    pub fn into_vec(self) -> Vec<f64> {
        match self {
            Contraction::Vector(v) => v,
            Contraction::Scalar(s) => vec![s],
        }
    }
}

/// `t ×_0 v_0 ×_1 v_1 …` over the leading `vs.len()` modes, by iterated mode
/// products. `vs.len()` must be `order - 1` (vector result) or `order` (scalar).
pub fn multi_mode_product(t: &DenseTensor, vs: &[&[f64]]) -> Result<Contraction> {
    let k = t.order();
    if vs.len() + 1 != k && vs.len() != k {
        return Err(Error::invalid(format!(
            "order-{k} tensor needs {} or {k} vectors, got {}",
            k - 1,
            vs.len()
        )));
    }
    for (i, v) in vs.iter().enumerate() {
        if v.len() != t.shape[i] {
            return Err(Error::invalid(format!(
                "vector {i} has length {}, mode {i} has size {}",
                v.len(),
                t.shape[i]
            )));
        }
    }
    let full = vs.len() == k;
    let leading = if full { k - 1 } else { vs.len() };
    let mut cur = t.clone();
    for v in &vs[..leading] {
        cur = mode_vec_product(&cur, 0, v)?;
    }
    if full {
        Ok(Contraction::Scalar(dot(&cur.data, vs[k - 1])))
    } else {
        Ok(Contraction::Vector(cur.data))
    }
}

/// Second evaluation route for [`multi_mode_product`] with `order - 1` vectors:
/// `t_(k-1) · (v_{k-2} ⊗ … ⊗ v_0)`.
pub fn unfolded_kron_product(t: &DenseTensor, vs: &[&[f64]]) -> Result<Vec<f64>> {
    let k = t.order();
    if vs.len() + 1 != k {
        return Err(Error::invalid(format!(
            "order-{k} tensor needs {} vectors, got {}",
            k - 1,
            vs.len()
        )));
    }
    let mut chain = vec![1.0];
    for v in vs {
        // v_i ⊗ (v_{i-1} ⊗ … ⊗ v_0)
        chain = kron(v, &chain);
    }
    let unfolded = matricize(t, k - 1)?;
    unfolded.matvec(&chain)
}

/// Kronecker product of two vectors: `(a ⊗ b)[i·|b| + j] = a_i b_j`.
pub fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "hadamard product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// `v_0 ∘ v_1 ∘ … ∘ v_{m-1}`.
pub fn outer(vs: &[&[f64]]) -> Result<DenseTensor> {
    let shape: Vec<usize> = vs.iter().map(|v| v.len()).collect();
    DenseTensor::from_fn(shape, |idx| {
        idx.iter().zip(vs).map(|(&n, v)| v[n]).product()
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs_diff(a, b) / scale
}
