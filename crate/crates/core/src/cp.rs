//! CP decompositions: plain, partially symmetric and sign-weighted symmetric
//! factorizations, plus explicit constructions and a least-squares fitter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{increment, DenseTensor, Matrix};

/// Largest tensor any routine here will materialize.
pub const MAX_DENSE_ENTRIES: usize = 10_000_000;

/// Numerical rank threshold for eigen-based factorizations, relative to the
/// largest eigenvalue magnitude (floored at 1).
pub const RANK_TOL: f64 = 1e-9;

/// Asymmetry tolerated in inputs that must be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

fn check_capacity(shape: &[usize]) -> Result<()> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    if n > MAX_DENSE_ENTRIES {
        return Err(Error::Capacity(format!(
            "materializing shape {shape:?} needs {n} entries (limit {MAX_DENSE_ENTRIES})"
        )));
    }
    Ok(())
}

/// `T = Σ_r M_0[:, r] ∘ M_1[:, r] ∘ … ∘ M_{k-1}[:, r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpDecomp {
    factors: Vec<Matrix>,
}

impl CpDecomp {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let rank = match factors.first() {
            Some(f) => f.cols(),
            None => return Err(Error::invalid("CP decomposition needs at least one factor")),
        };
        if rank == 0 {
            return Err(Error::invalid("CP rank must be at least 1"));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.cols() != rank {
                return Err(Error::dim(format!("columns of factor {i}"), rank, f.cols()));
            }
            if f.rows() == 0 {
                return Err(Error::invalid(format!("factor {i} has no rows")));
            }
        }
        Ok(Self { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].cols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        reconstruct_factors(&self.factors.iter().collect::<Vec<_>>(), self.rank())
    }
}

/// Dense sum of rank-one terms over explicit factor matrices. `rank` may be 0.
fn reconstruct_factors(factors: &[&Matrix], rank: usize) -> Result<DenseTensor> {
    let shape: Vec<usize> = factors.iter().map(|f| f.rows()).collect();
    check_capacity(&shape)?;
    let mut out = DenseTensor::zeros(shape.clone())?;
    let mut idx = vec![0; shape.len()];
    let mut prod = vec![0.0; rank];
    for v in out.as_mut_slice() {
        prod.fill(1.0);
        for (f, &n) in factors.iter().zip(&idx) {
            for (p, &x) in prod.iter_mut().zip(f.row(n)) {
                *p *= x;
            }
        }
        *v = prod.iter().sum();
        increment(&mut idx, &shape);
    }
    Ok(out)
}

/// `⟦W, …, W, M⟧` with `W` repeated over the first `k_sym` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSymCp {
    w: Matrix,
    m: Matrix,
    k_sym: usize,
}

impl PartialSymCp {
    pub fn new(w: Matrix, m: Matrix, k_sym: usize) -> Result<Self> {
        if k_sym == 0 {
            return Err(Error::invalid("partially symmetric CP needs k_sym >= 1"));
        }
        if w.cols() == 0 {
            return Err(Error::invalid("CP rank must be at least 1"));
        }
        if w.cols() != m.cols() {
            return Err(Error::dim("rank of M", w.cols(), m.cols()));
        }
        Ok(Self { w, m, k_sym })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn m(&self) -> &Matrix {
        &self.m
    }

    pub fn k_sym(&self) -> usize {
        self.k_sym
    }

    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.w.rows(); self.k_sym];
        s.push(self.m.rows());
        s
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.w, self.m)
    }

    pub fn to_cp(&self) -> CpDecomp {
        let mut factors = vec![self.w.clone(); self.k_sym];
        factors.push(self.m.clone());
        CpDecomp { factors }
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let mut factors = vec![&self.w; self.k_sym];
        factors.push(&self.m);
        reconstruct_factors(&factors, self.rank())
    }
}

/// `S = Σ_r weights_r · v_r ∘ v_r` with signed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSymCp {
    pub v: Matrix,
    pub weights: Vec<f64>,
}

impl WeightedSymCp {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.v.rows();
        Matrix::from_fn(n, n, |i, j| {
            self.weights
                .iter()
                .enumerate()
                .map(|(r, w)| w * self.v.get(i, r) * self.v.get(j, r))
                .sum()
        })
    }
}

fn max_asymmetry(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    worst
}

/// Symmetric factorization of a symmetric matrix through its spectral
/// decomposition. Eigenvalues below [`RANK_TOL`] (relative) are dropped, so
/// `rank()` is the numerical rank. Weights are sorted in decreasing order.
pub fn symmetric_cp_of_matrix(s: &Matrix) -> Result<WeightedSymCp> {
    let (n, c) = s.shape();
    if n != c {
        return Err(Error::invalid(format!("matrix is {n}x{c}, not square")));
    }
    let asym = max_asymmetry(s);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max |s - sᵀ| = {asym:e})"
        )));
    }
    if n == 0 {
        return Ok(WeightedSymCp {
            v: Matrix::zeros(0, 0),
            weights: Vec::new(),
        });
    }
    let dm = DMatrix::from_row_slice(n, n, s.as_slice());
    let eig = nalgebra::SymmetricEigen::try_new(dm, 1e-15, 10_000)
        .ok_or_else(|| Error::numerical("symmetric eigensolver did not converge"))?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i].abs() > RANK_TOL * scale)
        .collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = Matrix::from_fn(n, order.len(), |i, r| eig.eigenvectors[(i, order[r])]);
    let weights = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(WeightedSymCp { v, weights })
}

/// Slice-wise partially symmetric factorization `T = ⟦A, A, Δ⟧` of a
/// third-order tensor with symmetric frontal slices.
///
/// Column block `i` of `A` holds `√|λ| v` for every retained eigenpair of
/// slice `i`; the matching columns of `Δ` are zero except in row `i`, which
/// carries `sign(λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDecomposition {
    pub a: Matrix,
    pub delta: Matrix,
    pub slice_ranks: Vec<usize>,
}

impl SliceDecomposition {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Works for rank 0 (all-zero input), which a [`CpDecomp`] cannot represent.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        reconstruct_factors(&[&self.a, &self.a, &self.delta], self.rank())
    }

    pub fn to_cp(&self) -> Result<CpDecomp> {
        CpDecomp::new(vec![self.a.clone(), self.a.clone(), self.delta.clone()])
    }
}

pub fn partial_sym_from_slices(t: &DenseTensor) -> Result<SliceDecomposition> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::invalid(format!(
            "expected an m x m x n tensor, got shape {shape:?}"
        )));
    }
    let (m, n) = (shape[0], shape[2]);
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let slice = Matrix::from_fn(m, m, |a, b| t.get(&[a, b, i]));
        let sym = symmetric_cp_of_matrix(&slice).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::invalid(format!("frontal slice {i}: {msg}")),
            other => other,
        })?;
        blocks.push(sym);
    }
    let slice_ranks: Vec<usize> = blocks.iter().map(WeightedSymCp::rank).collect();
    let rank: usize = slice_ranks.iter().sum();
    let mut a = Matrix::zeros(m, rank);
    let mut delta = Matrix::zeros(n, rank);
    let mut col = 0;
    for (i, block) in blocks.iter().enumerate() {
        for (r, &w) in block.weights.iter().enumerate() {
            let s = w.abs().sqrt();
            for row in 0..m {
                a.set(row, col, s * block.v.get(row, r));
            }
            delta.set(i, col, w.signum());
            col += 1;
        }
    }
    Ok(SliceDecomposition {
        a,
        delta,
        slice_ranks,
    })
}

/// The `(F+1)^k × d` tensor whose contraction with homogeneous inputs
/// `[x_i; 1]` over its first `k` modes is `α Σ_i x_i` restricted to the first
/// `d` coordinates:
///
/// `T = Σ_{j<d} Σ_{ℓ<k} α ẽ_F ∘ … ∘ ẽ_j (position ℓ) ∘ … ∘ ẽ_F ∘ e_j`
///
/// where `ẽ_F` is the homogeneous basis vector. Requires `d ≤ F`.
pub fn build_sum_tensor(f: usize, k: usize, d: usize, alpha: f64) -> Result<DenseTensor> {
    if f == 0 || k == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "sum tensor needs F, k, d >= 1 (got F={f}, k={k}, d={d})"
        )));
    }
    if d > f {
        return Err(Error::invalid(format!(
            "output dim d={d} exceeds feature dim F={f}"
        )));
    }
    let mut shape = vec![f + 1; k];
    shape.push(d);
    check_capacity(&shape)?;
    let mut t = DenseTensor::zeros(shape)?;
    let mut idx = vec![f; k + 1];
    for j in 0..d {
        for l in 0..k {
            idx[..k].fill(f);
            idx[l] = j;
            idx[k] = j;
            let cur = t.get(&idx);
            t.set(&idx, cur + alpha);
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMethod {
    /// Fixed-step gradient descent on the squared Frobenius error.
    GradientDescent { lr: f64 },
    /// Damped Gauss-Newton with adaptive damping.
    LevenbergMarquardt { damping: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub rank: usize,
    pub iters: usize,
    pub method: FitMethod,
    pub seed: u64,
    /// Stop once `loss / ‖target‖²` falls below this.
    pub rel_tol: f64,
}

impl FitOptions {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            iters: 500,
            method: FitMethod::LevenbergMarquardt { damping: 1e-2 },
            seed: 0,
            rel_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: PartialSymCp,
    /// `‖reconstruct(model) − target‖²_F` of the best iterate.
    pub loss: f64,
    /// `loss / ‖target‖²_F` (equal to `loss` for an all-zero target).
    pub relative_loss: f64,
    pub iterations: usize,
}

/// Entry layout shared by the loss, gradient and Jacobian routines.
struct FitProblem<'a> {
    target: &'a DenseTensor,
    k_sym: usize,
    n: usize,
    d: usize,
    rank: usize,
}

impl FitProblem<'_> {
    fn n_params(&self) -> usize {
        (self.n + self.d) * self.rank
    }

    /// Visits every target entry with its residual and the leave-one-out
    /// products `Π_{l'≠l} W[n_l', r]` for each symmetric position `l`.
    fn for_each_entry(
        &self,
        params: &[f64],
        mut visit: impl FnMut(&[usize], usize, f64, &[f64], &[Vec<f64>]),
    ) {
        let (w, m) = params.split_at(self.n * self.rank);
        let r = self.rank;
        let mut idx = vec![0; self.k_sym];
        let sym_shape = vec![self.n; self.k_sym];
        let entries: usize = sym_shape.iter().product();
        let mut prefix = vec![vec![1.0; r]; self.k_sym + 1];
        let mut suffix = vec![vec![1.0; r]; self.k_sym + 1];
        let mut loo = vec![vec![0.0; r]; self.k_sym];
        for _ in 0..entries {
            for l in 0..self.k_sym {
                let row = &w[idx[l] * r..(idx[l] + 1) * r];
                let (head, tail) = prefix.split_at_mut(l + 1);
                for ((o, &p), &x) in tail[0].iter_mut().zip(&head[l]).zip(row) {
                    *o = p * x;
                }
            }
            for l in (0..self.k_sym).rev() {
                let row = &w[idx[l] * r..(idx[l] + 1) * r];
                let (head, tail) = suffix.split_at_mut(l + 1);
                for ((o, &s), &x) in head[l].iter_mut().zip(&tail[0]).zip(row) {
                    *o = s * x;
                }
            }
            for (l, out) in loo.iter_mut().enumerate() {
                for ((o, &p), &s) in out.iter_mut().zip(&prefix[l]).zip(&suffix[l + 1]) {
                    *o = p * s;
                }
            }
            let full = &prefix[self.k_sym];
            let mut tidx = idx.clone();
            tidx.push(0);
            for j in 0..self.d {
                tidx[self.k_sym] = j;
                let mj = &m[j * r..(j + 1) * r];
                let model: f64 = full.iter().zip(mj).map(|(a, b)| a * b).sum();
                let resid = model - self.target.get(&tidx);
                visit(&idx, j, resid, full, &loo);
            }
            increment(&mut idx, &sym_shape);
        }
    }

    fn loss(&self, params: &[f64]) -> f64 {
        let mut loss = 0.0;
        self.for_each_entry(params, |_, _, e, _, _| loss += e * e);
        loss
    }

    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let r = self.rank;
        let m_off = self.n * r;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let m = &params[m_off..];
        self.for_each_entry(params, |idx, j, e, full, loo| {
            loss += e * e;
            for (g, &p) in grad[m_off + j * r..m_off + (j + 1) * r].iter_mut().zip(full) {
                *g += 2.0 * e * p;
            }
            for (l, &n) in idx.iter().enumerate() {
                let mj = &m[j * r..(j + 1) * r];
                for ((g, &q), &mm) in grad[n * r..(n + 1) * r].iter_mut().zip(&loo[l]).zip(mj) {
                    *g += 2.0 * e * q * mm;
                }
            }
        });
        (loss, grad)
    }

    /// Gauss-Newton pieces `JᵀJ`, `Jᵀe` and the loss.
    fn normal_equations(&self, params: &[f64]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let p = self.n_params();
        let r = self.rank;
        let m_off = self.n * r;
        let m = &params[m_off..];
        let mut jtj = DMatrix::<f64>::zeros(p, p);
        let mut jte = DVector::<f64>::zeros(p);
        let mut loss = 0.0;
        let mut row = vec![0.0; p];
        let mut nz: Vec<usize> = Vec::with_capacity(p);
        self.for_each_entry(params, |idx, j, e, full, loo| {
            loss += e * e;
            nz.clear();
            for c in 0..r {
                row[m_off + j * r + c] = full[c];
                nz.push(m_off + j * r + c);
            }
            let mj = &m[j * r..(j + 1) * r];
            for (l, &n) in idx.iter().enumerate() {
                for c in 0..r {
                    let col = n * r + c;
                    if row[col] == 0.0 && !nz.contains(&col) {
                        nz.push(col);
                    }
                    row[col] += loo[l][c] * mj[c];
                }
            }
            for &a in &nz {
                jte[a] += row[a] * e;
                for &b in &nz {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
            for &a in &nz {
                row[a] = 0.0;
            }
        });
        (jtj, jte, loss)
    }
}

/// Least-squares fit of a rank-`opts.rank` partially symmetric CP model to a
/// target of shape `N^k_sym × d`. Returns the best iterate seen.
pub fn fit_partial_sym_cp(
    target: &DenseTensor,
    k_sym: usize,
    opts: &FitOptions,
) -> Result<FitReport> {
    let shape = target.shape();
    if k_sym == 0 || shape.len() != k_sym + 1 {
        return Err(Error::invalid(format!(
            "target of order {} cannot have {k_sym} symmetric modes plus one output mode",
            shape.len()
        )));
    }
    if shape[..k_sym].iter().any(|&s| s != shape[0]) {
        return Err(Error::invalid(format!(
            "symmetric modes of {shape:?} differ in size"
        )));
    }
    if opts.rank == 0 {
        return Err(Error::invalid("fit rank must be at least 1"));
    }
    check_capacity(shape)?;
    let problem = FitProblem {
        target,
        k_sym,
        n: shape[0],
        d: shape[k_sym],
        rank: opts.rank,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = opts.rank;
    let rank_scale = 1.0 / (r as f64).sqrt();
    let lim_w = (6.0 / (problem.n + r) as f64).sqrt() * rank_scale;
    let lim_m = (6.0 / (problem.d + r) as f64).sqrt() * rank_scale;
    let mut params: Vec<f64> = Vec::with_capacity(problem.n_params());
    params.extend((0..problem.n * r).map(|_| rng.random_range(-lim_w..lim_w)));
    params.extend((0..problem.d * r).map(|_| rng.random_range(-lim_m..lim_m)));

    let norm2 = target.frobenius_norm().powi(2);
    let rel = |loss: f64| if norm2 > 0.0 { loss / norm2 } else { loss };

    let mut best_loss = problem.loss(&params);
    let mut best = params.clone();
    let mut iterations = 0;

    match opts.method {
        FitMethod::GradientDescent { lr } => {
            if !(lr > 0.0) {
                return Err(Error::invalid("gradient descent needs lr > 0"));
            }
            for it in 0..opts.iters {
                let (loss, grad) = problem.loss_and_grad(&params);
                if !loss.is_finite() {
                    return Err(Error::numerical(format!(
                        "fit loss became non-finite at iteration {it}; lower lr"
                    )));
                }
                if loss < best_loss {
                    best_loss = loss;
                    best.copy_from_slice(&params);
                }
                iterations = it + 1;
                if rel(loss) <= opts.rel_tol {
                    break;
                }
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            let last = problem.loss(&params);
            if last.is_finite() && last < best_loss {
                best_loss = last;
                best.copy_from_slice(&params);
            }
        }
        FitMethod::LevenbergMarquardt { damping } => {
            if problem.n_params() * problem.n_params() > MAX_DENSE_ENTRIES {
                return Err(Error::Capacity(format!(
                    "Levenberg-Marquardt normal matrix with {} parameters is too large; use gradient descent",
                    problem.n_params()
                )));
            }
            let mut lambda = damping.max(1e-12);
            let (mut jtj, mut jte, mut loss) = problem.normal_equations(&params);
            for it in 0..opts.iters {
                iterations = it + 1;
                if rel(loss) <= opts.rel_tol {
                    break;
                }
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * (jtj[(i, i)] + 1e-9);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&(-&jte)),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                };
                let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
                let (tjtj, tjte, tloss) = problem.normal_equations(&trial);
                if tloss.is_finite() && tloss < loss {
                    params = trial;
                    jtj = tjtj;
                    jte = tjte;
                    loss = tloss;
                    lambda = (lambda / 3.0).max(1e-12);
                } else {
                    lambda *= 4.0;
                    if lambda > 1e16 {
                        break;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::numerical("fit loss is non-finite"));
            }
            best_loss = loss;
            best = params;
        }
    }

    let (w, m) = best.split_at(problem.n * r);
    let model = PartialSymCp::new(
        Matrix::new(problem.n, r, w.to_vec())?,
        Matrix::new(problem.d, r, m.to_vec())?,
        k_sym,
    )?;
    Ok(FitReport {
        model,
        loss: best_loss,
        relative_loss: rel(best_loss),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{multi_mode_product, outer};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_sym_slices(rng: &mut impl Rng, m: usize, n: usize) -> DenseTensor {
        let raw = DenseTensor::from_fn(vec![m, m, n], |_| rng.random_range(-1.0..1.0)).unwrap();
        DenseTensor::from_fn(vec![m, m, n], |i| {
            0.5 * (raw.get(&[i[0], i[1], i[2]]) + raw.get(&[i[1], i[0], i[2]]))
        })
        .unwrap()
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn rank_one_reconstruction_is_outer() {
        let u = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let v = Matrix::new(3, 1, vec![3.0, -1.0, 0.5]).unwrap();
        let cp = CpDecomp::new(vec![u, v]).unwrap();
        let expected = outer(&[&[1.0, 2.0], &[3.0, -1.0, 0.5]]).unwrap();
        assert_eq!(cp.reconstruct().unwrap(), expected);
    }

    #[test]
    fn zero_factors_reconstruct_zero() {
        let cp = CpDecomp::new(vec![Matrix::zeros(2, 3), Matrix::zeros(4, 3)]).unwrap();
        assert!(cp.reconstruct().unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cp_rejects_mismatched_rank() {
        assert!(CpDecomp::new(vec![Matrix::zeros(2, 3), Matrix::zeros(2, 2)]).is_err());
        assert!(CpDecomp::new(vec![]).is_err());
        assert!(CpDecomp::new(vec![Matrix::zeros(2, 0)]).is_err());
    }

    #[test]
    fn reconstruction_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<Matrix> = [3, 4, 2].iter().map(|&n| rand_matrix(&mut rng, n, 3)).collect();
        let cp = CpDecomp::new(f.clone()).unwrap();
        let t = cp.reconstruct().unwrap();
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for r in 0..3 {
                        s += f[0].get(a, r) * f[1].get(b, r) * f[2].get(c, r);
                    }
                    assert_eq!(t.get(&[a, b, c]), s);
                }
            }
        }
    }

    #[test]
    fn capacity_guard() {
        let big = CpDecomp::new(vec![Matrix::zeros(1000, 1); 3]).unwrap();
        assert!(matches!(big.reconstruct(), Err(Error::Capacity(_))));
        assert!(matches!(build_sum_tensor(40, 5, 2, 1.0), Err(Error::Capacity(_))));
    }

    #[test]
    fn symmetric_cp_identity() {
        let s = symmetric_cp_of_matrix(&Matrix::identity(2)).unwrap();
        assert_eq!(s.weights.len(), 2);
        assert!(s.weights.iter().all(|w| (w - 1.0).abs() < 1e-12));
        assert!(s.reconstruct().max_abs_diff(&Matrix::identity(2)) <= 1e-12);
    }

    #[test]
    fn symmetric_cp_signed_diagonal() {
        let d = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let s = symmetric_cp_of_matrix(&d).unwrap();
        assert!((s.weights[0] - 4.0).abs() < 1e-12);
        assert!((s.weights[1] + 1.0).abs() < 1e-12);
        for r in 0..2 {
            let norm: f64 = s.v.column(r).iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!(s.reconstruct().max_abs_diff(&d) <= 1e-12);
    }

    #[test]
    fn symmetric_cp_random_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_matrix(&mut rng, 4, 4);
        let s = Matrix::from_fn(4, 4, |i, j| a.get(i, j) + a.get(j, i));
        let cp = symmetric_cp_of_matrix(&s).unwrap();
        assert!(cp.rank() <= 4);
        assert!(cp.reconstruct().max_abs_diff(&s) <= 1e-8);
        assert!(matches!(symmetric_cp_of_matrix(&a), Err(Error::InvalidArgument(_))));
        assert!(symmetric_cp_of_matrix(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn lemma_identity_slices() {
        let t = DenseTensor::from_fn(vec![2, 2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
            .unwrap();
        let dec = partial_sym_from_slices(&t).unwrap();
        assert_eq!(dec.rank(), 4);
        assert_eq!(dec.slice_ranks, vec![2, 2]);
        let expected = Matrix::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(dec.delta, expected);
        assert!(dec.reconstruct().unwrap().max_abs_diff(&t) <= 1e-12);
    }

    #[test]
    fn lemma_zero_tensor_has_rank_zero() {
        let t = DenseTensor::zeros(vec![3, 3, 2]).unwrap();
        let dec = partial_sym_from_slices(&t).unwrap();
        assert_eq!(dec.rank(), 0);
        assert_eq!(dec.reconstruct().unwrap(), t);
        assert!(dec.to_cp().is_err());
    }

    #[test]
    fn lemma_rejects_asymmetric_slice() {
        let mut t = DenseTensor::zeros(vec![2, 2, 2]).unwrap();
        t.set(&[0, 1, 1], 1.0);
        let err = partial_sym_from_slices(&t).unwrap_err();
        assert!(err.to_string().contains("slice 1"), "{err}");
        assert!(partial_sym_from_slices(&DenseTensor::zeros(vec![2, 3, 2]).unwrap()).is_err());
    }

    #[test]
    fn lemma_random_partially_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_sym_slices(&mut rng, 3, 2);
        let dec = partial_sym_from_slices(&t).unwrap();
        assert!(dec.reconstruct().unwrap().max_abs_diff(&t) <= 1e-7);
        assert!(dec.to_cp().unwrap().reconstruct().unwrap().max_abs_diff(&t) <= 1e-7);
    }

    #[test]
    fn sum_tensor_single_vector() {
        let t = build_sum_tensor(1, 1, 1, 1.0).unwrap();
        let x = 0.37;
        let got = multi_mode_product(&t, &[&[x, 1.0]]).unwrap().into_vec();
        assert_eq!(got, vec![x]);
    }

    #[test]
    fn sum_tensor_alpha_zero_and_bad_dims() {
        let t = build_sum_tensor(2, 2, 2, 0.0).unwrap();
        assert!(t.as_slice().iter().all(|&x| x == 0.0));
        assert!(build_sum_tensor(2, 2, 3, 1.0).is_err());
        assert!(build_sum_tensor(0, 2, 1, 1.0).is_err());
    }

    #[test]
    fn sum_tensor_contraction_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = build_sum_tensor(2, 3, 2, 0.5).unwrap();
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0])
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let got = multi_mode_product(&t, &refs).unwrap().into_vec();
        for j in 0..2 {
            let direct = 0.5 * (xs[0][j] + xs[1][j] + xs[2][j]);
            assert!((got[j] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn fit_recovers_low_rank_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = PartialSymCp::new(rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 2, 2), 2)
            .unwrap();
        let target = truth.reconstruct().unwrap();
        let rep = fit_partial_sym_cp(&target, 2, &FitOptions { seed: 3, ..FitOptions::new(2) }).unwrap();
        assert!(rep.loss <= 1e-6, "loss {}", rep.loss);
    }

    #[test]
    fn fit_zero_target_by_gradient_descent() {
        let target = DenseTensor::zeros(vec![3, 3, 2]).unwrap();
        let opts = FitOptions {
            iters: 2000,
            method: FitMethod::GradientDescent { lr: 0.1 },
            ..FitOptions::new(3)
        };
        let short = fit_partial_sym_cp(&target, 2, &FitOptions { iters: 200, ..opts.clone() }).unwrap();
        let rep = fit_partial_sym_cp(&target, 2, &opts).unwrap();
        // The loss is a degree-6 polynomial around the zero solution, so GD
        // only creeps towards it; check it keeps shrinking.
        assert!(rep.loss <= 1e-4, "loss {}", rep.loss);
        assert!(rep.loss < 0.5 * short.loss);
        let lm = fit_partial_sym_cp(&target, 2, &FitOptions::new(3)).unwrap();
        assert!(lm.loss <= 1e-10, "loss {}", lm.loss);
    }

    #[test]
    fn fit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = DenseTensor::from_fn(vec![3, 3, 3, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let problem = FitProblem { target: &target, k_sym: 3, n: 3, d: 2, rank: 2 };
        let params: Vec<f64> = (0..problem.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = problem.loss_and_grad(&params);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = problem.loss(&p);
            p[i] -= 2.0 * h;
            let down = problem.loss(&p);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", grad[i]);
        }
        // Gauss-Newton gradient agrees with the direct one.
        let (_, jte, _) = problem.normal_equations(&params);
        for i in 0..params.len() {
            assert!((2.0 * jte[i] - grad[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn fit_sum_tensor_at_rank_fk() {
        let target = build_sum_tensor(2, 2, 2, 1.0).unwrap();
        let rep = fit_partial_sym_cp(&target, 2, &FitOptions::new(4)).unwrap();
        assert!(rep.relative_loss <= 1e-4, "{}", rep.relative_loss);
    }

    #[test]
    fn fit_is_deterministic() {
        let target = build_sum_tensor(2, 2, 1, 1.0).unwrap();
        let opts = FitOptions { iters: 20, seed: 5, ..FitOptions::new(4) };
        let a = fit_partial_sym_cp(&target, 2, &opts).unwrap();
        let b = fit_partial_sym_cp(&target, 2, &opts).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss, b.loss);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partial_symmetry_is_exact(seed in any::<u64>(), n in 1usize..=4, k in 1usize..=3, r in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cp = PartialSymCp::new(rand_matrix(&mut rng, n, r), rand_matrix(&mut rng, 2, r), k).unwrap();
            let t = cp.reconstruct().unwrap();
            for perm in permutations(k) {
                let mut full = perm.clone();
                full.push(k);
                let p = t.permute_modes(&full).unwrap();
                // the same multiset of factors per entry, possibly multiplied in another order
                prop_assert!(p.max_abs_diff(&t) <= 1e-14);
            }
        }

        #[test]
        fn lemma_roundtrip(seed in any::<u64>(), m in 1usize..=4, n in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_sym_slices(&mut rng, m, n);
            let dec = partial_sym_from_slices(&t).unwrap();
            prop_assert!(dec.reconstruct().unwrap().max_abs_diff(&t) <= 1e-7);
        }
    }
}
