//! Set pooling layers: the CP layer, the CP + linear-sum combination, and the
//! classical sum / mean / max poolers.
//!
//! A rank-`R` CP layer maps any number `k ≥ 1` of inputs `x_i ∈ ℝ^F` to
//!
//! ```text
//! σ'( M σ( Wᵀ[x_1; 1] ⊙ … ⊙ Wᵀ[x_k; 1] ) )       W: (F+1)×R, M: d×R
//! ```
//!
//! Multi-operand reductions (the Hadamard product and the sums) first put the
//! operand vectors in lexicographic order. Floating-point products and sums are
//! not associative; a canonical operand order makes the rounded result a
//! function of the input multiset alone, so permuting the inputs reproduces
//! the output bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Lexicographic total order on operand vectors. Equal keys are bitwise
/// identical vectors, so any sort by this key yields one canonical sequence.
fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Coordinate-wise fold over `rows` taken in canonical order.
fn reduce_rows(rows: &[&[f64]], init: f64, op: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut order: Vec<&[f64]> = rows.to_vec();
    order.sort_by(|a, b| lex_cmp(a, b));
    let mut acc = vec![init; rows[0].len()];
    for r in order {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a = op(*a, x);
        }
    }
    acc
}

/// `g ⊙ Π_{j≠i} q_j` for every operand `i`, from prefix and suffix products.
/// Never divides, so zero factors are handled exactly.
pub fn leave_one_out_products(factors: &[&[f64]], g: &[f64]) -> Vec<Vec<f64>> {
    let k = factors.len();
    let r = g.len();
    let mut out = vec![vec![0.0; r]; k];
    let mut prefix = g.to_vec();
    for (i, f) in factors.iter().enumerate() {
        out[i].copy_from_slice(&prefix);
        for (p, &x) in prefix.iter_mut().zip(f.iter()) {
            *p *= x;
        }
    }
    let mut suffix = vec![1.0; r];
    for i in (0..k).rev() {
        for (o, &s) in out[i].iter_mut().zip(&suffix) {
            *o *= s;
        }
        for (s, &x) in suffix.iter_mut().zip(factors[i].iter()) {
            *s *= x;
        }
    }
    out
}

/// Appends the homogeneous coordinate.
pub fn homogeneous(x: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.extend_from_slice(x);
    v.push(1.0);
    v
}

fn check_inputs(xs: &[&[f64]], f: usize) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid("pooling needs at least one input vector"));
    }
    if let Some((i, x)) = xs.iter().enumerate().find(|(_, x)| x.len() != f) {
        return Err(Error::dim(format!("pooling input {i}"), f, x.len()));
    }
    Ok(())
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
}

/// Parameter gradients of one pooling evaluation plus gradients w.r.t. its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub d_w: Matrix,
    pub d_m: Matrix,
    pub d_w2: Option<Matrix>,
    pub d_inputs: Vec<Vec<f64>>,
}

impl PoolGrads {
    pub fn is_finite(&self) -> bool {
        self.d_w.is_finite()
            && self.d_m.is_finite()
            && self.d_w2.as_ref().is_none_or(Matrix::is_finite)
            && self.d_inputs.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpLayer {
    /// `(F+1) × R`; the last row multiplies the homogeneous coordinate.
    pub w: Matrix,
    /// `d × R`.
    pub m: Matrix,
    pub sigma: Activation,
    pub sigma_prime: Activation,
    /// Squash every factor `Wᵀ[x;1]` through tanh before the product. Off by default.
    #[serde(default)]
    pub stabilize: bool,
}

/// Intermediates of [`CpLayer::forward`], consumed by [`CpLayer::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CpCache {
    /// Factors entering the Hadamard product, one row per input.
    pub factors: Vec<Vec<f64>>,
    /// The Hadamard product.
    pub h: Vec<f64>,
    /// `σ(h)`.
    pub a: Vec<f64>,
    /// `M a`, before `σ'`.
    pub z: Vec<f64>,
}

impl CpLayer {
    pub fn new(w: Matrix, m: Matrix, sigma: Activation, sigma_prime: Activation) -> Result<Self> {
        if w.rows() < 2 {
            return Err(Error::invalid(
                "W needs F+1 >= 2 rows (features plus homogeneous row)",
            ));
        }
        if w.cols() == 0 {
            return Err(Error::invalid("CP layer rank must be at least 1"));
        }
        if m.cols() != w.cols() {
            return Err(Error::dim("columns of M (rank)", w.cols(), m.cols()));
        }
        Ok(Self {
            w,
            m,
            sigma,
            sigma_prime,
            stabilize: false,
        })
    }

    /// Glorot-uniform `W` and `M` with the default tanh / ReLU activations.
    pub fn glorot(f: usize, rank: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: glorot(f + 1, rank, rng),
            m: glorot(d, rank, rng),
            sigma: Activation::Tanh,
            sigma_prime: Activation::Relu,
            stabilize: false,
        }
    }

    pub fn with_stabilizer(mut self, on: bool) -> Self {
        self.stabilize = on;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.m.rows()
    }

    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    /// `Wᵀ[x; 1]`, squashed when the stabilizer is on.
    pub fn factor(&self, x: &[f64]) -> Vec<f64> {
        let f = self.in_dim();
        let mut p = self.w.row(f).to_vec();
        let r = p.len();
        let mut chunks = x.chunks_exact(4);
        let mut i = 0;
        for c in &mut chunks {
            if c.iter().any(|&v| v != 0.0) {
                let (w0, w1) = (&self.w.row(i)[..r], &self.w.row(i + 1)[..r]);
                let (w2, w3) = (&self.w.row(i + 2)[..r], &self.w.row(i + 3)[..r]);
                for j in 0..r {
                    p[j] += (c[0] * w0[j] + c[1] * w1[j]) + (c[2] * w2[j] + c[3] * w3[j]);
                }
            }
            i += 4;
        }
        for (k, &xi) in chunks.remainder().iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (pr, &wv) in p.iter_mut().zip(self.w.row(i + k)) {
                *pr += xi * wv;
            }
        }
        if self.stabilize {
            p.iter_mut().for_each(|v| *v = v.tanh());
        }
        p
    }

    pub fn forward(&self, xs: &[&[f64]]) -> Result<(Vec<f64>, CpCache)> {
        check_inputs(xs, self.in_dim())?;
        let factors: Vec<Vec<f64>> = xs.iter().map(|x| self.factor(x)).collect();
        if factors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical("CP layer projection Wᵀ[x;1] is non-finite"));
        }
        let refs: Vec<&[f64]> = factors.iter().map(Vec::as_slice).collect();
        let (out, h, a, z) = self.pool_factors(&refs)?;
        Ok((out, CpCache { factors, h, a, z }))
    }

    /// Everything after the projections: product, `σ`, `M`, `σ'`.
    /// Returns `(out, h, a, z)`.
    pub(crate) fn pool_factors(
        &self,
        factors: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let h = reduce_rows(factors, 1.0, |a, x| a * x);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "CP layer Hadamard product over {} inputs overflowed; enable the factor stabilizer",
                factors.len()
            )));
        }
        let a: Vec<f64> = h.iter().map(|&v| self.sigma.apply(v)).collect();
        let z = self.m.matvec(&a)?;
        let out: Vec<f64> = z.iter().map(|&v| self.sigma_prime.apply(v)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("CP layer output σ'(M a) is non-finite"));
        }
        Ok((out, h, a, z))
    }

    /// Reverse of [`Self::pool_factors`]: accumulates into `d_m` and returns the
    /// gradient w.r.t. each projection `Wᵀ[x;1]` (before the stabilizer).
    pub(crate) fn unpool_factors(
        &self,
        factors: &[&[f64]],
        h: &[f64],
        a: &[f64],
        z: &[f64],
        upstream: &[f64],
        d_m: &mut Matrix,
    ) -> Result<Vec<Vec<f64>>> {
        let dz: Vec<f64> = upstream
            .iter()
            .zip(z)
            .map(|(g, &z)| g * self.sigma_prime.derivative(z))
            .collect();
        for (j, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (o, &av) in d_m.row_mut(j).iter_mut().zip(a) {
                *o += g * av;
            }
        }
        let da = self.m.t_matvec(&dz)?;
        let dh: Vec<f64> = da
            .iter()
            .zip(h)
            .map(|(g, &h)| g * self.sigma.derivative(h))
            .collect();
        let mut dps = leave_one_out_products(factors, &dh);
        if self.stabilize {
            for (dp, q) in dps.iter_mut().zip(factors) {
                for (g, &qv) in dp.iter_mut().zip(q.iter()) {
                    *g *= 1.0 - qv * qv;
                }
            }
        }
        Ok(dps)
    }

    /// Accumulates `[x;1] dpᵀ` into `d_w` and returns `W[:F] dp`.
    pub(crate) fn project_back(&self, x: &[f64], dp: &[f64], d_w: &mut Matrix) -> Vec<f64> {
        let f = self.in_dim();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &g) in d_w.row_mut(i).iter_mut().zip(dp) {
                *o += xi * g;
            }
        }
        for (o, &g) in d_w.row_mut(f).iter_mut().zip(dp) {
            *o += g;
        }
        (0..f).map(|i| crate::tensor::dot(self.w.row(i), dp)).collect()
    }

    /// Gradients of `⟨upstream, forward(xs)⟩`.
    pub fn backward(&self, xs: &[&[f64]], cache: &CpCache, upstream: &[f64]) -> Result<PoolGrads> {
        check_inputs(xs, self.in_dim())?;
        if upstream.len() != self.out_dim() {
            return Err(Error::dim("CP layer upstream gradient", self.out_dim(), upstream.len()));
        }
        if cache.factors.len() != xs.len() {
            return Err(Error::invalid("cache does not match the inputs"));
        }
        let (f, r, d) = (self.in_dim(), self.rank(), self.out_dim());
        let refs: Vec<&[f64]> = cache.factors.iter().map(Vec::as_slice).collect();
        let mut d_m = Matrix::zeros(d, r);
        let dps = self.unpool_factors(&refs, &cache.h, &cache.a, &cache.z, upstream, &mut d_m)?;
        let mut d_w = Matrix::zeros(f + 1, r);
        let d_inputs = xs
            .iter()
            .zip(&dps)
            .map(|(x, dp)| self.project_back(x, dp, &mut d_w))
            .collect();
        Ok(PoolGrads {
            d_w,
            d_m,
            d_w2: None,
            d_inputs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Sum,
    Mean,
    Max,
}

/// Coordinate-wise sum, mean or max of `xs`.
pub fn baseline_pool(kind: PoolKind, xs: &[&[f64]]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::invalid("pooling needs at least one input vector"));
    }
    check_inputs(xs, xs[0].len())?;
    Ok(match kind {
        PoolKind::Sum => reduce_rows(xs, 0.0, |a, x| a + x),
        PoolKind::Mean => {
            let k = xs.len() as f64;
            reduce_rows(xs, 0.0, |a, x| a + x).into_iter().map(|s| s / k).collect()
        }
        PoolKind::Max => reduce_rows(xs, f64::NEG_INFINITY, f64::max),
    })
}

/// Gradient of `⟨upstream, baseline_pool(kind, xs)⟩` w.r.t. each input. Max
/// routes each coordinate to the lowest-index maximizer.
pub fn baseline_pool_backward(kind: PoolKind, xs: &[&[f64]], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() {
        return Err(Error::invalid("pooling needs at least one input vector"));
    }
    let f = xs[0].len();
    check_inputs(xs, f)?;
    if upstream.len() != f {
        return Err(Error::dim("pooling upstream gradient", f, upstream.len()));
    }
    let k = xs.len();
    Ok(match kind {
        PoolKind::Sum => vec![upstream.to_vec(); k],
        PoolKind::Mean => vec![upstream.iter().map(|g| g / k as f64).collect(); k],
        PoolKind::Max => {
            let mut out = vec![vec![0.0; f]; k];
            for c in 0..f {
                out[argmax_lowest(xs, c)][c] = upstream[c];
            }
            out
        }
    })
}

pub(crate) fn argmax_lowest(xs: &[&[f64]], c: usize) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if x[c] > xs[best][c] {
            best = i;
        }
    }
    best
}

/// Which branches of a [`CombinedLayer`] are live. Masked branches contribute
/// nothing and receive zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub cp: bool,
    pub linear: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches { cp: true, linear: true };
    pub const CP_ONLY: Branches = Branches { cp: true, linear: false };
    pub const LINEAR_ONLY: Branches = Branches { cp: false, linear: true };
}

/// CP layer plus a low-order linear branch:
///
/// ```text
/// f(x_1..x_k) = σ'(M σ(⊙_i W₁ᵀ[x_i;1])) + σ''(W₂ᵀ pool(x_1..x_k))
/// ```
///
/// with `pool` the sum unless `linear_pool` says otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedLayer {
    pub cp: CpLayer,
    /// `F × d`.
    pub w2: Matrix,
    pub sigma_dprime: Activation,
    pub linear_pool: PoolKind,
    pub branches: Branches,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedCache {
    pub cp: Option<CpCache>,
    pub pooled: Vec<f64>,
    /// `W₂ᵀ pool(xs)`, before `σ''`.
    pub y: Vec<f64>,
}

impl CombinedLayer {
    pub fn new(cp: CpLayer, w2: Matrix, sigma_dprime: Activation) -> Result<Self> {
        if w2.shape() != (cp.in_dim(), cp.out_dim()) {
            return Err(Error::dim(
                "W2",
                format!("({}, {})", cp.in_dim(), cp.out_dim()),
                format!("{:?}", w2.shape()),
            ));
        }
        Ok(Self {
            cp,
            w2,
            sigma_dprime,
            linear_pool: PoolKind::Sum,
            branches: Branches::BOTH,
        })
    }

    pub fn glorot(f: usize, rank: usize, d: usize, rng: &mut impl Rng) -> Self {
        let cp = CpLayer::glorot(f, rank, d, rng);
        let w2 = glorot(f, d, rng);
        Self {
            cp,
            w2,
            sigma_dprime: Activation::Relu,
            linear_pool: PoolKind::Sum,
            branches: Branches::BOTH,
        }
    }

    pub fn with_branches(mut self, branches: Branches) -> Self {
        self.branches = branches;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.cp.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.cp.out_dim()
    }

    pub fn forward(&self, xs: &[&[f64]]) -> Result<(Vec<f64>, CombinedCache)> {
        check_inputs(xs, self.in_dim())?;
        let d = self.out_dim();
        let (mut out, cp) = if self.branches.cp {
            let (o, c) = self.cp.forward(xs)?;
            (o, Some(c))
        } else {
            (vec![0.0; d], None)
        };
        let (pooled, y) = if self.branches.linear {
            let pooled = baseline_pool(self.linear_pool, xs)?;
            let y = self.w2.t_matvec(&pooled)?;
            for (o, &v) in out.iter_mut().zip(&y) {
                *o += self.sigma_dprime.apply(v);
            }
            (pooled, y)
        } else {
            (Vec::new(), Vec::new())
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("combined layer output is non-finite"));
        }
        Ok((out, CombinedCache { cp, pooled, y }))
    }

    pub fn backward(&self, xs: &[&[f64]], cache: &CombinedCache, upstream: &[f64]) -> Result<PoolGrads> {
        check_inputs(xs, self.in_dim())?;
        let (f, d, r) = (self.in_dim(), self.out_dim(), self.cp.rank());
        if upstream.len() != d {
            return Err(Error::dim("combined layer upstream gradient", d, upstream.len()));
        }
        let mut grads = match &cache.cp {
            Some(c) => self.cp.backward(xs, c, upstream)?,
            None => PoolGrads {
                d_w: Matrix::zeros(f + 1, r),
                d_m: Matrix::zeros(d, r),
                d_w2: None,
                d_inputs: vec![vec![0.0; f]; xs.len()],
            },
        };
        let mut d_w2 = Matrix::zeros(f, d);
        if self.branches.linear {
            let dy: Vec<f64> = upstream
                .iter()
                .zip(&cache.y)
                .map(|(g, &y)| g * self.sigma_dprime.derivative(y))
                .collect();
            for (i, &p) in cache.pooled.iter().enumerate() {
                for (o, &g) in d_w2.row_mut(i).iter_mut().zip(&dy) {
                    *o = p * g;
                }
            }
            let dpooled = self.w2.matvec(&dy)?;
            let dxs = baseline_pool_backward(self.linear_pool, xs, &dpooled)?;
            for (acc, dx) in grads.d_inputs.iter_mut().zip(dxs) {
                for (a, g) in acc.iter_mut().zip(dx) {
                    *a += g;
                }
            }
        }
        grads.d_w2 = Some(d_w2);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{build_sum_tensor, fit_partial_sym_cp, FitOptions, PartialSymCp};
    use crate::tensor::{max_abs_diff, max_rel_diff, multi_mode_product};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vecs(rng: &mut impl Rng, k: usize, f: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn identity_layer(w: Matrix, m: Matrix) -> CpLayer {
        CpLayer::new(w, m, Activation::Identity, Activation::Identity).unwrap()
    }

    /// Dense oracle: contract ⟦W,…,W,M⟧ with homogeneous inputs.
    fn dense_contraction(w: &Matrix, m: &Matrix, xs: &[Vec<f64>]) -> Vec<f64> {
        let t = PartialSymCp::new(w.clone(), m.clone(), xs.len())
            .unwrap()
            .reconstruct()
            .unwrap();
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| homogeneous(x)).collect();
        multi_mode_product(&t, &refs(&hs)).unwrap().into_vec()
    }

    fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn leave_one_out_with_zero_factor() {
        let f = [vec![2.0, 0.0], vec![0.0, 3.0], vec![5.0, 7.0]];
        let out = leave_one_out_products(&refs(&f), &[1.0, 1.0]);
        assert_eq!(out, vec![vec![0.0, 21.0], vec![10.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn identity_map_for_single_input() {
        // W = [I_F; 0], M = I
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let layer = identity_layer(w, Matrix::identity(2));
        let (out, _) = layer.forward(&[&[0.3, -1.7]]).unwrap();
        assert_eq!(out, vec![0.3, -1.7]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = CpLayer::glorot(2, 3, 2, &mut rng);
        assert!(matches!(layer.forward(&[]), Err(Error::InvalidArgument(_))));
        assert!(layer.forward(&[&[1.0, 2.0, 3.0]]).is_err());
        assert!(CpLayer::new(Matrix::zeros(3, 2), Matrix::zeros(2, 3), Activation::Tanh, Activation::Relu).is_err());
    }

    #[test]
    fn overflow_names_the_product_stage() {
        let w = Matrix::from_rows(&[vec![0.0], vec![1e200]]).unwrap();
        let layer = identity_layer(w.clone(), Matrix::identity(1));
        let err = layer.forward(&[&[0.0], &[0.0]]).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("Hadamard")), "{err}");
        let stable = identity_layer(w, Matrix::identity(1)).with_stabilizer(true);
        assert!(stable.forward(&[&[0.0], &[0.0]]).is_ok());
    }

    #[test]
    fn permuted_inputs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let layer = CpLayer::glorot(3, 4, 2, &mut rng);
            let mut xs = rand_vecs(&mut rng, 5, 3);
            let (a, _) = layer.forward(&refs(&xs)).unwrap();
            xs.shuffle(&mut rng);
            let (b, _) = layer.forward(&refs(&xs)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn matches_dense_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = glorot(3, 2, &mut rng);
        let m = glorot(2, 2, &mut rng);
        let xs = rand_vecs(&mut rng, 3, 2);
        let layer = identity_layer(w.clone(), m.clone());
        let (out, _) = layer.forward(&refs(&xs)).unwrap();
        let oracle = dense_contraction(&w, &m, &xs);
        assert!(max_rel_diff(&out, &oracle) <= 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = CpLayer::glorot(3, 4, 2, &mut rng);
        let xs = rand_vecs(&mut rng, 3, 3);
        let (_, cache) = layer.forward(&refs(&xs)).unwrap();
        let g = layer.backward(&refs(&xs), &cache, &[0.0, 0.0]).unwrap();
        assert!(g.d_w.as_slice().iter().chain(g.d_m.as_slice()).all(|&x| x == 0.0));
        assert!(g.d_inputs.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn single_input_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = glorot(4, 5, &mut rng);
        let m = glorot(2, 5, &mut rng);
        let layer = identity_layer(w.clone(), m.clone());
        let x = [0.2, -0.4, 0.9];
        let up = [0.7, -1.1];
        let (_, cache) = layer.forward(&[&x]).unwrap();
        let g = layer.backward(&[&x], &cache, &up).unwrap();
        // d x = W[:F] · Mᵀ · upstream
        let mt_up = m.t_matvec(&up).unwrap();
        let full = w.matvec(&mt_up).unwrap();
        assert!(max_abs_diff(&g.d_inputs[0], &full[..3]) <= 1e-14);
    }

    /// Scalar objective ⟨u, layer(xs)⟩ for finite differences.
    fn cp_objective(layer: &CpLayer, xs: &[Vec<f64>], u: &[f64]) -> f64 {
        let (o, _) = layer.forward(&refs(xs)).unwrap();
        crate::tensor::dot(&o, u)
    }

    /// Resample until every pre-activation sits at least 1e-3 from a ReLU kink.
    fn away_from_kinks(layer: &CpLayer, xs: &[Vec<f64>]) -> bool {
        let (_, c) = layer.forward(&refs(xs)).unwrap();
        let kink = |a: Activation, v: &[f64]| a == Activation::Relu && v.iter().any(|x| x.abs() < 1e-3);
        !kink(layer.sigma, &c.h) && !kink(layer.sigma_prime, &c.z)
    }

    fn check_cp_grads(layer: &CpLayer, xs: &[Vec<f64>], u: &[f64]) {
        let (_, cache) = layer.forward(&refs(xs)).unwrap();
        let g = layer.backward(&refs(xs), &cache, u).unwrap();
        assert!(g.is_finite());
        let h = 1e-5;
        for idx in 0..layer.w.as_slice().len() {
            let fd = central_diff(
                |v| {
                    let mut l = layer.clone();
                    l.w.as_mut_slice()[idx] = v;
                    cp_objective(&l, xs, u)
                },
                layer.w.as_slice()[idx],
                h,
            );
            assert!(rel_err(fd, g.d_w.as_slice()[idx]) <= 1e-4, "dW[{idx}] {fd} vs {}", g.d_w.as_slice()[idx]);
        }
        for idx in 0..layer.m.as_slice().len() {
            let fd = central_diff(
                |v| {
                    let mut l = layer.clone();
                    l.m.as_mut_slice()[idx] = v;
                    cp_objective(&l, xs, u)
                },
                layer.m.as_slice()[idx],
                h,
            );
            assert!(rel_err(fd, g.d_m.as_slice()[idx]) <= 1e-4);
        }
        for i in 0..xs.len() {
            for c in 0..xs[i].len() {
                let fd = central_diff(
                    |v| {
                        let mut p = xs.to_vec();
                        p[i][c] = v;
                        cp_objective(layer, &p, u)
                    },
                    xs[i][c],
                    h,
                );
                assert!(rel_err(fd, g.d_inputs[i][c]) <= 1e-4);
            }
        }
    }

    #[test]
    fn cp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let acts = [
            (Activation::Tanh, Activation::Relu),
            (Activation::Identity, Activation::Identity),
            (Activation::Tanh, Activation::Identity),
            (Activation::Identity, Activation::Relu),
        ];
        for (sigma, sigma_prime) in acts {
            for stabilize in [false, true] {
                let (layer, xs) = loop {
                    let mut l = CpLayer::glorot(3, 5, 2, &mut rng).with_stabilizer(stabilize);
                    l.sigma = sigma;
                    l.sigma_prime = sigma_prime;
                    let xs = rand_vecs(&mut rng, 4, 3);
                    if away_from_kinks(&l, &xs) {
                        break (l, xs);
                    }
                };
                check_cp_grads(&layer, &xs, &[0.8, -1.3]);
            }
        }
    }

    #[test]
    fn combined_branches_reduce_to_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = CombinedLayer::glorot(3, 4, 2, &mut rng);
        layer.sigma_dprime = Activation::Identity;
        let xs = rand_vecs(&mut rng, 3, 3);
        let sum = baseline_pool(PoolKind::Sum, &refs(&xs)).unwrap();
        let linear = layer.w2.t_matvec(&sum).unwrap();

        let mut zero_m = layer.clone();
        zero_m.cp.m = Matrix::zeros(2, 4);
        zero_m.cp.sigma_prime = Activation::Identity;
        let (out, _) = zero_m.forward(&refs(&xs)).unwrap();
        assert!(max_abs_diff(&out, &linear) <= 1e-15);

        let mut zero_w2 = layer.clone();
        zero_w2.w2 = Matrix::zeros(3, 2);
        let (out, _) = zero_w2.forward(&refs(&xs)).unwrap();
        let (cp_out, _) = layer.cp.forward(&refs(&xs)).unwrap();
        assert_eq!(out, cp_out);

        let masked = layer.clone().with_branches(Branches::LINEAR_ONLY);
        let (out, _) = masked.forward(&refs(&xs)).unwrap();
        assert!(max_abs_diff(&out, &linear) <= 1e-15);
    }

    fn combined_objective(layer: &CombinedLayer, xs: &[Vec<f64>], u: &[f64]) -> f64 {
        let (o, _) = layer.forward(&refs(xs)).unwrap();
        crate::tensor::dot(&o, u)
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for pool in [PoolKind::Sum, PoolKind::Mean] {
            let (layer, xs) = loop {
                let mut l = CombinedLayer::glorot(3, 5, 2, &mut rng);
                l.linear_pool = pool;
                let xs = rand_vecs(&mut rng, 4, 3);
                let (_, c) = l.forward(&refs(&xs)).unwrap();
                let cpc = c.cp.as_ref().unwrap();
                if cpc.z.iter().chain(&c.y).all(|v| v.abs() > 1e-3) {
                    break (l, xs);
                }
            };
            let u = [1.2, -0.4];
            let (_, cache) = layer.forward(&refs(&xs)).unwrap();
            let g = layer.backward(&refs(&xs), &cache, &u).unwrap();
            let d_w2 = g.d_w2.clone().unwrap();
            let h = 1e-5;
            for idx in 0..layer.w2.as_slice().len() {
                let fd = central_diff(
                    |v| {
                        let mut l = layer.clone();
                        l.w2.as_mut_slice()[idx] = v;
                        combined_objective(&l, &xs, &u)
                    },
                    layer.w2.as_slice()[idx],
                    h,
                );
                assert!(rel_err(fd, d_w2.as_slice()[idx]) <= 1e-4);
            }
            for idx in 0..layer.cp.w.as_slice().len() {
                let fd = central_diff(
                    |v| {
                        let mut l = layer.clone();
                        l.cp.w.as_mut_slice()[idx] = v;
                        combined_objective(&l, &xs, &u)
                    },
                    layer.cp.w.as_slice()[idx],
                    h,
                );
                assert!(rel_err(fd, g.d_w.as_slice()[idx]) <= 1e-4);
            }
            for i in 0..xs.len() {
                for c in 0..3 {
                    let fd = central_diff(
                        |v| {
                            let mut p = xs.clone();
                            p[i][c] = v;
                            combined_objective(&layer, &p, &u)
                        },
                        xs[i][c],
                        h,
                    );
                    assert!(rel_err(fd, g.d_inputs[i][c]) <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn baseline_pools() {
        let xs = [vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(baseline_pool(PoolKind::Sum, &refs(&xs)).unwrap(), vec![4.0, 6.0]);
        assert_eq!(baseline_pool(PoolKind::Mean, &[&[0.5, -2.0]]).unwrap(), vec![0.5, -2.0]);
        assert_eq!(baseline_pool(PoolKind::Max, &refs(&xs)).unwrap(), vec![3.0, 4.0]);
        assert!(baseline_pool(PoolKind::Sum, &[]).is_err());
    }

    #[test]
    fn max_backward_tie_goes_to_lowest_index() {
        let xs = [vec![1.0, 0.0], vec![2.0, 5.0], vec![2.0, -1.0]];
        let g = baseline_pool_backward(PoolKind::Max, &refs(&xs), &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
        // Off the tie the routed gradient is the one-sided difference quotient.
        let h = 1e-6;
        let mut bumped = xs.clone();
        bumped[1][0] += h;
        let up = baseline_pool(PoolKind::Max, &refs(&bumped)).unwrap();
        let base = baseline_pool(PoolKind::Max, &refs(&xs)).unwrap();
        assert!(((up[0] - base[0]) / h - g[1][0]).abs() < 1e-6);
        let mut other = xs.clone();
        other[2][0] -= h;
        let down = baseline_pool(PoolKind::Max, &refs(&other)).unwrap();
        assert_eq!((down[0] - base[0]) / h, g[2][0]);
    }

    #[test]
    fn sum_and_mean_recovered_by_fitted_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, k, d) = (2, 2, 2);
        for alpha in [1.0, 1.0 / k as f64] {
            let target = build_sum_tensor(f, k, d, alpha).unwrap();
            let fit = fit_partial_sym_cp(&target, k, &FitOptions::new(f * k)).unwrap();
            let (w, m) = fit.model.into_parts();
            let layer = identity_layer(w, m);
            for _ in 0..20 {
                let xs = rand_vecs(&mut rng, k, f);
                let (out, _) = layer.forward(&refs(&xs)).unwrap();
                let expected: Vec<f64> = (0..d).map(|j| alpha * xs.iter().map(|x| x[j]).sum::<f64>()).collect();
                let err = max_abs_diff(&out, &expected) / expected.iter().fold(1e-12, |a: f64, b| a.max(b.abs()));
                assert!(err <= 1e-3, "alpha {alpha}: {out:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn rank_one_layer_is_not_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let layer = identity_layer(glorot(2, 1, &mut rng), glorot(1, 1, &mut rng));
            let f = |a: f64, b: f64| layer.forward(&[&[a], &[b]]).unwrap().0[0];
            let (a, b) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
            let mixed = f(a, b) - f(a, 0.0) - f(0.0, b) + f(0.0, 0.0);
            // Mixed difference equals W₀² M a b exactly for this layer.
            let expected = layer.w.get(0, 0).powi(2) * layer.m.get(0, 0) * a * b;
            assert!((mixed - expected).abs() <= 1e-12);
            assert!(mixed.abs() > 1e-8);
        }
    }
}
