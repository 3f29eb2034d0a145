//! Randomized property suites behind `tgnn verify`.
//!
//! Each suite draws its cases from a seeded ChaCha stream, compares two
//! independent evaluation routes and reports the worst discrepancy against a
//! fixed tolerance.

use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cp::{build_sum_tensor, fit_partial_sym_cp, partial_sym_from_slices, FitOptions, PartialSymCp};
use crate::graph::Graph;
use crate::model::{Dropout, ModelGrads, Pooling, TgnnModel};
use crate::pooling::{homogeneous, Activation, CombinedLayer, CpLayer, PoolKind};
use crate::tensor::{max_abs_diff, max_rel_diff, multi_mode_product, unfolded_kron_product, DenseTensor, Matrix};
use crate::train::{fd_resolvable, finite_diff_check};
use crate::{Error, Result};

pub const SUITES: [&str; 7] = [
    "eq1",
    "permutation",
    "multilinear",
    "sum-tensor",
    "lemma",
    "strictness",
    "gradients",
];

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const RELU_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, in the units of `tolerance`. For `strictness`
    /// this is the smallest mixed difference and must stay above it.
    pub max_err: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{:<12} {}  cases {:>4}  max err {:.3e} (tol {:.0e})  {:.2}s{}",
            self.suite,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.max_err,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = match name {
        "eq1" => eq1(&mut rng)?,
        "permutation" => permutation(&mut rng)?,
        "multilinear" => multilinear(&mut rng)?,
        "sum-tensor" => sum_tensor(&mut rng)?,
        "lemma" => lemma(&mut rng)?,
        "strictness" => strictness(&mut rng)?,
        "gradients" => gradients(seed)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown suite '{other}' (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    rep.seconds = t.elapsed().as_secs_f64();
    Ok(rep)
}

fn report(suite: &str, cases: usize, max_err: f64, tolerance: f64, detail: String) -> SuiteReport {
    SuiteReport {
        suite: suite.to_string(),
        passed: max_err <= tolerance,
        cases,
        max_err,
        tolerance,
        seconds: 0.0,
        detail,
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Iterated mode products against the unfolding times a Kronecker chain.
fn eq1(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let order = rng.random_range(3..=4);
        let shape: Vec<usize> = (0..order).map(|_| rng.random_range(1..=5)).collect();
        let t = DenseTensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0))?;
        let vs: Vec<Vec<f64>> = shape[..order - 1].iter().map(|&n| rand_vec(rng, n)).collect();
        let a = multi_mode_product(&t, &refs(&vs))?.into_vec();
        let b = unfolded_kron_product(&t, &refs(&vs))?;
        worst = worst.max(max_rel_diff(&a, &b));
    }
    Ok(report("eq1", 100, worst, 1e-10, String::new()))
}

fn random_layer(rng: &mut ChaCha8Rng) -> CpLayer {
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let f = rng.random_range(1..=4);
    let r = rng.random_range(1..=6);
    let d = rng.random_range(1..=3);
    let mut l = CpLayer::glorot(f, r, d, rng).with_stabilizer(rng.random_bool(0.5));
    l.sigma = *acts.choose(rng).unwrap();
    l.sigma_prime = *acts.choose(rng).unwrap();
    l
}

/// Shuffled inputs must give the same bits, for the CP layer and for every
/// combined-layer pooling.
fn permutation(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let cp = random_layer(rng);
        let k = rng.random_range(1..=6);
        let mut xs: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(rng, cp.in_dim())).collect();
        let w2 = rand_matrix(rng, cp.in_dim(), cp.out_dim());
        let mut comb = CombinedLayer::new(cp.clone(), w2, Activation::Relu)?;
        comb.linear_pool = [PoolKind::Sum, PoolKind::Mean, PoolKind::Max][case % 3];
        let a = (cp.forward(&refs(&xs))?.0, comb.forward(&refs(&xs))?.0);
        xs.shuffle(rng);
        let b = (cp.forward(&refs(&xs))?.0, comb.forward(&refs(&xs))?.0);
        let same = |u: &[f64], v: &[f64]| u.iter().zip(v).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&a.0, &b.0) || !same(&a.1, &b.1) {
            mismatches += 1;
        }
        worst = worst.max(max_abs_diff(&a.0, &b.0)).max(max_abs_diff(&a.1, &b.1));
    }
    let mut rep = report("permutation", 100, worst, 0.0, format!("{mismatches} non-identical"));
    rep.passed = mismatches == 0;
    Ok(rep)
}

/// Identity-activation CP layer against the dense ⟦W,…,W,M⟧ contraction.
fn multilinear(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let r = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let w = rand_matrix(rng, f + 1, r);
        let m = rand_matrix(rng, d, r);
        let layer = CpLayer::new(w.clone(), m.clone(), Activation::Identity, Activation::Identity)?;
        let xs: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(rng, f)).collect();
        let out = layer.forward(&refs(&xs))?.0;
        let t = PartialSymCp::new(w, m, k)?.reconstruct()?;
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| homogeneous(x)).collect();
        let dense = multi_mode_product(&t, &refs(&hs))?.into_vec();
        worst = worst.max(max_rel_diff(&out, &dense));
    }
    Ok(report("multilinear", 100, worst, 1e-10, String::new()))
}

/// Contraction of the explicit sum tensor, then CP fits at rank `F·k`.
fn sum_tensor(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let d = rng.random_range(1..=f);
        for alpha in [1.0, 1.0 / k as f64] {
            let t = build_sum_tensor(f, k, d, alpha)?;
            let xs: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(rng, f)).collect();
            let hs: Vec<Vec<f64>> = xs.iter().map(|x| homogeneous(x)).collect();
            let got = multi_mode_product(&t, &refs(&hs))?.into_vec();
            for (j, g) in got.iter().enumerate() {
                let want: f64 = alpha * xs.iter().map(|x| x[j]).sum::<f64>();
                worst = worst.max((g - want).abs() / want.abs().max(1.0));
            }
        }
    }
    let mut fits = Vec::new();
    let mut fit_worst: f64 = 0.0;
    for (f, k, d) in [(2, 2, 2), (2, 3, 2), (3, 2, 2)] {
        let t = build_sum_tensor(f, k, d, 1.0)?;
        let rep = fit_partial_sym_cp(&t, k, &FitOptions::new(f * k))?;
        fit_worst = fit_worst.max(rep.relative_loss);
        fits.push(format!("({f},{k},{d}) rank {} loss {:.1e}", f * k, rep.relative_loss));
    }
    let mut rep = report("sum-tensor", 200, worst, 1e-12, format!("fits: {}", fits.join("; ")));
    rep.passed = worst <= 1e-12 && fit_worst <= 1e-4;
    Ok(rep)
}

/// Slice-wise factorization of tensors with symmetric frontal slices.
fn lemma(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let raw = DenseTensor::from_fn(vec![m, m, n], |_| rng.random_range(-1.0..1.0))?;
        let t = DenseTensor::from_fn(vec![m, m, n], |i| 0.5 * (raw.get(&[i[0], i[1], i[2]]) + raw.get(&[i[1], i[0], i[2]])))?;
        let dec = partial_sym_from_slices(&t)?;
        worst = worst.max(dec.reconstruct()?.max_abs_diff(&t));
    }
    Ok(report("lemma", 50, worst, 1e-7, String::new()))
}

/// Rank-1 identity CP layers on scalars carry a product term `x₁x₂`, which
/// no sum aggregator with identity activations can produce: its mixed second
/// difference is identically zero.
fn strictness(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut smallest = f64::INFINITY;
    let mut additive_worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=3);
        let w = rand_matrix(rng, 2, 1);
        let m = rand_matrix(rng, d, 1);
        let layer = CpLayer::new(w, m, Activation::Identity, Activation::Identity)?;
        let sum_layer = CombinedLayer::new(layer.clone(), rand_matrix(rng, 1, d), Activation::Identity)?
            .with_branches(crate::pooling::Branches::LINEAR_ONLY);
        let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let a = sign(rng) * rng.random_range(0.5..1.5);
        let b = sign(rng) * rng.random_range(0.5..1.5);
        let f = |x: f64, y: f64| layer.forward(&[&[x], &[y]]).map(|o| o.0);
        let g = |x: f64, y: f64| sum_layer.forward(&[&[x], &[y]]).map(|o| o.0);
        let (fab, fa0, f0b, f00) = (f(a, b)?, f(a, 0.0)?, f(0.0, b)?, f(0.0, 0.0)?);
        let (gab, ga0, g0b, g00) = (g(a, b)?, g(a, 0.0)?, g(0.0, b)?, g(0.0, 0.0)?);
        let mixed = (0..d)
            .map(|j| (fab[j] - fa0[j] - f0b[j] + f00[j]).abs() / (a * b).abs())
            .fold(0.0, f64::max);
        smallest = smallest.min(mixed);
        for j in 0..d {
            additive_worst = additive_worst.max((gab[j] - ga0[j] - g0b[j] + g00[j]).abs());
        }
    }
    Ok(SuiteReport {
        suite: "strictness".into(),
        passed: smallest > 1e-8 && additive_worst <= 1e-12,
        cases: 100,
        max_err: smallest,
        tolerance: 1e-8,
        seconds: 0.0,
        detail: format!("min |mixed difference| {smallest:.3e}; sum aggregator {additive_worst:.1e}"),
    })
}

/// Tally of finite-difference checks for one family of instances.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdTally {
    pub checked: usize,
    pub skipped: usize,
    pub max_err: f64,
}

impl FdTally {
    fn add(&mut self, err: Option<f64>) {
        match err {
            Some(e) => {
                self.checked += 1;
                self.max_err = self.max_err.max(e);
            }
            None => self.skipped += 1,
        }
    }
}

/// `⟨c, out − base⟩`: same gradient as `⟨c, out⟩`, less cancellation.
fn probe(out: &[f64], base: &[f64], c: &[f64]) -> f64 {
    out.iter().zip(base).zip(c).map(|((o, b), c)| c * (o - b)).sum()
}

fn near_kink(act: Activation, v: &[f64]) -> bool {
    act == Activation::Relu && v.iter().any(|x| x.abs() < RELU_MARGIN)
}

/// CP layer with random activations: gradients w.r.t. `W`, `M` and inputs.
/// `None` when the instance sits near a ReLU kink or is not FD-resolvable.
pub fn cp_layer_fd(seed: u64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [
        (Activation::Tanh, Activation::Relu),
        (Activation::Identity, Activation::Identity),
        (Activation::Tanh, Activation::Identity),
        (Activation::Identity, Activation::Relu),
    ];
    let (f, r, d, k) = (3, 5, 2, 4);
    let mut layer = CpLayer::glorot(f, r, d, &mut rng).with_stabilizer(seed % 2 == 1);
    (layer.sigma, layer.sigma_prime) = acts[(seed / 2 % 4) as usize];
    let xs: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut rng, f)).collect();
    let u = rand_vec(&mut rng, d);
    let (base, cache) = layer.forward(&refs(&xs))?;
    if near_kink(layer.sigma, &cache.h) || near_kink(layer.sigma_prime, &cache.z) {
        return Ok(None);
    }
    let g = layer.backward(&refs(&xs), &cache, &u)?;
    let (nw, nm) = (layer.w.as_slice().len(), layer.m.as_slice().len());
    let mut x0: Vec<f64> = layer.w.as_slice().to_vec();
    x0.extend_from_slice(layer.m.as_slice());
    x0.extend(xs.iter().flatten());
    let mut analytic: Vec<f64> = g.d_w.as_slice().to_vec();
    analytic.extend_from_slice(g.d_m.as_slice());
    analytic.extend(g.d_inputs.iter().flatten());
    if !fd_resolvable(&analytic) {
        return Ok(None);
    }
    let eval = |p: &[f64]| {
        let mut l = layer.clone();
        l.w.as_mut_slice().copy_from_slice(&p[..nw]);
        l.m.as_mut_slice().copy_from_slice(&p[nw..nw + nm]);
        let inputs: Vec<&[f64]> = p[nw + nm..].chunks(f).collect();
        probe(&l.forward(&inputs).unwrap().0, &base, &u)
    };
    Ok(Some(finite_diff_check(eval, &x0, &analytic, FD_STEP)))
}

/// Combined layer with sum, mean or max as the linear pool.
pub fn combined_layer_fd(seed: u64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, r, d, k) = (3, 5, 2, 4);
    let mut layer = CombinedLayer::glorot(f, r, d, &mut rng);
    layer.linear_pool = [PoolKind::Sum, PoolKind::Mean, PoolKind::Max][(seed % 3) as usize];
    let xs: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut rng, f)).collect();
    let u = rand_vec(&mut rng, d);
    let (base, cache) = layer.forward(&refs(&xs))?;
    let cpc = cache.cp.as_ref().unwrap();
    if near_kink(layer.cp.sigma_prime, &cpc.z) || near_kink(layer.sigma_dprime, &cache.y) {
        return Ok(None);
    }
    if layer.linear_pool == PoolKind::Max {
        // Keep the argmax unique along every coordinate.
        for c in 0..f {
            let mut col: Vec<f64> = xs.iter().map(|x| x[c]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            if col[0] - col[1] < RELU_MARGIN {
                return Ok(None);
            }
        }
    }
    let g = layer.backward(&refs(&xs), &cache, &u)?;
    let parts = [layer.cp.w.as_slice().len(), layer.cp.m.as_slice().len(), layer.w2.as_slice().len()];
    let mut x0: Vec<f64> = [layer.cp.w.as_slice(), layer.cp.m.as_slice(), layer.w2.as_slice()].concat();
    x0.extend(xs.iter().flatten());
    let d_w2 = g.d_w2.clone().unwrap();
    let mut analytic: Vec<f64> = [g.d_w.as_slice(), g.d_m.as_slice(), d_w2.as_slice()].concat();
    analytic.extend(g.d_inputs.iter().flatten());
    if !fd_resolvable(&analytic) {
        return Ok(None);
    }
    let eval = |p: &[f64]| {
        let mut l = layer.clone();
        let (pw, rest) = p.split_at(parts[0]);
        let (pm, rest) = rest.split_at(parts[1]);
        let (pw2, px) = rest.split_at(parts[2]);
        l.cp.w.as_mut_slice().copy_from_slice(pw);
        l.cp.m.as_mut_slice().copy_from_slice(pm);
        l.w2.as_mut_slice().copy_from_slice(pw2);
        let inputs: Vec<&[f64]> = px.chunks(f).collect();
        probe(&l.forward(&inputs).unwrap().0, &base, &u)
    };
    Ok(Some(finite_diff_check(eval, &x0, &analytic, FD_STEP)))
}

/// Draws the homogeneous row of every `W` from [0.6, 1.0] so that Hadamard
/// products, and with them the CP-branch gradients, are O(1).
pub fn condition(model: &mut TgnnModel, rng: &mut impl Rng) {
    let ws = model
        .layers
        .iter_mut()
        .map(|l| &mut l.cp.w)
        .chain(model.readout.iter_mut().map(|r| &mut r.w));
    for w in ws {
        let f = w.rows() - 1;
        for x in w.row_mut(f) {
            *x = rng.random_range(0.6..1.0);
        }
    }
}

/// 5-node cycle with a chord, `2 → 3 → 2` classifier at rank 4.
fn tiny_node_model(seed: u64, pooling: Pooling) -> Result<(TgnnModel, Graph, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_matrix(&mut rng, 5, 2);
    let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)], x, vec![0, 1, 0, 1, 0])?;
    let mut model = TgnnModel::node_classifier(2, &[3], 2, 4, pooling, &mut rng)?;
    condition(&mut model, &mut rng);
    Ok((model, g, rng))
}

/// Node classifier: parameter gradients, optionally under dropout.
pub fn node_model_fd(seed: u64, pooling: Pooling, dropout: bool) -> Result<Option<f64>> {
    let (mut model, g, mut rng) = tiny_node_model(seed, pooling)?;
    let plan = model.plan(&g, seed);
    let c = rand_matrix(&mut rng, 5, 2);
    let d = dropout.then_some(Dropout { rate: 0.3, seed, round: 1 });
    if dropout {
        model.dropout = 0.3;
    }
    let (base, trace) = model.node_forward(&g, &plan, d)?;
    if trace.relu_margin(&model) < RELU_MARGIN {
        return Ok(None);
    }
    let mut grads = ModelGrads::zeros(&model);
    model.node_backward(&trace, &c, &mut grads)?;
    let analytic = grads.flatten(&model);
    if !fd_resolvable(&analytic) {
        return Ok(None);
    }
    let eval = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).unwrap();
        probe(m.node_forward(&g, &plan, d).unwrap().0.as_slice(), base.as_slice(), c.as_slice())
    };
    Ok(Some(finite_diff_check(eval, &model.flat_params(), &analytic, FD_STEP)))
}

/// Node classifier: gradient w.r.t. the node features.
pub fn node_input_fd(seed: u64, pooling: Pooling) -> Result<Option<f64>> {
    let (model, g, mut rng) = tiny_node_model(seed, pooling)?;
    let plan = model.plan(&g, seed);
    let c = rand_matrix(&mut rng, 5, 2);
    let (base, trace) = model.node_forward(&g, &plan, None)?;
    if trace.relu_margin(&model) < RELU_MARGIN {
        return Ok(None);
    }
    let mut grads = ModelGrads::zeros(&model);
    let dx = model.node_backward(&trace, &c, &mut grads)?;
    if !fd_resolvable(dx.as_slice()) {
        return Ok(None);
    }
    let edges = g.edge_list();
    let eval = |x: &[f64]| {
        let feats = Matrix::new(5, 2, x.to_vec()).unwrap();
        let h = Graph::from_edges(5, &edges, feats, g.labels().to_vec()).unwrap();
        probe(model.node_forward(&h, &plan, None).unwrap().0.as_slice(), base.as_slice(), c.as_slice())
    };
    Ok(Some(finite_diff_check(eval, g.features().as_slice(), dx.as_slice(), FD_STEP)))
}

/// Graph regressor on a 4-node path, with and without the readout stabilizer.
pub fn graph_model_fd(seed: u64, pooling: Pooling) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let edges: Vec<(usize, usize)> = (1..4).map(|i| (i - 1, i)).collect();
    let g = Graph::from_edges(4, &edges, rand_matrix(&mut rng, 4, 2), Vec::new())?;
    let mut model = TgnnModel::graph_regressor(2, &[3], 2, 4, pooling, seed % 2 == 0, &mut rng)?;
    condition(&mut model, &mut rng);
    let c = rand_vec(&mut rng, 2);
    let (base, traces) = model.graph_forward(&[&g], 0, None)?;
    if traces[0].nodes.relu_margin(&model) < RELU_MARGIN {
        return Ok(None);
    }
    let mut grads = ModelGrads::zeros(&model);
    model.graph_backward(&traces[0], &c, &mut grads)?;
    let analytic = grads.flatten(&model);
    if !fd_resolvable(&analytic) {
        return Ok(None);
    }
    let eval = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).unwrap();
        probe(&m.graph_forward(&[&g], 0, None).unwrap().0[0], &base[0], &c)
    };
    Ok(Some(finite_diff_check(eval, &model.flat_params(), &analytic, FD_STEP)))
}

/// Minimum number of accepted instances per family.
const FD_MIN_CHECKED: usize = 10;

fn gradients(seed: u64) -> Result<SuiteReport> {
    let base = seed.wrapping_mul(1000);
    let mut families: Vec<(&str, FdTally)> = Vec::new();
    let mut run = |name: &'static str, n: u64, f: &dyn Fn(u64) -> Result<Option<f64>>| -> Result<()> {
        let mut t = FdTally::default();
        for s in 0..n {
            t.add(f(base + s)?);
        }
        families.push((name, t));
        Ok(())
    };
    run("cp-layer", 40, &cp_layer_fd)?;
    run("combined-layer", 30, &combined_layer_fd)?;
    run("node-model", 30, &|s| node_model_fd(s, Pooling::ALL[(s % 5) as usize], false))?;
    run("node-dropout", 20, &|s| node_model_fd(s, Pooling::CpSum, true))?;
    run("node-inputs", 20, &|s| node_input_fd(s, Pooling::ALL[(s % 5) as usize]))?;
    run("graph-model", 30, &|s| graph_model_fd(s, Pooling::ALL[(s % 5) as usize]))?;
    let worst = families.iter().map(|(_, t)| t.max_err).fold(0.0, f64::max);
    let checked: usize = families.iter().map(|(_, t)| t.checked).sum();
    let starved: Vec<&str> = families
        .iter()
        .filter(|(_, t)| t.checked < FD_MIN_CHECKED)
        .map(|(n, _)| *n)
        .collect();
    let detail = families
        .iter()
        .map(|(n, t)| format!("{n} {}/{} {:.1e}", t.checked, t.checked + t.skipped, t.max_err))
        .collect::<Vec<_>>()
        .join("; ");
    let mut rep = report("gradients", checked, worst, FD_TOL, detail);
    if !starved.is_empty() {
        rep.passed = false;
        rep.detail += &format!("; too few well-posed instances: {}", starved.join(", "));
    }
    Ok(rep)
}
