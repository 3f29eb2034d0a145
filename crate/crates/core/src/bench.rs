//! Wall-clock scaling of CP pooling against rank and set size, plus
//! parameter accounting.
//!
//! Every grid point builds its layer and inputs from a fixed seed, runs one
//! discarded warmup call, then reports the median of `reps` timed repetitions.
//! A repetition loops the forward pass enough times to last about five
//! milliseconds so that short kernels are not dominated by timer resolution,
//! and repetitions cycle through the whole grid.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::TgnnModel;
use crate::pooling::{Branches, CombinedLayer, CpLayer};
use crate::{Error, Result};

pub trait ParamCount {
    /// Number of trainable scalars that influence the output.
    fn param_count(&self) -> usize;
}

impl ParamCount for CpLayer {
    fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.m.as_slice().len()
    }
}

impl ParamCount for CombinedLayer {
    fn param_count(&self) -> usize {
        let cp = if self.branches.cp { self.cp.param_count() } else { 0 };
        let lin = if self.branches.linear { self.w2.as_slice().len() } else { 0 };
        cp + lin
    }
}

impl ParamCount for TgnnModel {
    fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Rank,
    Nodes,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Rank => "rank",
            Axis::Nodes => "nodes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    /// Rank or set size, depending on the axis.
    pub x: usize,
    /// Median nanoseconds per forward pass.
    pub time_ns: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub axis: Axis,
    /// Sorted by `x`.
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of `ln time` against `ln x`; absent with fewer than
    /// two grid points.
    pub slope: Option<f64>,
    /// Least-squares `(intercept, ns per unit of x)`; absent with fewer than
    /// two grid points.
    pub linear_fit: Option<(f64, f64)>,
}

impl BenchResult {
    fn from_points(axis: Axis, mut points: Vec<BenchPoint>) -> Self {
        points.sort_by_key(|p| p.x);
        let xs: Vec<f64> = points.iter().map(|p| p.x as f64).collect();
        let ts: Vec<f64> = points.iter().map(|p| p.time_ns).collect();
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let lt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
        Self {
            axis,
            slope: least_squares(&lx, &lt).map(|(_, b)| b),
            linear_fit: least_squares(&xs, &ts),
            points,
        }
    }

    /// True when the median time never decreases along the grid.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].time_ns >= w[0].time_ns)
    }

    /// CSV with header `rank,time_ns,params` (or `nodes,…`).
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([self.axis.as_str(), "time_ns", "params"])
            .map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.x.to_string(), format!("{:.1}", p.time_ns), p.params.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `(a, b)` minimizing `Σ (y − a − b x)²`, or `None` when `x` is constant.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

/// Small inputs and a unit homogeneous row keep the product of `n` factors
/// near 1, so large sets neither overflow nor go subnormal.
fn bench_layer(f_in: usize, f_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> CombinedLayer {
    let mut layer = CombinedLayer::glorot(f_in, rank, f_out, rng);
    layer.cp.w.row_mut(f_in).fill(1.0);
    layer
}

fn bench_inputs(n: usize, f_in: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..f_in).map(|_| rng.random_range(-0.05..0.05)).collect())
        .collect()
}

fn check_args(f_in: usize, f_out: usize, grid: &[usize], reps: usize) -> Result<()> {
    if reps < 5 {
        return Err(Error::invalid(format!("reps must be at least 5, got {reps}")));
    }
    if f_in == 0 || f_out == 0 || grid.is_empty() || grid.contains(&0) {
        return Err(Error::invalid("dimensions and grid values must be positive"));
    }
    Ok(())
}

/// Times every grid point `reps` times, visiting the grid round-robin so that
/// slow drift in machine speed hits all points alike.
fn run(
    axis: Axis,
    grid: &[usize],
    reps: usize,
    mut setup: impl FnMut(usize) -> (CombinedLayer, Vec<Vec<f64>>),
) -> Result<BenchResult> {
    let cases: Vec<(CombinedLayer, Vec<Vec<f64>>)> = grid.iter().map(|&x| setup(x)).collect();
    let inputs: Vec<Vec<&[f64]>> = cases
        .iter()
        .map(|(_, xs)| xs.iter().map(Vec::as_slice).collect())
        .collect();
    let call = |i: usize| {
        black_box(cases[i].0.forward(black_box(&inputs[i])).ok());
    };
    let mut inner = Vec::with_capacity(grid.len());
    for (i, (layer, _)) in cases.iter().enumerate() {
        layer.forward(&inputs[i])?;
        let t = Instant::now();
        call(i);
        let warm = t.elapsed().max(Duration::from_nanos(1));
        inner.push((Duration::from_millis(5).as_nanos() / warm.as_nanos()).max(1) as usize);
    }
    let mut samples = vec![Vec::with_capacity(reps); grid.len()];
    for _ in 0..reps {
        for (i, s) in samples.iter_mut().enumerate() {
            let t = Instant::now();
            for _ in 0..inner[i] {
                call(i);
            }
            s.push(t.elapsed().as_nanos() as f64 / inner[i] as f64);
        }
    }
    let points = grid
        .iter()
        .zip(samples)
        .zip(&cases)
        .map(|((&x, s), (layer, _))| BenchPoint {
            x,
            time_ns: median(s),
            params: layer.param_count(),
        })
        .collect();
    Ok(BenchResult::from_points(axis, points))
}

/// CP pooling of `n` inputs of width `f_in` into `f_out`, for each rank.
pub fn bench_rank_scaling(f_in: usize, f_out: usize, n: usize, ranks: &[usize], reps: usize) -> Result<BenchResult> {
    check_args(f_in, f_out, ranks, reps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = bench_inputs(n.max(1), f_in, &mut rng);
    run(Axis::Rank, ranks, reps, |r| {
        let layer = bench_layer(f_in, f_out, r, &mut rng).with_branches(Branches::CP_ONLY);
        (layer, inputs.clone())
    })
}

/// The sum-pooling branch alone over the same rank grid. The rank only sizes
/// the masked CP branch, so time should not move.
pub fn bench_sum_rank_scaling(f_in: usize, f_out: usize, n: usize, ranks: &[usize], reps: usize) -> Result<BenchResult> {
    check_args(f_in, f_out, ranks, reps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = bench_inputs(n.max(1), f_in, &mut rng);
    run(Axis::Rank, ranks, reps, |r| {
        let layer = bench_layer(f_in, f_out, r, &mut rng).with_branches(Branches::LINEAR_ONLY);
        (layer, inputs.clone())
    })
}

/// CP pooling at a fixed rank over growing set sizes.
pub fn bench_node_scaling(f_in: usize, f_out: usize, rank: usize, sizes: &[usize], reps: usize) -> Result<BenchResult> {
    check_args(f_in, f_out, sizes, reps)?;
    if rank == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = bench_layer(f_in, f_out, rank, &mut rng).with_branches(Branches::CP_ONLY);
    run(Axis::Nodes, sizes, reps, |n| (layer.clone(), bench_inputs(n, f_in, &mut rng)))
}

/// `(F+1)R + dR`, plus `Fd` with the linear branch.
pub fn layer_param_formula(f: usize, rank: usize, d: usize, linear: bool) -> usize {
    (f + 1) * rank + d * rank + if linear { f * d } else { 0 }
}

/// `[8, 16, …, 1024]`.
pub fn doubling_ranks(lo: usize, hi: usize) -> Vec<usize> {
    std::iter::successors(Some(lo.max(1)), |r| Some(r * 2))
        .take_while(|&r| r <= hi)
        .collect()
}
