//! Message-passing network built from CP pooling layers.
//!
//! Each layer replaces AGGREGATE and UPDATE by one pooling call: node `v`
//! pools its own embedding together with `k` sampled neighbor embeddings
//! (`k + 1` inputs). Graph-level models finish with a CP readout over all node
//! embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{node_stream, sample_neighborhood, Graph, SampleSpec};
use crate::pooling::{
    baseline_pool, baseline_pool_backward, Activation, Branches, CombinedLayer, CpCache, CpLayer,
    PoolKind,
};
use crate::tensor::Matrix;

/// Aggregation variant of every message-passing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "cp")]
    Cp,
    #[serde(rename = "sum")]
    Sum,
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "cp+sum")]
    CpSum,
}

impl Pooling {
    pub const ALL: [Pooling; 5] = [Pooling::Cp, Pooling::Sum, Pooling::Mean, Pooling::Max, Pooling::CpSum];

    pub fn branches(self) -> Branches {
        match self {
            Pooling::Cp => Branches::CP_ONLY,
            Pooling::Sum | Pooling::Mean | Pooling::Max => Branches::LINEAR_ONLY,
            Pooling::CpSum => Branches::BOTH,
        }
    }

    pub fn linear_pool(self) -> PoolKind {
        match self {
            Pooling::Mean => PoolKind::Mean,
            Pooling::Max => PoolKind::Max,
            _ => PoolKind::Sum,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Cp => "cp",
            Pooling::Sum => "sum",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::CpSum => "cp+sum",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pooling {s:?} (expected cp, sum, mean, max or cp+sum)")))
    }
}

/// How each layer chooses the inputs of node `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// `v` followed by `k` sampled members of `N(v)`.
    Sampled(SampleSpec),
    /// All of `N(v)` (which contains `v`).
    Full,
}

/// Pooling inputs per layer and node: `members[layer][v]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodPlan {
    pub members: Vec<Vec<Vec<usize>>>,
}

impl NeighborhoodPlan {
    /// Plan for the graph with node `v` renamed `perm[v]`, keeping every
    /// node's draws.
    pub fn relabeled(&self, perm: &[usize]) -> NeighborhoodPlan {
        let members = self
            .members
            .iter()
            .map(|layer| {
                let mut out = vec![Vec::new(); layer.len()];
                for (v, mem) in layer.iter().enumerate() {
                    out[perm[v]] = mem.iter().map(|&u| perm[u]).collect();
                }
                out
            })
            .collect();
        NeighborhoodPlan { members }
    }
}

/// Inverted feature dropout on layer inputs, drawn from per-node streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    pub round: u64,
}

const DROPOUT_SALT: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// Stream id of layer `layer` in sampling round `round`.
fn layer_round(round: u64, n_layers: usize, layer: usize) -> u64 {
    round.wrapping_mul(n_layers as u64).wrapping_add(layer as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Layer input after dropout.
    pub input: Matrix,
    /// Dropout scale per input entry (0 or `1/(1-p)`).
    pub mask: Option<Matrix>,
    /// `Wᵀ[x_u;1]` per node (after the stabilizer), when the CP branch is live.
    pub proj: Option<Matrix>,
    /// `(h, a, z)` of the CP branch per node.
    pub cp: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// Pooled inputs and `W₂ᵀ pool` per node, when the linear branch is live.
    pub pooled: Option<Matrix>,
    pub y: Option<Matrix>,
}

/// Everything needed to replay a node-level forward pass backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub plan: NeighborhoodPlan,
    pub layers: Vec<LayerTrace>,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphTrace {
    pub nodes: ForwardTrace,
    pub readout: CpCache,
}

impl ForwardTrace {
    /// Smallest distance of a ReLU pre-activation from its kink.
    pub fn relu_margin(&self, model: &TgnnModel) -> f64 {
        let mut m = f64::INFINITY;
        for (layer, t) in model.layers.iter().zip(&self.layers) {
            if layer.cp.sigma == Activation::Relu {
                for (h, _, _) in &t.cp {
                    m = h.iter().fold(m, |m, v| m.min(v.abs()));
                }
            }
            if layer.cp.sigma_prime == Activation::Relu {
                for (_, _, z) in &t.cp {
                    m = z.iter().fold(m, |m, v| m.min(v.abs()));
                }
            }
            if let (Activation::Relu, Some(y)) = (layer.sigma_dprime, &t.y) {
                m = y.as_slice().iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub d_w: Matrix,
    pub d_m: Matrix,
    pub d_w2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    /// `(d_w, d_m)` of the readout.
    pub readout: Option<(Matrix, Matrix)>,
}

impl ModelGrads {
    pub fn zeros(model: &TgnnModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_w: Matrix::zeros(l.cp.w.rows(), l.cp.w.cols()),
                    d_m: Matrix::zeros(l.cp.m.rows(), l.cp.m.cols()),
                    d_w2: Matrix::zeros(l.w2.rows(), l.w2.cols()),
                })
                .collect(),
            readout: model.readout.as_ref().map(|r| {
                (Matrix::zeros(r.w.rows(), r.w.cols()), Matrix::zeros(r.m.rows(), r.m.cols()))
            }),
        }
    }

    /// Gradients of the live parameters, in the order of [`TgnnModel::params`].
    pub fn live(&self, model: &TgnnModel) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (l, g) in model.layers.iter().zip(&self.layers) {
            if l.branches.cp {
                out.push(&g.d_w);
                out.push(&g.d_m);
            }
            if l.branches.linear {
                out.push(&g.d_w2);
            }
        }
        if let Some((w, m)) = &self.readout {
            out.push(w);
            out.push(m);
        }
        out
    }

    pub fn flatten(&self, model: &TgnnModel) -> Vec<f64> {
        self.live(model).into_iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.d_w.scale(s);
            g.d_m.scale(s);
            g.d_w2.scale(s);
        }
        if let Some((w, m)) = &mut self.readout {
            w.scale(s);
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| g.d_w.is_finite() && g.d_m.is_finite() && g.d_w2.is_finite())
            && self.readout.as_ref().is_none_or(|(w, m)| w.is_finite() && m.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TgnnModel {
    pub layers: Vec<CombinedLayer>,
    pub readout: Option<CpLayer>,
    pub dropout: f64,
    pub neighborhood: Neighborhood,
}

impl TgnnModel {
    pub fn new(
        layers: Vec<CombinedLayer>,
        readout: Option<CpLayer>,
        dropout: f64,
        neighborhood: Neighborhood,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::dim(format!("input of layer {}", i + 1), pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        if let Some(r) = &readout {
            let last = layers.last().unwrap().out_dim();
            if r.in_dim() != last {
                return Err(Error::dim("readout input", last, r.in_dim()));
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} must lie in [0, 1)")));
        }
        if let Neighborhood::Sampled(s) = neighborhood {
            if s.k == 0 {
                return Err(Error::invalid("sample size k must be at least 1"));
            }
        }
        Ok(Self {
            layers,
            readout,
            dropout,
            neighborhood,
        })
    }

    fn stack(dims: &[usize], rank: usize, pooling: Pooling, rng: &mut impl Rng) -> Vec<CombinedLayer> {
        dims.windows(2)
            .map(|d| {
                let mut l = CombinedLayer::glorot(d[0], rank, d[1], rng).with_branches(pooling.branches());
                l.linear_pool = pooling.linear_pool();
                l
            })
            .collect()
    }

    /// `F → hidden… → classes`; the last layer has identity activations and
    /// emits logits.
    pub fn node_classifier(
        f: usize,
        hidden: &[usize],
        classes: usize,
        rank: usize,
        pooling: Pooling,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![f];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        if dims.contains(&0) || rank == 0 {
            return Err(Error::invalid(format!("layer sizes {dims:?} and rank {rank} must be positive")));
        }
        let mut layers = Self::stack(&dims, rank, pooling, rng);
        let last = layers.last_mut().unwrap();
        last.cp.sigma_prime = Activation::Identity;
        last.sigma_dprime = Activation::Identity;
        Self::new(layers, None, 0.0, Neighborhood::Sampled(SampleSpec::default()))
    }

    /// `F → hidden…` message passing followed by a tanh / identity CP readout
    /// of width `out` over all nodes.
    pub fn graph_regressor(
        f: usize,
        hidden: &[usize],
        out: usize,
        rank: usize,
        pooling: Pooling,
        stabilize_readout: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![f];
        dims.extend_from_slice(hidden);
        if hidden.is_empty() || dims.contains(&0) || out == 0 || rank == 0 {
            return Err(Error::invalid("graph model needs positive sizes and at least one hidden layer"));
        }
        let layers = Self::stack(&dims, rank, pooling, rng);
        let mut readout = CpLayer::glorot(*dims.last().unwrap(), rank, out, rng).with_stabilizer(stabilize_readout);
        readout.sigma_prime = Activation::Identity;
        Self::new(layers, Some(readout), 0.0, Neighborhood::Full)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        match &self.readout {
            Some(r) => r.out_dim(),
            None => self.layers.last().unwrap().out_dim(),
        }
    }

    /// Live parameter matrices: per layer `W`, `M` (CP branch) then `W₂`
    /// (linear branch), then the readout `W`, `M`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            if l.branches.cp {
                out.push(&l.cp.w);
                out.push(&l.cp.m);
            }
            if l.branches.linear {
                out.push(&l.w2);
            }
        }
        if let Some(r) = &self.readout {
            out.push(&r.w);
            out.push(&r.m);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if l.branches.cp {
                out.push(&mut l.cp.w);
                out.push(&mut l.cp.m);
            }
            if l.branches.linear {
                out.push(&mut l.w2);
            }
        }
        if let Some(r) = &mut self.readout {
            out.push(&mut r.w);
            out.push(&mut r.m);
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|m| m.as_slice().len()).sum();
        if flat.len() != total {
            return Err(Error::dim("flat parameter vector", total, flat.len()));
        }
        let mut rest = flat;
        for m in self.params_mut() {
            let (head, tail) = rest.split_at(m.as_slice().len());
            m.as_mut_slice().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Draws the pooling inputs of every node for every layer. Node `v` in
    /// layer `l` uses its own stream, so plans do not depend on visiting order.
    pub fn plan(&self, g: &Graph, round: u64) -> NeighborhoodPlan {
        let n_layers = self.layers.len();
        let members = (0..n_layers)
            .map(|l| {
                (0..g.n_nodes())
                    .map(|v| match &self.neighborhood {
                        Neighborhood::Full => g.neighbors(v).to_vec(),
                        Neighborhood::Sampled(spec) => {
                            let mut rng = node_stream(spec.seed, layer_round(round, n_layers, l), v);
                            let mut m = vec![v];
                            m.extend(sample_neighborhood(g, v, spec, &mut rng));
                            m
                        }
                    })
                    .collect()
            })
            .collect();
        NeighborhoodPlan { members }
    }

    fn check_plan(&self, g: &Graph, plan: &NeighborhoodPlan) -> Result<()> {
        if g.feature_dim() != self.in_dim() {
            return Err(Error::dim("node features", self.in_dim(), g.feature_dim()));
        }
        if plan.members.len() != self.layers.len() {
            return Err(Error::dim("plan layers", self.layers.len(), plan.members.len()));
        }
        let n = g.n_nodes();
        for (l, layer) in plan.members.iter().enumerate() {
            if layer.len() != n {
                return Err(Error::dim(format!("plan of layer {l}"), n, layer.len()));
            }
            if let Some(v) = layer.iter().position(|m| m.is_empty() || m.iter().any(|&u| u >= n)) {
                return Err(Error::invalid(format!("plan of layer {l}: node {v} has empty or out-of-range inputs")));
            }
        }
        Ok(())
    }

    /// Per-node outputs of the message-passing stack (logits for node
    /// classifiers). Dropout is applied only when `dropout` is given.
    pub fn node_forward(
        &self,
        g: &Graph,
        plan: &NeighborhoodPlan,
        dropout: Option<Dropout>,
    ) -> Result<(Matrix, ForwardTrace)> {
        self.check_plan(g, plan)?;
        let n_layers = self.layers.len();
        let mut h = g.features().clone();
        let mut traces = Vec::with_capacity(n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match dropout {
                Some(d) if d.rate > 0.0 => {
                    let keep = 1.0 / (1.0 - d.rate);
                    let mut m = Matrix::zeros(h.rows(), h.cols());
                    for v in 0..h.rows() {
                        let mut rng = node_stream(d.seed ^ DROPOUT_SALT, layer_round(d.round, n_layers, l), v);
                        for s in m.row_mut(v) {
                            *s = if rng.random::<f64>() < d.rate { 0.0 } else { keep };
                        }
                    }
                    for (x, s) in h.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *x *= s;
                    }
                    Some(m)
                }
                _ => None,
            };
            let (out, mut trace) = layer_forward(layer, l, h, &plan.members[l])?;
            trace.mask = mask;
            traces.push(trace);
            h = out;
        }
        Ok((
            h.clone(),
            ForwardTrace {
                plan: plan.clone(),
                layers: traces,
                output: h,
            },
        ))
    }

    /// Reverse pass for `⟨d_out, node_forward(..)⟩`. Accumulates into `grads`
    /// and returns the gradient w.r.t. the input features.
    pub fn node_backward(&self, trace: &ForwardTrace, d_out: &Matrix, grads: &mut ModelGrads) -> Result<Matrix> {
        if d_out.shape() != trace.output.shape() {
            return Err(Error::dim(
                "output gradient",
                format!("{:?}", trace.output.shape()),
                format!("{:?}", d_out.shape()),
            ));
        }
        let mut d = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            d = layer_backward(
                &self.layers[l],
                &trace.layers[l],
                &trace.plan.members[l],
                &d,
                &mut grads.layers[l],
            )?;
        }
        Ok(d)
    }

    /// Graph-level predictions, one per graph. The readout pools every node
    /// embedding of a graph.
    pub fn graph_forward(
        &self,
        graphs: &[&Graph],
        round: u64,
        dropout: Option<Dropout>,
    ) -> Result<(Vec<Vec<f64>>, Vec<GraphTrace>)> {
        let readout = self
            .readout
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no readout; use node_forward"))?;
        if graphs.is_empty() {
            return Err(Error::invalid("graph batch is empty"));
        }
        let mut preds = Vec::with_capacity(graphs.len());
        let mut traces = Vec::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            let plan = self.plan(g, round);
            let dropout = dropout.map(|d| Dropout {
                seed: d.seed.wrapping_add(i as u64),
                ..d
            });
            let (h, nodes) = self.node_forward(g, &plan, dropout)?;
            let xs: Vec<&[f64]> = (0..h.rows()).map(|v| h.row(v)).collect();
            let (pred, cache) = readout.forward(&xs).map_err(|e| {
                Error::numerical(format!("readout of graph {i}: {e} (see --stabilize-readout)"))
            })?;
            preds.push(pred);
            traces.push(GraphTrace { nodes, readout: cache });
        }
        Ok((preds, traces))
    }

    /// Reverse pass for `⟨d_pred, prediction⟩` of one graph.
    pub fn graph_backward(&self, trace: &GraphTrace, d_pred: &[f64], grads: &mut ModelGrads) -> Result<()> {
        let readout = self
            .readout
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no readout"))?;
        let h = &trace.nodes.output;
        let xs: Vec<&[f64]> = (0..h.rows()).map(|v| h.row(v)).collect();
        let pg = readout.backward(&xs, &trace.readout, d_pred)?;
        let (gw, gm) = grads
            .readout
            .as_mut()
            .ok_or_else(|| Error::invalid("gradient buffer has no readout"))?;
        gw.add_assign(&pg.d_w)?;
        gm.add_assign(&pg.d_m)?;
        let d_h = Matrix::from_rows(&pg.d_inputs)?;
        self.node_backward(&trace.nodes, &d_h, grads)?;
        Ok(())
    }
}

fn layer_forward(
    layer: &CombinedLayer,
    l: usize,
    input: Matrix,
    members: &[Vec<usize>],
) -> Result<(Matrix, LayerTrace)> {
    let n = input.rows();
    let (d, r) = (layer.out_dim(), layer.cp.rank());
    let mut out = Matrix::zeros(n, d);
    let proj = if layer.branches.cp {
        let mut p = Matrix::zeros(n, r);
        for u in 0..n {
            let q = layer.cp.factor(input.row(u));
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("layer {l}, node {u}: projection Wᵀ[x;1] is non-finite")));
            }
            p.row_mut(u).copy_from_slice(&q);
        }
        Some(p)
    } else {
        None
    };
    let mut cp = Vec::new();
    let (mut pooled, mut y) = if layer.branches.linear {
        (Some(Matrix::zeros(n, layer.in_dim())), Some(Matrix::zeros(n, d)))
    } else {
        (None, None)
    };
    for (v, mem) in members.iter().enumerate() {
        if let Some(p) = &proj {
            let refs: Vec<&[f64]> = mem.iter().map(|&u| p.row(u)).collect();
            let (o, h, a, z) = layer
                .cp
                .pool_factors(&refs)
                .map_err(|e| Error::numerical(format!("layer {l}, node {v}: {e}")))?;
            out.row_mut(v).copy_from_slice(&o);
            cp.push((h, a, z));
        }
        if let (Some(pm), Some(ym)) = (&mut pooled, &mut y) {
            let xs: Vec<&[f64]> = mem.iter().map(|&u| input.row(u)).collect();
            let pv = baseline_pool(layer.linear_pool, &xs)?;
            let yv = layer.w2.t_matvec(&pv)?;
            for (o, &t) in out.row_mut(v).iter_mut().zip(&yv) {
                *o += layer.sigma_dprime.apply(t);
            }
            pm.row_mut(v).copy_from_slice(&pv);
            ym.row_mut(v).copy_from_slice(&yv);
        }
        if out.row(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("layer {l}, node {v}: output is non-finite")));
        }
    }
    Ok((
        out,
        LayerTrace {
            input,
            mask: None,
            proj,
            cp,
            pooled,
            y,
        },
    ))
}

fn layer_backward(
    layer: &CombinedLayer,
    t: &LayerTrace,
    members: &[Vec<usize>],
    d_out: &Matrix,
    g: &mut LayerGrads,
) -> Result<Matrix> {
    let n = t.input.rows();
    let mut d_in = Matrix::zeros(n, layer.in_dim());
    let mut d_proj = t.proj.as_ref().map(|p| Matrix::zeros(p.rows(), p.cols()));
    for (v, mem) in members.iter().enumerate() {
        let up = d_out.row(v);
        if up.iter().all(|&x| x == 0.0) {
            continue;
        }
        if let (Some(p), Some(dp)) = (&t.proj, &mut d_proj) {
            let refs: Vec<&[f64]> = mem.iter().map(|&u| p.row(u)).collect();
            let (h, a, z) = &t.cp[v];
            let dps = layer.cp.unpool_factors(&refs, h, a, z, up, &mut g.d_m)?;
            for (&u, gq) in mem.iter().zip(&dps) {
                for (o, &x) in dp.row_mut(u).iter_mut().zip(gq) {
                    *o += x;
                }
            }
        }
        if let (Some(pm), Some(ym)) = (&t.pooled, &t.y) {
            let dy: Vec<f64> = up
                .iter()
                .zip(ym.row(v))
                .map(|(g, &y)| g * layer.sigma_dprime.derivative(y))
                .collect();
            for (i, &pv) in pm.row(v).iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                for (o, &gy) in g.d_w2.row_mut(i).iter_mut().zip(&dy) {
                    *o += pv * gy;
                }
            }
            let d_pooled = layer.w2.matvec(&dy)?;
            let xs: Vec<&[f64]> = mem.iter().map(|&u| t.input.row(u)).collect();
            let dxs = baseline_pool_backward(layer.linear_pool, &xs, &d_pooled)?;
            for (&u, dx) in mem.iter().zip(&dxs) {
                for (o, &x) in d_in.row_mut(u).iter_mut().zip(dx) {
                    *o += x;
                }
            }
        }
    }
    if let Some(dp) = &d_proj {
        for u in 0..n {
            let row = dp.row(u);
            if row.iter().all(|&x| x == 0.0) {
                continue;
            }
            let dx = layer.cp.project_back(t.input.row(u), row, &mut g.d_w);
            for (o, x) in d_in.row_mut(u).iter_mut().zip(dx) {
                *o += x;
            }
        }
    }
    if let Some(m) = &t.mask {
        for (x, s) in d_in.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *x *= s;
        }
    }
    Ok(d_in)
}
