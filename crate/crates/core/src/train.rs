//! Losses, the optimizer, training loops with early stopping, checkpoints and
//! a finite-difference gradient checker.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSample, SampleSpec, Split};
use crate::model::{Dropout, ModelGrads, Neighborhood, NeighborhoodPlan, Pooling, TgnnModel};
use crate::tensor::Matrix;

/// Sampling round reserved for evaluation, so evaluation never shares draws
/// with a training epoch.
pub const EVAL_ROUND: u64 = u64::MAX;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Graph,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Node => "node",
            Task::Graph => "graph",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Task::Node),
            "graph" => Ok(Task::Graph),
            _ => Err(Error::invalid(format!("unknown task {s:?} (expected node or graph)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub pooling: Pooling,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub rank: usize,
    pub hidden: usize,
    /// Message-passing layers. For node tasks the last one emits logits.
    pub layers: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub sample_k: usize,
    pub stabilize_readout: bool,
    /// Graphs per optimizer step (graph tasks).
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Node,
            pooling: Pooling::CpSum,
            lr: 0.001,
            weight_decay: 5e-5,
            dropout: 0.9,
            rank: 512,
            hidden: 32,
            layers: 2,
            epochs: 200,
            patience: 100,
            seed: 0,
            sample_k: 5,
            stabilize_readout: false,
            batch_size: 32,
        }
    }
}

/// `(name, task, lr, weight decay, dropout, rank)` for the published dataset rows.
const PRESETS: [(&str, Task, f64, f64, f64, usize); 10] = [
    ("cora", Task::Node, 0.001, 5e-5, 0.9, 512),
    ("citeseer", Task::Node, 0.001, 1e-4, 0.0, 512),
    ("pubmed", Task::Node, 0.005, 5e-4, 0.1, 512),
    ("products", Task::Node, 0.001, 5e-5, 0.3, 128),
    ("arxiv", Task::Node, 0.003, 5e-5, 0.0, 512),
    ("proteins", Task::Graph, 0.0005, 5e-4, 0.9, 50),
    ("zinc", Task::Graph, 0.005, 5e-4, 0.0, 100),
    ("cifar10", Task::Graph, 0.005, 1e-4, 0.0, 100),
    ("mnist", Task::Graph, 0.005, 5e-5, 0.0, 75),
    ("molhiv", Task::Graph, 0.001, 5e-5, 0.8, 100),
];

impl TrainConfig {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn preset(name: &str) -> Option<TrainConfig> {
        let lower = name.to_ascii_lowercase();
        PRESETS.iter().find(|p| p.0 == lower).map(|&(_, task, lr, weight_decay, dropout, rank)| TrainConfig {
            task,
            lr,
            weight_decay,
            dropout,
            rank,
            ..TrainConfig::default()
        })
    }

    /// `lr` may be 0 (a frozen run); it may not be negative.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay = {} must be finite and non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        if self.rank == 0 || self.hidden == 0 || self.layers == 0 || self.sample_k == 0 || self.batch_size == 0 {
            return bad("rank, hidden, layers, sample_k and batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec {
            k: self.sample_k,
            with_replacement_on_deficit: true,
            seed: self.seed,
        }
    }

    pub fn build_node_model(&self, f: usize, classes: usize) -> Result<TgnnModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let hidden = vec![self.hidden; self.layers - 1];
        let mut m = TgnnModel::node_classifier(f, &hidden, classes, self.rank, self.pooling, &mut rng)?;
        m.dropout = self.dropout;
        m.neighborhood = Neighborhood::Sampled(self.sample_spec());
        Ok(m)
    }

    pub fn build_graph_model(&self, f: usize, out: usize) -> Result<TgnnModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let hidden = vec![self.hidden; self.layers];
        let mut m =
            TgnnModel::graph_regressor(f, &hidden, out, self.rank, self.pooling, self.stabilize_readout, &mut rng)?;
        m.dropout = self.dropout;
        Ok(m)
    }
}

/// Mean softmax cross-entropy over rows, with its gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} of row {i} exceeds {c} classes")));
        }
        let row = logits.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
        let s: f64 = exps.iter().sum();
        total += s.ln() + mx - row[y];
        for (g, e) in grad.row_mut(i).iter_mut().zip(&exps) {
            *g = e / s / n as f64;
        }
        grad.row_mut(i)[y] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Mean absolute error over all entries, with its (sub)gradient.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::invalid("MAE over an empty batch"));
    }
    if pred.len() != target.len() {
        return Err(Error::dim("MAE target", pred.len(), target.len()));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = [logits.row(i)];
            let pred = (0..logits.cols()).fold(0, |b, c| if row[0][c] > row[0][b] { c } else { b });
            pred == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam step with decoupled weight decay:
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("Adam step", params.len(), format!("{} grads, {} state", grads.len(), state.m.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("Adam step: gradient entry {i} is non-finite")));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let step = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        *p -= lr * (step + weight_decay * *p);
    }
    Ok(())
}

/// Largest relative error `|a − b| / max(|a|, |b|, 1e-8)` between `analytic`
/// and central differences of `f` at `x`.
pub fn finite_diff_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Smallest non-zero gradient magnitude a central difference with `h = 1e-5`
/// resolves to 1e-4 relative accuracy when the function is O(1): below it the
/// difference is dominated by roundoff in `f`.
pub const FD_MIN_GRAD: f64 = 1e-6;

/// Whether every coordinate of `analytic` is exactly zero or at least
/// [`FD_MIN_GRAD`] in magnitude. Zeros stay checkable: a wrongly dropped
/// gradient shows up as a non-zero difference.
pub fn fd_resolvable(analytic: &[f64]) -> bool {
    analytic.iter().all(|g| *g == 0.0 || g.abs() >= FD_MIN_GRAD)
}

/// Metrics of one epoch, measured in evaluation mode (no dropout, fixed
/// evaluation neighborhoods). Accuracies for node tasks, MAE for graph tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mae: Option<f64>,
    /// Wall-clock of the epoch (training step plus evaluation).
    pub seconds: f64,
}

impl EpochMetrics {
    /// The same record with the wall-clock zeroed, for determinism checks.
    pub fn without_time(&self) -> EpochMetrics {
        EpochMetrics { seconds: 0.0, ..self.clone() }
    }
}

/// Loss and accuracy (node) or MAE (graph) of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub pooling: Pooling,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub params: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mae: Option<f64>,
    pub optimizer: String,
    pub early_stopping: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub model: TgnnModel,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(config: TrainConfig, model: TgnnModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(r)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::invalid(format!("{}: config hash does not match its config", path.display())));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub summary: Summary,
    pub best: Checkpoint,
}

fn optimizer_note(cfg: &TrainConfig) -> String {
    format!(
        "adam(beta1={ADAM_BETA1}, beta2={ADAM_BETA2}, eps={ADAM_EPS}) with decoupled weight decay {}",
        cfg.weight_decay
    )
}

fn ctx(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Loss and accuracy of `nodes` under a fixed plan, without dropout.
pub fn evaluate_node(model: &TgnnModel, g: &Graph, plan: &NeighborhoodPlan, nodes: &[usize]) -> Result<SplitMetrics> {
    let (logits, _) = model.node_forward(g, plan, None)?;
    node_metrics(&logits, g.labels(), nodes)
}

fn node_metrics(logits: &Matrix, labels: &[usize], nodes: &[usize]) -> Result<SplitMetrics> {
    if nodes.is_empty() {
        return Ok(SplitMetrics { loss: 0.0, acc: Some(0.0), mae: None });
    }
    let sub = Matrix::from_fn(nodes.len(), logits.cols(), |i, j| logits.get(nodes[i], j));
    let y: Vec<usize> = nodes.iter().map(|&v| labels[v]).collect();
    let (loss, _) = cross_entropy(&sub, &y)?;
    Ok(SplitMetrics {
        loss,
        acc: Some(accuracy(&sub, &y)),
        mae: None,
    })
}

/// The evaluation plan of a node model on `g`.
pub fn eval_plan(model: &TgnnModel, g: &Graph) -> NeighborhoodPlan {
    model.plan(g, EVAL_ROUND)
}

/// Full-batch node classification on the train split, early stopping on
/// validation accuracy (ties broken by lower validation loss).
pub fn train_node(g: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_node_with(g, cfg, |_| {})
}

/// [`train_node`] with a callback per finished epoch.
pub fn train_node_with(g: &Graph, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = g.split().ok_or_else(|| Error::invalid("graph has no train/val/test split"))?;
    split.validate(g.n_nodes())?;
    if split.train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    if g.labels().len() != g.n_nodes() {
        return Err(Error::invalid("node classification needs one label per node"));
    }
    let classes = g.num_classes().max(2);
    let mut model = cfg.build_node_model(g.feature_dim(), classes)?;
    let mut adam = AdamState::new(model.flat_params().len());
    let plan_eval = eval_plan(&model, g);
    let train_labels: Vec<usize> = split.train.iter().map(|&v| g.labels()[v]).collect();
    let start = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, TgnnModel)> = None;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let plan = model.plan(g, epoch as u64);
        let dropout = Dropout { rate: cfg.dropout, seed: cfg.seed, round: epoch as u64 };
        let (logits, trace) = model.node_forward(g, &plan, Some(dropout)).map_err(ctx(epoch))?;
        let sub = Matrix::from_fn(split.train.len(), logits.cols(), |i, j| logits.get(split.train[i], j));
        let (loss, d_sub) = cross_entropy(&sub, &train_labels)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("epoch {epoch}: training loss is non-finite")));
        }
        let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &v) in split.train.iter().enumerate() {
            d_logits.row_mut(v).copy_from_slice(d_sub.row(i));
        }
        let mut grads = ModelGrads::zeros(&model);
        model.node_backward(&trace, &d_logits, &mut grads).map_err(ctx(epoch))?;
        let mut params = model.flat_params();
        adam_step(&mut params, &grads.flatten(&model), &mut adam, cfg.lr, cfg.weight_decay).map_err(ctx(epoch))?;
        model.set_flat_params(&params)?;

        let (logits, _) = model.node_forward(g, &plan_eval, None).map_err(ctx(epoch))?;
        let tr = node_metrics(&logits, g.labels(), &split.train)?;
        let va = node_metrics(&logits, g.labels(), &split.val)?;
        let te = node_metrics(&logits, g.labels(), &split.test)?;
        if !tr.loss.is_finite() || !va.loss.is_finite() {
            return Err(Error::numerical(format!("epoch {epoch}: evaluation loss is non-finite")));
        }
        let m = EpochMetrics {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            test_loss: te.loss,
            train_acc: tr.acc,
            val_acc: va.acc,
            test_acc: te.acc,
            train_mae: None,
            val_mae: None,
            test_mae: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
        let score = (va.acc.unwrap(), -va.loss);
        let improved = best.as_ref().is_none_or(|(a, l, _, _)| score > (*a, *l));
        if improved {
            best = Some((score.0, score.1, epoch, model.clone()));
        } else if epoch - best.as_ref().unwrap().2 >= cfg.patience {
            break;
        }
    }
    let (_, _, best_epoch, best_model) = match best {
        Some(b) => b,
        None => (0.0, 0.0, 0, model),
    };
    let train = evaluate_node(&best_model, g, &plan_eval, &split.train)?;
    let val = evaluate_node(&best_model, g, &plan_eval, &split.val)?;
    let test = evaluate_node(&best_model, g, &plan_eval, &split.test)?;
    let summary = Summary {
        task: Task::Node,
        pooling: cfg.pooling,
        best_epoch,
        epochs_run: history.len(),
        params: best_model.flat_params().len(),
        train,
        val,
        test,
        test_acc: test.acc,
        test_mae: None,
        optimizer: optimizer_note(cfg),
        early_stopping: format!("max val_acc (ties: min val_loss), patience {}", cfg.patience),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        history,
        summary,
        best: Checkpoint::new(cfg.clone(), best_model),
    })
}

/// MAE of a graph model over `ids`.
pub fn evaluate_graphs(model: &TgnnModel, data: &[GraphSample], ids: &[usize]) -> Result<SplitMetrics> {
    if ids.is_empty() {
        return Ok(SplitMetrics { loss: 0.0, acc: None, mae: Some(0.0) });
    }
    let graphs: Vec<&Graph> = ids.iter().map(|&i| &data[i].graph).collect();
    let (preds, _) = model.graph_forward(&graphs, EVAL_ROUND, None)?;
    let pred: Vec<f64> = preds.concat();
    let target: Vec<f64> = ids.iter().flat_map(|&i| data[i].target.iter().copied()).collect();
    let (loss, _) = mae(&pred, &target)?;
    Ok(SplitMetrics { loss, acc: None, mae: Some(loss) })
}

/// The 60/20/20 split over graph indices used by [`train_graph`].
pub fn graph_split(n: usize, seed: u64) -> Split {
    Split::random(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mini-batch graph regression with MAE loss, early stopping on validation MAE.
pub fn train_graph(data: &[GraphSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_graph_with(data, cfg, |_| {})
}

pub fn train_graph_with(
    data: &[GraphSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::invalid("graph dataset is empty"))?;
    let (f, out) = (first.graph.feature_dim(), first.target.len());
    if out == 0 {
        return Err(Error::invalid("graph targets must be non-empty"));
    }
    for (i, s) in data.iter().enumerate() {
        if s.graph.feature_dim() != f {
            return Err(Error::dim(format!("features of graph {i}"), f, s.graph.feature_dim()));
        }
        if s.target.len() != out {
            return Err(Error::dim(format!("target of graph {i}"), out, s.target.len()));
        }
    }
    let split = graph_split(data.len(), cfg.seed);
    if split.train.is_empty() {
        return Err(Error::invalid("too few graphs for a train split"));
    }
    let mut model = cfg.build_graph_model(f, out)?;
    let mut adam = AdamState::new(model.flat_params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB47C_4E55);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TgnnModel)> = None;
    let mut order = split.train.clone();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let graphs: Vec<&Graph> = batch.iter().map(|&i| &data[i].graph).collect();
            let round = (epoch as u64) << 32 | b as u64;
            let dropout = Dropout { rate: cfg.dropout, seed: cfg.seed, round };
            let (preds, traces) = model.graph_forward(&graphs, round, Some(dropout)).map_err(ctx(epoch))?;
            let pred: Vec<f64> = preds.concat();
            let target: Vec<f64> = batch.iter().flat_map(|&i| data[i].target.iter().copied()).collect();
            let (loss, d_pred) = mae(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("epoch {epoch}: training loss is non-finite")));
            }
            let mut grads = ModelGrads::zeros(&model);
            for (t, d) in traces.iter().zip(d_pred.chunks(out)) {
                model.graph_backward(t, d, &mut grads).map_err(ctx(epoch))?;
            }
            let mut params = model.flat_params();
            adam_step(&mut params, &grads.flatten(&model), &mut adam, cfg.lr, cfg.weight_decay).map_err(ctx(epoch))?;
            model.set_flat_params(&params)?;
        }
        let tr = evaluate_graphs(&model, data, &split.train).map_err(ctx(epoch))?;
        let va = evaluate_graphs(&model, data, &split.val).map_err(ctx(epoch))?;
        let te = evaluate_graphs(&model, data, &split.test).map_err(ctx(epoch))?;
        if !tr.loss.is_finite() || !va.loss.is_finite() {
            return Err(Error::numerical(format!("epoch {epoch}: evaluation loss is non-finite")));
        }
        let m = EpochMetrics {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            test_loss: te.loss,
            train_acc: None,
            val_acc: None,
            test_acc: None,
            train_mae: tr.mae,
            val_mae: va.mae,
            test_mae: te.mae,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
        if best.as_ref().is_none_or(|(l, _, _)| va.loss < *l) {
            best = Some((va.loss, epoch, model.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.unwrap_or((0.0, 0, model));
    let train = evaluate_graphs(&best_model, data, &split.train)?;
    let val = evaluate_graphs(&best_model, data, &split.val)?;
    let test = evaluate_graphs(&best_model, data, &split.test)?;
    let summary = Summary {
        task: Task::Graph,
        pooling: cfg.pooling,
        best_epoch,
        epochs_run: history.len(),
        params: best_model.flat_params().len(),
        train,
        val,
        test,
        test_acc: None,
        test_mae: test.mae,
        optimizer: optimizer_note(cfg),
        early_stopping: format!("min val_mae, patience {}", cfg.patience),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        history,
        summary,
        best: Checkpoint::new(cfg.clone(), best_model),
    })
}

pub fn write_metrics_jsonl(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in history {
        serde_json::to_writer(&mut w, m)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
