//! Graphs with self-loops, neighbor sampling and synthetic generators.

pub mod io;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Train / validation / test node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffled 60/20/20 partition of `0..n`.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut ids: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = (n as f64 * 0.2).round() as usize;
        let test = ids.split_off((n_train + n_val).min(n));
        let val = ids.split_off(n_train.min(ids.len()));
        Self {
            train: ids,
            val,
            test,
        }
    }

    /// Ids in range and the three sets pairwise disjoint.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &v in set {
                if v >= n {
                    return Err(Error::invalid(format!("{name} split id {v} out of range (n = {n})")));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::invalid(format!("node {v} appears twice across splits")));
                }
            }
        }
        Ok(())
    }

    pub fn is_partition_of(&self, n: usize) -> bool {
        self.validate(n).is_ok() && self.train.len() + self.val.len() + self.test.len() == n
    }
}

/// Undirected graph in CSR form; every node's adjacency contains itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Matrix,
    labels: Vec<usize>,
    split: Option<Split>,
}

impl Graph {
    /// Builds the symmetric closure of `edges` plus a self-loop per node.
    /// Duplicate edges collapse. `labels` may be empty (graph-level tasks).
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        if features.rows() != n {
            return Err(Error::dim("feature rows", n, features.rows()));
        }
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::dim("labels", n, labels.len()));
        }
        let mut adj: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
        for &(s, t) in edges {
            if s >= n || t >= n {
                return Err(Error::invalid(format!("edge ({s}, {t}) out of range (n = {n})")));
            }
            adj[s].push(t);
            adj[t].push(s);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        Ok(Self {
            offsets,
            targets,
            features,
            labels,
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Result<Self> {
        split.validate(self.n_nodes())?;
        self.split = Some(split);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Undirected edges, self-loops excluded.
    pub fn n_edges(&self) -> usize {
        (self.targets.len() - self.n_nodes()) / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    pub fn csr(&self) -> (&[usize], &[usize]) {
        (&self.offsets, &self.targets)
    }

    /// Undirected edge list `(u, v)` with `u < v`.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        (0..self.n_nodes())
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    /// Relabels node `v` as `perm[v]`, carrying features, labels and split along.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes();
        let mut inv = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(Error::dim("permutation", n, perm.len()));
        }
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inv[new] != usize::MAX {
                return Err(Error::invalid("relabeling is not a permutation"));
            }
            inv[new] = old;
        }
        let edges: Vec<(usize, usize)> =
            self.edge_list().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        let features = Matrix::from_fn(n, self.feature_dim(), |i, j| self.features.get(inv[i], j));
        let labels = if self.labels.is_empty() {
            Vec::new()
        } else {
            (0..n).map(|i| self.labels[inv[i]]).collect()
        };
        let mut g = Graph::from_edges(n, &edges, features, labels)?;
        if let Some(s) = &self.split {
            let map = |ids: &[usize]| ids.iter().map(|&v| perm[v]).collect();
            g.split = Some(Split {
                train: map(&s.train),
                val: map(&s.val),
                test: map(&s.test),
            });
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub k: usize,
    /// When `|N(v)| < k`, draw with replacement until `k` ids. When false the
    /// whole neighborhood is returned instead.
    pub with_replacement_on_deficit: bool,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            k: 5,
            with_replacement_on_deficit: true,
            seed: 0,
        }
    }
}

/// Uniform draw of `spec.k` ids from `N(v)` (self-loop included): without
/// replacement when the neighborhood is large enough, with replacement otherwise.
pub fn sample_neighborhood(g: &Graph, v: usize, spec: &SampleSpec, rng: &mut impl Rng) -> Vec<usize> {
    let nbrs = g.neighbors(v);
    let k = spec.k;
    if nbrs.len() >= k {
        index::sample(rng, nbrs.len(), k).into_iter().map(|i| nbrs[i]).collect()
    } else if spec.with_replacement_on_deficit {
        (0..k).map(|_| nbrs[rng.random_range(0..nbrs.len())]).collect()
    } else {
        nbrs.to_vec()
    }
}

/// Deterministic RNG for one node in one sampling round. Streams are
/// independent across nodes, so results do not depend on visiting order.
pub fn node_stream(seed: u64, round: u64, node: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&round.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(node as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub classes: usize,
    pub per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// `classes × feature_dim`. Drawn from `N(0, mean_scale²)` when absent.
    pub class_means: Option<Matrix>,
    pub mean_scale: f64,
    /// Standard deviation of the per-node Gaussian feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 200,
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 16,
            class_means: None,
            mean_scale: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Stochastic block model with Gaussian class-conditional features and a
/// random 60/20/20 split. Node `v` belongs to class `v / per_class`.
pub fn generate_sbm(p: &SbmParams) -> Result<Graph> {
    if p.classes == 0 || p.per_class == 0 || p.feature_dim == 0 {
        return Err(Error::invalid(format!(
            "SBM needs classes, per_class and feature_dim >= 1 (got {}, {}, {})",
            p.classes, p.per_class, p.feature_dim
        )));
    }
    for (name, v) in [("p_in", p.p_in), ("p_out", p.p_out)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} is not a probability")));
        }
    }
    if !(p.noise >= 0.0) || !(p.mean_scale >= 0.0) {
        return Err(Error::invalid("noise and mean_scale must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means = match &p.class_means {
        Some(m) => {
            if m.shape() != (p.classes, p.feature_dim) {
                return Err(Error::dim(
                    "class means",
                    format!("({}, {})", p.classes, p.feature_dim),
                    format!("{:?}", m.shape()),
                ));
            }
            m.clone()
        }
        None => Matrix::from_fn(p.classes, p.feature_dim, |_, _| {
            p.mean_scale * normal.sample(&mut rng)
        }),
    };
    let n = p.classes * p.per_class;
    let labels: Vec<usize> = (0..n).map(|v| v / p.per_class).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let prob = if labels[u] == labels[v] { p.p_in } else { p.p_out };
            if rng.random_bool(prob) {
                edges.push((u, v));
            }
        }
    }
    let features = Matrix::from_fn(n, p.feature_dim, |v, j| {
        means.get(labels[v], j) + p.noise * normal.sample(&mut rng)
    });
    let split = Split::random(n, &mut rng);
    Graph::from_edges(n, &edges, features, labels)?.with_split(split)
}

/// Graph with a real-valued target vector, for graph-level regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSample {
    pub graph: Graph,
    pub target: Vec<f64>,
}

/// Random Erdős–Rényi graphs whose target is the mean number of neighbors
/// per node (self-loop excluded). Features are i.i.d. uniform in `[0, 1)`.
pub fn generate_degree_regression(
    count: usize,
    nodes: std::ops::RangeInclusive<usize>,
    edge_prob: f64,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<GraphSample>> {
    if *nodes.start() == 0 || nodes.is_empty() || feature_dim == 0 {
        return Err(Error::invalid("graphs need at least one node and one feature"));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::invalid(format!("edge_prob = {edge_prob} is not a probability")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(nodes.clone());
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random_bool(edge_prob) {
                        edges.push((u, v));
                    }
                }
            }
            let features = Matrix::from_fn(n, feature_dim, |_, _| rng.random::<f64>());
            let graph = Graph::from_edges(n, &edges, features, Vec::new())?;
            let target = vec![2.0 * graph.n_edges() as f64 / n as f64];
            Ok(GraphSample { graph, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(n, edges, Matrix::zeros(n, 1), vec![0; n]).unwrap()
    }

    #[test]
    fn self_loops_and_symmetry() {
        let g = tiny(4, &[(0, 1), (1, 2), (1, 0)]);
        for v in 0..4 {
            assert!(g.neighbors(v).contains(&v));
        }
        assert_eq!(g.neighbors(1), &[0, 1, 2]);
        assert_eq!(g.neighbors(3), &[3]);
        assert_eq!(g.n_edges(), 2);
        let (offsets, targets) = g.csr();
        assert!(offsets.windows(2).all(|w| w[0] <= w[1]));
        assert!(targets.iter().all(|&t| t < 4));
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(Graph::from_edges(0, &[], Matrix::zeros(0, 1), vec![]).is_err());
        assert!(Graph::from_edges(2, &[(0, 2)], Matrix::zeros(2, 1), vec![]).is_err());
        assert!(Graph::from_edges(2, &[], Matrix::zeros(3, 1), vec![]).is_err());
    }

    #[test]
    fn isolated_node_samples_itself() {
        let g = tiny(3, &[(0, 1)]);
        let mut rng = node_stream(1, 0, 2);
        assert_eq!(sample_neighborhood(&g, 2, &SampleSpec::default(), &mut rng), vec![2; 5]);
    }

    #[test]
    fn deficit_without_replacement_returns_neighborhood() {
        let g = tiny(3, &[(0, 1)]);
        let spec = SampleSpec { with_replacement_on_deficit: false, ..SampleSpec::default() };
        let mut rng = node_stream(1, 0, 0);
        assert_eq!(sample_neighborhood(&g, 0, &spec, &mut rng), vec![0, 1]);
    }

    #[test]
    fn star_center_sampling_is_uniform() {
        let edges: Vec<(usize, usize)> = (1..=10).map(|l| (0, l)).collect();
        let g = tiny(11, &edges);
        let spec = SampleSpec { k: 3, ..SampleSpec::default() };
        let draws = 10_000;
        let mut counts = [0usize; 11];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..draws {
            let s = sample_neighborhood(&g, 0, &spec, &mut rng);
            assert_eq!(s.len(), 3);
            let mut d = s.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 3, "no repeats when the neighborhood is large enough");
            for v in s {
                counts[v] += 1;
            }
        }
        // each id is included with probability 3/11
        let p = 3.0 / 11.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (v, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "node {v}: {c} vs {mean}±{sd}");
        }
        // chi-square over the 11 cells with 10 dof; 99.9% quantile is 29.59
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 29.59, "chi2 {chi2}");
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let edges: Vec<(usize, usize)> = (1..=10).map(|l| (0, l)).collect();
        let g = tiny(11, &edges);
        let spec = SampleSpec::default();
        let a = sample_neighborhood(&g, 0, &spec, &mut node_stream(7, 3, 0));
        let b = sample_neighborhood(&g, 0, &spec, &mut node_stream(7, 3, 0));
        let c = sample_neighborhood(&g, 0, &spec, &mut node_stream(7, 4, 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sbm_cliques() {
        let p = SbmParams { per_class: 5, p_in: 1.0, p_out: 0.0, feature_dim: 2, ..SbmParams::default() };
        let g = generate_sbm(&p).unwrap();
        assert_eq!(g.n_nodes(), 10);
        for v in 0..10 {
            let expect: Vec<usize> = if v < 5 { (0..5).collect() } else { (5..10).collect() };
            assert_eq!(g.neighbors(v), expect.as_slice());
        }
        assert_eq!(g.n_edges(), 20);
    }

    #[test]
    fn sbm_rejects_degenerate_sizes() {
        assert!(generate_sbm(&SbmParams { per_class: 0, ..SbmParams::default() }).is_err());
        assert!(generate_sbm(&SbmParams { p_in: 1.5, ..SbmParams::default() }).is_err());
    }

    #[test]
    fn sbm_split_partitions() {
        let g = generate_sbm(&SbmParams::default()).unwrap();
        let s = g.split().unwrap();
        assert!(s.is_partition_of(g.n_nodes()));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (240, 80, 80));
    }

    #[test]
    fn sbm_is_deterministic() {
        let a = generate_sbm(&SbmParams::default()).unwrap();
        let b = generate_sbm(&SbmParams::default()).unwrap();
        assert_eq!(a, b);
    }

    /// Logistic regression by full-batch gradient descent; returns accuracy.
    fn logistic_probe(x: &Matrix, y: &[usize], train: &[usize], test: &[usize]) -> f64 {
        let f = x.cols();
        let mut w = vec![0.0; f + 1];
        for _ in 0..500 {
            let mut g = vec![0.0; f + 1];
            for &v in train {
                let z = w[f] + crate::tensor::dot(&w[..f], x.row(v));
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - y[v] as f64;
                for j in 0..f {
                    g[j] += e * x.get(v, j);
                }
                g[f] += e;
            }
            for (wj, gj) in w.iter_mut().zip(&g) {
                *wj -= 0.1 * gj / train.len() as f64;
            }
        }
        let correct = test
            .iter()
            .filter(|&&v| {
                let z = w[f] + crate::tensor::dot(&w[..f], x.row(v));
                (z > 0.0) == (y[v] == 1)
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn sbm_features_are_linearly_separable_at_low_noise() {
        let p = SbmParams { noise: 0.1, ..SbmParams::default() };
        let g = generate_sbm(&p).unwrap();
        let s = g.split().unwrap();
        let acc = logistic_probe(g.features(), g.labels(), &s.train, &s.test);
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn relabeling_moves_everything() {
        let g = generate_sbm(&SbmParams { per_class: 5, feature_dim: 2, ..SbmParams::default() }).unwrap();
        let perm: Vec<usize> = (0..10).rev().collect();
        let h = g.relabeled(&perm).unwrap();
        for v in 0..10 {
            assert_eq!(h.labels()[perm[v]], g.labels()[v]);
            assert_eq!(h.features().row(perm[v]), g.features().row(v));
            let mut mapped: Vec<usize> = g.neighbors(v).iter().map(|&u| perm[u]).collect();
            mapped.sort_unstable();
            assert_eq!(h.neighbors(perm[v]), mapped.as_slice());
        }
        assert!(h.split().unwrap().is_partition_of(10));
    }

    #[test]
    fn degree_regression_targets() {
        let data = generate_degree_regression(5, 3..=6, 0.5, 2, 1).unwrap();
        for s in &data {
            let n = s.graph.n_nodes();
            let deg: usize = (0..n).map(|v| s.graph.degree(v) - 1).sum();
            assert_eq!(s.target[0], deg as f64 / n as f64);
        }
    }
}
