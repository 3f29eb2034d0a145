//! Readers and writers for the on-disk dataset formats.
//!
//! * edges: one `src<TAB>dst` pair per line, 0-indexed. Blank lines and lines
//!   starting with `#` are skipped.
//! * features: CSV without header, one row of reals per node.
//! * labels: CSV `node,label`, optional header row.
//! * splits: three lines of space-separated node ids (train, val, test).
//! * graph collections: JSON lines of `{"edges": [[u,v],..], "features": [[..],..], "target": [..]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Graph, GraphSample, Split};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn parse_id(path: &Path, line: u64, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a node id, got {s:?}")))
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let no = i as u64 + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut parts = t.split('\t');
        let (Some(s), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, no, "expected `src<TAB>dst`"));
        };
        edges.push((parse_id(path, no, s)?, parse_id(path, no, d)?));
    }
    Ok(edges)
}

pub fn write_edges(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut w = create(path)?;
    for (s, d) in edges {
        writeln!(w, "{s}\t{d}")?;
    }
    w.flush()?;
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in csv_reader(path)?.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(parse_err(path, line, format!("expected {c} columns, got {}", rec.len())))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("expected a number, got {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite feature {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    let Some(cols) = cols else {
        return Err(parse_err(path, 1, "feature file is empty"));
    };
    Matrix::new(rows, cols, data)
}

pub fn write_features(path: &Path, x: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(create(path)?);
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Returns labels indexed by node. Every node in `0..n` must appear exactly once.
pub fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut labels = vec![usize::MAX; n];
    for (i, rec) in csv_reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected `node,label`"));
        }
        if i == 0 && rec[0].parse::<usize>().is_err() {
            continue;
        }
        let node = parse_id(path, line, &rec[0])?;
        let label = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("expected a class id, got {:?}", &rec[1])))?;
        if node >= n {
            return Err(parse_err(path, line, format!("node {node} out of range (n = {n})")));
        }
        if labels[node] != usize::MAX {
            return Err(parse_err(path, line, format!("node {node} labeled twice")));
        }
        labels[node] = label;
    }
    if let Some(v) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(parse_err(path, 0, format!("node {v} has no label")));
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "node,label")?;
    for (v, l) in labels.iter().enumerate() {
        writeln!(w, "{v},{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Split> {
    let mut sets = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let no = i as u64 + 1;
        if sets.len() == 3 {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(path, no, "split file has more than three lines"));
        }
        let ids = line
            .split_whitespace()
            .map(|s| parse_id(path, no, s))
            .collect::<Result<Vec<_>>>()?;
        sets.push(ids);
    }
    if sets.len() != 3 {
        return Err(parse_err(path, sets.len() as u64, "split file needs three lines (train, val, test)"));
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Split { train, val, test })
}

pub fn write_split(path: &Path, split: &Split) -> Result<()> {
    let mut w = create(path)?;
    for set in [&split.train, &split.val, &split.test] {
        let line: Vec<String> = set.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Paths of a node-classification dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub splits: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            edges: dir.join("edges.tsv"),
            features: dir.join("features.csv"),
            labels: dir.join("labels.csv"),
            splits: Some(dir.join("split.txt")),
        }
    }
}

/// Loads a node dataset. Without a split file a random 60/20/20 split is drawn
/// from `split_seed`.
pub fn load_dataset(paths: &DatasetPaths, split_seed: u64) -> Result<Graph> {
    let features = read_features(&paths.features)?;
    let n = features.rows();
    let edges = read_edges(&paths.edges)?;
    if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n || d >= n) {
        return Err(Error::dim(
            format!("edge ({s}, {d}) in {}", paths.edges.display()),
            format!("node ids < {n} (feature rows)"),
            s.max(d),
        ));
    }
    let labels = read_labels(&paths.labels, n)?;
    let split = match &paths.splits {
        Some(p) => read_split(p)?,
        None => {
            use rand::SeedableRng;
            Split::random(n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(split_seed))
        }
    };
    Graph::from_edges(n, &edges, features, labels)?.with_split(split)
}

pub fn save_dataset(g: &Graph, paths: &DatasetPaths) -> Result<()> {
    write_edges(&paths.edges, &g.edge_list())?;
    write_features(&paths.features, g.features())?;
    write_labels(&paths.labels, g.labels())?;
    if let (Some(p), Some(s)) = (&paths.splits, g.split()) {
        write_split(p, s)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    target: Vec<f64>,
}

pub fn read_graph_collection(path: &Path) -> Result<Vec<GraphSample>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, no, e.to_string()))?;
        let features = Matrix::from_rows(&rec.features).map_err(|e| parse_err(path, no, e.to_string()))?;
        let graph = Graph::from_edges(features.rows(), &rec.edges, features, Vec::new())
            .map_err(|e| parse_err(path, no, e.to_string()))?;
        out.push(GraphSample {
            graph,
            target: rec.target,
        });
    }
    Ok(out)
}

pub fn write_graph_collection(path: &Path, samples: &[GraphSample]) -> Result<()> {
    let mut w = create(path)?;
    for s in samples {
        let x = s.graph.features();
        let rec = GraphRecord {
            edges: s.graph.edge_list(),
            features: (0..x.rows()).map(|i| x.row(i).to_vec()).collect(),
            target: s.target.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_degree_regression, generate_sbm, SbmParams};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_sbm(&SbmParams { per_class: 10, feature_dim: 3, ..SbmParams::default() }).unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        save_dataset(&g, &paths).unwrap();
        let h = load_dataset(&paths, 0).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn missing_split_draws_one() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_sbm(&SbmParams { per_class: 10, feature_dim: 3, ..SbmParams::default() }).unwrap();
        let mut paths = DatasetPaths::in_dir(dir.path());
        paths.splits = None;
        save_dataset(&g, &paths).unwrap();
        let h = load_dataset(&paths, 3).unwrap();
        assert!(h.split().unwrap().is_partition_of(20));
    }

    #[test]
    fn self_loops_added_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("edges.tsv"), "0\t1\n").unwrap();
        std::fs::write(p.join("features.csv"), "1,2\n3,4\n5,6\n").unwrap();
        std::fs::write(p.join("labels.csv"), "node,label\n0,0\n1,1\n2,0\n").unwrap();
        std::fs::write(p.join("split.txt"), "0\n1\n2\n").unwrap();
        let g = load_dataset(&DatasetPaths::in_dir(p), 0).unwrap();
        for v in 0..3 {
            assert!(g.neighbors(v).contains(&v));
        }
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("edges.tsv");
        std::fs::write(&e, "0\t1\n1 2\n").unwrap();
        let msg = read_edges(&e).unwrap_err().to_string();
        assert!(msg.contains("edges.tsv:2"), "{msg}");

        let f = dir.path().join("features.csv");
        std::fs::write(&f, "1,2\n3,x\n").unwrap();
        let msg = read_features(&f).unwrap_err().to_string();
        assert!(msg.contains("features.csv:2"), "{msg}");

        let l = dir.path().join("labels.csv");
        std::fs::write(&l, "0,0\n0,1\n").unwrap();
        let msg = read_labels(&l, 2).unwrap_err().to_string();
        assert!(msg.contains("labels.csv:2") && msg.contains("twice"), "{msg}");

        let s = dir.path().join("split.txt");
        std::fs::write(&s, "0 1\n2\n").unwrap();
        assert!(read_split(&s).is_err());
    }

    #[test]
    fn edge_out_of_range_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("edges.tsv"), "0\t5\n").unwrap();
        std::fs::write(p.join("features.csv"), "1\n2\n").unwrap();
        std::fs::write(p.join("labels.csv"), "0,0\n1,0\n").unwrap();
        let mut paths = DatasetPaths::in_dir(p);
        paths.splits = None;
        let msg = load_dataset(&paths, 0).unwrap_err().to_string();
        assert!(msg.contains("edges.tsv"), "{msg}");
    }

    #[test]
    fn overlapping_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("edges.tsv"), "").unwrap();
        std::fs::write(p.join("features.csv"), "1\n2\n").unwrap();
        std::fs::write(p.join("labels.csv"), "0,0\n1,0\n").unwrap();
        std::fs::write(p.join("split.txt"), "0\n0\n1\n").unwrap();
        assert!(load_dataset(&DatasetPaths::in_dir(p), 0).is_err());
    }

    #[test]
    fn graph_collection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graphs.jsonl");
        let data = generate_degree_regression(4, 1..=5, 0.4, 2, 9).unwrap();
        write_graph_collection(&path, &data).unwrap();
        assert_eq!(read_graph_collection(&path).unwrap(), data);
    }
}
