//! The `tgnn` command line: verify, train, eval, bench, generate.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed checks), 2 usage
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{bench_node_scaling, bench_rank_scaling, bench_sum_rank_scaling, doubling_ranks, BenchResult};
use crate::graph::io::{load_dataset, read_graph_collection, save_dataset, write_graph_collection, DatasetPaths};
use crate::graph::{generate_degree_regression, generate_sbm, GraphSample, SbmParams};
use crate::model::Pooling;
use crate::train::{
    eval_plan, evaluate_graphs, evaluate_node, graph_split, train_graph_with, train_node_with, write_metrics_jsonl,
    write_summary, Checkpoint, EpochMetrics, SplitMetrics, Task, TrainConfig, TrainOutcome,
};
use crate::verify::{run_suite, SUITES};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tgnn", version, about = "Tensorized GNNs with CP pooling layers")]
pub struct Cli {
    /// Print per-epoch metrics and progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomized property suites.
    Verify {
        /// Run a single suite.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes metrics.jsonl, summary.json and checkpoint.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print the metric as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Time CP pooling against rank or set size; writes CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchAxis::Rank)]
        axis: BenchAxis,
        #[arg(long, default_value_t = 64)]
        f_in: usize,
        #[arg(long, default_value_t = 16)]
        f_out: usize,
        /// Set size for the rank sweeps.
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Rank grid (comma separated) for the rank sweeps, rank for `nodes`.
        #[arg(long, value_delimiter = ',', default_values_t = doubling_ranks(8, 1024))]
        ranks: Vec<usize>,
        /// Set-size grid for `nodes`.
        #[arg(long, value_delimiter = ',', default_values_t = doubling_ranks(64, 4096))]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, value_enum, default_value_t = GenKind::Sbm)]
        kind: GenKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 0.05)]
        p_in: f64,
        #[arg(long, default_value_t = 0.005)]
        p_out: f64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        mean_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Number of graphs (`degree`).
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchAxis {
    Rank,
    Sum,
    Nodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    /// Node classification: edges.tsv, features.csv, labels.csv, split.txt.
    Sbm,
    /// Graph regression on mean degree: graphs.jsonl.
    Degree,
}

/// Dataset location. Node tasks take `--dir` or the individual files; graph
/// tasks take `--graphs`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Directory with edges.tsv, features.csv, labels.csv and optionally split.txt.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub edges: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// JSON-lines graph collection (graph task).
    #[arg(long)]
    pub graphs: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// JSON file with any subset of the config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a published hyperparameter row (cora, pubmed, zinc, ...).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_k: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub stabilize_readout: bool,
}

/// Failure of a subcommand, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
    /// Checks ran but did not all pass.
    Failed,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CmdResult<T = ()> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CliError::Usage(msg.into()))
}

impl HyperArgs {
    /// Defaults, then the preset, then the config file, then flags.
    pub fn resolve(&self) -> CmdResult<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(p) => match TrainConfig::preset(p) {
                Some(c) => c,
                None => {
                    let names: Vec<&str> = TrainConfig::preset_names().collect();
                    return usage(format!("unknown preset '{p}' (expected one of {})", names.join(", ")));
                }
            },
            None => TrainConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let Some(fields) = overlay.as_object() else {
                return usage(format!("{}: expected a JSON object", path.display()));
            };
            let mut base = serde_json::to_value(&cfg).expect("config serializes");
            let obj = base.as_object_mut().expect("config is an object");
            for (k, v) in fields {
                obj.insert(k.clone(), v.clone());
            }
            cfg = serde_json::from_value(base).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(task => task, pooling => pooling, lr => lr, wd => weight_decay, dropout => dropout,
             rank => rank, hidden => hidden, layers => layers, epochs => epochs, patience => patience,
             seed => seed, sample_k => sample_k, batch_size => batch_size);
        if self.stabilize_readout {
            cfg.stabilize_readout = true;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

enum Dataset {
    Node(crate::graph::Graph),
    Graphs(Vec<GraphSample>),
}

impl DataArgs {
    fn node_paths(&self) -> CmdResult<DatasetPaths> {
        let mut paths = match &self.dir {
            Some(d) => {
                let mut p = DatasetPaths::in_dir(d);
                if !p.splits.as_ref().is_some_and(|s| s.exists()) {
                    p.splits = None;
                }
                p
            }
            None => match (&self.edges, &self.features, &self.labels) {
                (Some(e), Some(f), Some(l)) => DatasetPaths {
                    edges: e.clone(),
                    features: f.clone(),
                    labels: l.clone(),
                    splits: None,
                },
                _ => return usage("node task needs --dir or all of --edges, --features and --labels"),
            },
        };
        if let Some(s) = &self.splits {
            paths.splits = Some(s.clone());
        }
        for p in [&paths.edges, &paths.features, &paths.labels].into_iter().chain(paths.splits.as_ref()) {
            if !p.exists() {
                return usage(format!("{}: no such file", p.display()));
            }
        }
        Ok(paths)
    }

    fn load(&self, task: Task, split_seed: u64) -> CmdResult<Dataset> {
        match task {
            Task::Node => Ok(Dataset::Node(load_dataset(&self.node_paths()?, split_seed)?)),
            Task::Graph => match &self.graphs {
                Some(p) if p.exists() => Ok(Dataset::Graphs(read_graph_collection(p)?)),
                Some(p) => usage(format!("{}: no such file", p.display())),
                None => usage("graph task needs --graphs"),
            },
        }
    }
}

#[derive(Serialize)]
struct EvalLine {
    split: &'static str,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae: Option<f64>,
}

fn split_name(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

fn cmd_verify(suite: Option<String>, seed: u64, out: &mut dyn Write) -> CmdResult {
    let names: Vec<&str> = match &suite {
        Some(s) => vec![s.as_str()],
        None => SUITES.to_vec(),
    };
    let mut ok = true;
    for name in names {
        let rep = run_suite(name, seed)?;
        ok &= rep.passed;
        writeln!(out, "{}", rep.line()).map_err(Error::from)?;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn progress(verbose: bool) -> impl FnMut(&EpochMetrics) {
    move |m| {
        if verbose {
            eprintln!("{}", serde_json::to_string(m).expect("metrics serialize"));
        }
    }
}

fn cmd_train(
    data: &DataArgs,
    hyper: &HyperArgs,
    out_dir: &Path,
    verbose: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let cfg = hyper.resolve()?;
    let outcome: TrainOutcome = match data.load(cfg.task, cfg.seed)? {
        Dataset::Node(g) => train_node_with(&g, &cfg, progress(verbose))?,
        Dataset::Graphs(d) => train_graph_with(&d, &cfg, progress(verbose))?,
    };
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    write_metrics_jsonl(&out_dir.join("metrics.jsonl"), &outcome.history)?;
    write_summary(&out_dir.join("summary.json"), &outcome.summary)?;
    outcome.best.save(&out_dir.join("checkpoint.json"))?;
    let s = &outcome.summary;
    let metric = match (s.test_acc, s.test_mae) {
        (Some(a), _) => format!("test_acc {a}"),
        (_, Some(m)) => format!("test_mae {m}"),
        _ => String::new(),
    };
    writeln!(
        out,
        "{} {}: {metric} (best epoch {}, {} epochs, {} params) -> {}",
        s.task,
        s.pooling,
        s.best_epoch,
        s.epochs_run,
        s.params,
        out_dir.display()
    )
    .map_err(Error::from)?;
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &DataArgs, split: SplitName, out: &mut dyn Write) -> CmdResult {
    if !ckpt.exists() {
        return usage(format!("{}: no such file", ckpt.display()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let metrics: SplitMetrics = match data.load(ck.config.task, ck.config.seed)? {
        Dataset::Node(g) => {
            let s = g.split().expect("loaded datasets carry a split").clone();
            let nodes = match split {
                SplitName::Train => &s.train,
                SplitName::Val => &s.val,
                SplitName::Test => &s.test,
            };
            if g.feature_dim() != ck.model.in_dim() {
                return Err(Error::dim("node features vs checkpoint input", ck.model.in_dim(), g.feature_dim()).into());
            }
            evaluate_node(&ck.model, &g, &eval_plan(&ck.model, &g), nodes)?
        }
        Dataset::Graphs(d) => {
            let s = graph_split(d.len(), ck.config.seed);
            let ids = match split {
                SplitName::Train => &s.train,
                SplitName::Val => &s.val,
                SplitName::Test => &s.test,
            };
            evaluate_graphs(&ck.model, &d, ids)?
        }
    };
    let line = EvalLine {
        split: split_name(split),
        loss: metrics.loss,
        acc: metrics.acc,
        mae: metrics.mae,
    };
    writeln!(out, "{}", serde_json::to_string(&line).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    axis: BenchAxis,
    f_in: usize,
    f_out: usize,
    n: usize,
    ranks: &[usize],
    sizes: &[usize],
    reps: usize,
    csv_out: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    if reps < 5 {
        return usage(format!("--reps must be at least 5, got {reps}"));
    }
    let res: BenchResult = match axis {
        BenchAxis::Rank => bench_rank_scaling(f_in, f_out, n, ranks, reps)?,
        BenchAxis::Sum => bench_sum_rank_scaling(f_in, f_out, n, ranks, reps)?,
        BenchAxis::Nodes => {
            let [rank] = ranks else {
                return usage("--axis nodes takes a single --ranks value");
            };
            bench_node_scaling(f_in, f_out, *rank, sizes, reps)?
        }
    };
    match csv_out {
        Some(p) => res.write_csv(fs::File::create(p).map_err(Error::from)?)?,
        None => res.write_csv(&mut *out)?,
    }
    match res.slope {
        Some(s) => eprintln!("log-log slope {s:.3}"),
        None => eprintln!("log-log slope: undefined (single grid point)"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    kind: GenKind,
    dir: &Path,
    seed: u64,
    sbm: SbmParams,
    count: usize,
    out: &mut dyn Write,
) -> CmdResult {
    fs::create_dir_all(dir).map_err(Error::from)?;
    match kind {
        GenKind::Sbm => {
            let g = generate_sbm(&SbmParams { seed, ..sbm })?;
            save_dataset(&g, &DatasetPaths::in_dir(dir))?;
            writeln!(out, "wrote SBM with {} nodes, {} edges to {}", g.n_nodes(), g.n_edges(), dir.display())
                .map_err(Error::from)?;
        }
        GenKind::Degree => {
            let data = generate_degree_regression(count, 5..=20, 0.2, sbm.feature_dim, seed)?;
            let p = dir.join("graphs.jsonl");
            write_graph_collection(&p, &data)?;
            writeln!(out, "wrote {count} graphs to {}", p.display()).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Verify { suite, seed } => cmd_verify(suite, seed, out),
        Command::Train { data, hyper, out: dir } => cmd_train(&data, &hyper, &dir, cli.verbose, out),
        Command::Eval { checkpoint, data, split } => cmd_eval(&checkpoint, &data, split, out),
        Command::Bench { axis, f_in, f_out, n, ranks, sizes, reps, out: csv } => {
            cmd_bench(axis, f_in, f_out, n, &ranks, &sizes, reps, csv.as_deref(), out)
        }
        Command::Generate {
            kind,
            out: dir,
            seed,
            classes,
            per_class,
            p_in,
            p_out,
            feature_dim,
            mean_scale,
            noise,
            count,
        } => {
            let sbm = SbmParams {
                classes,
                per_class,
                p_in,
                p_out,
                feature_dim,
                class_means: None,
                mean_scale,
                noise,
                seed,
            };
            cmd_generate(kind, &dir, seed, sbm, count, out)
        }
    }
}

/// Parses `args` (including the program name), runs the subcommand writing
/// its report to `out`, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        Err(CliError::Failed) => EXIT_FAILURE,
    }
}
