//! `dcgnn` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input, 3 numeric divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dcgnn::analysis::{
    effective_resistance, homophily_matrix, resistance_heatmap, total_effective_resistance, write_matrix_csv,
};
use dcgnn::dc::{
    convergence_monitor, dc_msgpassing, entropy_bound_for, Activation, Aggregation, DcParams, LayerConfig,
    NodeNormalizer,
};
use dcgnn::graph::{
    gen_erdos_renyi, gen_hetero_sbm, gen_tree_neighbors_match, load_graph, write_graph_csv, write_graph_json,
    BipartiteClusterGraph, CsvGraphPaths, GraphSource, SbmParams, Split, Splits, UndirectedGraph,
};
use dcgnn::losses::Similarity;
use dcgnn::model::{Architecture, GraphContext, Hyperparams};
use dcgnn::sinkhorn::{entropy, round_to_feasible, sinkhorn_matrix, transport_cost, MarginalPair, SinkhornConfig};
use dcgnn::train::{evaluate, gradcheck, gradcheck_fixture, train, write_history_csv, Checkpoint};
use dcgnn::{Error, Matrix, Tape};

#[derive(Parser, Debug)]
#[command(name = "dcgnn", version, about = "Differentiable cluster message passing")]
struct Cli {
    /// Directory for all artifacts of this run.
    #[arg(long, global = true, env = "DCGNN_OUT_DIR", default_value = "dcgnn-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

// Parsed once per run; boxing the large variants buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "name", rename_all = "kebab-case")]
enum Command {
    /// Train a model and write metrics, checkpoint and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Entropic optimal transport on a cost matrix.
    Sinkhorn(SinkhornArgs),
    /// Effective resistances and the augmentation heatmap.
    Resistance(ResistanceArgs),
    /// Class-to-class edge proportions.
    Homophily(HomophilyArgs),
    /// Write a synthetic graph.
    Generate(GenerateArgs),
    /// Run layers as exact descent steps and check the objective trace.
    ConvergenceCheck(ConvergenceArgs),
    /// Compare tape gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Repeat the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
struct GraphArgs {
    /// Graph as a single JSON document.
    #[arg(long, conflicts_with_all = ["edges", "features"])]
    graph: Option<PathBuf>,
    /// Edge list CSV (`u,v` per line).
    #[arg(long, requires = "features")]
    edges: Option<PathBuf>,
    /// Feature CSV, one row per node.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Label CSV (`node,label` per line).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Split JSON with `train`, `valid`, `test` index lists.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Reject self-loops and duplicate edges instead of dropping them.
    #[arg(long)]
    strict: bool,
}

impl GraphArgs {
    fn source(&self) -> Result<GraphSource, Failure> {
        match (&self.graph, &self.edges, &self.features) {
            (Some(path), _, _) => Ok(GraphSource::Json { path: path.clone() }),
            (None, Some(edges), Some(features)) => Ok(GraphSource::Csv(CsvGraphPaths {
                edges: edges.clone(),
                features: features.clone(),
                labels: self.labels.clone(),
                splits: self.splits.clone(),
            })),
            _ => Err(Failure::Input("give --graph or --edges with --features".into())),
        }
    }

    fn load(&self) -> Result<UndirectedGraph, Failure> {
        Ok(load_graph(&self.source()?, self.strict)?)
    }

    /// Same inputs with absolute paths, for the manifest.
    fn pinned(&self) -> Self {
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone()));
        Self {
            graph: abs(&self.graph),
            edges: abs(&self.edges),
            features: abs(&self.features),
            labels: abs(&self.labels),
            splits: abs(&self.splits),
            strict: self.strict,
        }
    }
}

fn parse_named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Hyperparameter flags; each one overrides the config file, which in turn
/// overrides the defaults.
#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
struct HpArgs {
    /// JSON file with any subset of the hyperparameter fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dc-gnn, mlp or mean-aggregation.
    #[arg(long, value_parser = parse_named::<Architecture>)]
    architecture: Option<Architecture>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hidden_channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    omega1: Option<f64>,
    #[arg(long)]
    omega2: Option<f64>,
    #[arg(long)]
    n_global: Option<usize>,
    #[arg(long)]
    n_local: Option<usize>,
    /// cosine or cosine-distance.
    #[arg(long, value_parser = parse_named::<Similarity>)]
    similarity: Option<Similarity>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    t_global: Option<usize>,
    #[arg(long)]
    t_local: Option<usize>,
    #[arg(long)]
    message_transform: Option<bool>,
    /// tanh or none.
    #[arg(long, value_parser = parse_named::<Activation>)]
    activation: Option<Activation>,
    /// exact or constant.
    #[arg(long, value_parser = parse_named::<NodeNormalizer>)]
    normalizer: Option<NodeNormalizer>,
    /// mean or sum.
    #[arg(long, value_parser = parse_named::<Aggregation>)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    detach_assignments: Option<bool>,
    #[arg(long)]
    stabilize_costs: Option<bool>,
    #[arg(long)]
    sinkhorn_tolerance: Option<f64>,
    #[arg(long)]
    message_dropout: Option<f64>,
    #[arg(long)]
    layer_norm: Option<bool>,
}

macro_rules! hp_fields {
    ($m:ident) => {
        $m!(
            architecture => architecture,
            lr => lr,
            weight_decay => weight_decay,
            epochs => epochs,
            dropout => dropout,
            hidden_channels => hidden_channels,
            layers => layers,
            encoder_layers => encoder_layers,
            omega1 => omega1,
            omega2 => omega2,
            n_global => n_global,
            n_local => n_local,
            similarity => similarity,
            alpha => layer.alpha,
            beta => layer.beta,
            lambda => layer.lambda,
            t_global => layer.t_global,
            t_local => layer.t_local,
            message_transform => layer.use_message_transform,
            activation => layer.activation,
            normalizer => layer.normalizer,
            aggregation => layer.aggregation,
            detach_assignments => layer.detach_assignments,
            stabilize_costs => layer.stabilize_costs,
            message_dropout => layer.message_dropout,
            layer_norm => layer.layer_norm
        )
    };
}

impl HpArgs {
    fn resolve(&self) -> Result<Hyperparams, Failure> {
        let mut hp: Hyperparams = match &self.config {
            Some(path) => read_json(path)?,
            None => Hyperparams::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $($field:ident).+),*) => {
                $(if let Some(v) = self.$flag.clone() { hp.$($field).+ = v; })*
            };
        }
        hp_fields!(apply);
        if self.sinkhorn_tolerance.is_some() {
            hp.layer.sinkhorn_tolerance = self.sinkhorn_tolerance;
        }
        Ok(hp)
    }

    /// Every flag set to the resolved value, no config file.
    fn pinned(hp: &Hyperparams) -> Self {
        let mut out = Self::default();
        macro_rules! fill {
            ($($flag:ident => $($field:ident).+),*) => {
                $(out.$flag = Some(hp.$($field).+.clone());)*
            };
        }
        hp_fields!(fill);
        out.sinkhorn_tolerance = hp.layer.sinkhorn_tolerance;
        out
    }
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    hp: HpArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct EvalArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other}")),
    }
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct SinkhornArgs {
    /// Cost matrix CSV without header.
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Iteration count, or the cap when a tolerance is given.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Stop once both marginal residuals fall below this.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Row marginals (default uniform).
    #[arg(long, value_delimiter = ',')]
    row_marginals: Option<Vec<f64>>,
    /// Column marginals (default uniform).
    #[arg(long, value_delimiter = ',')]
    col_marginals: Option<Vec<f64>>,
    /// Project the result onto the exact transport polytope.
    #[arg(long)]
    round: bool,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct ResistanceArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Global cluster counts for the heatmap columns.
    #[arg(long, value_delimiter = ',')]
    global: Option<Vec<usize>>,
    /// Local cluster counts for the heatmap rows.
    #[arg(long, value_delimiter = ',')]
    local: Option<Vec<usize>>,
    /// Also report the resistance between these two nodes.
    #[arg(long, num_args = 2, value_names = ["U", "V"])]
    pair: Option<Vec<usize>>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct HomophilyArgs {
    #[command(flatten)]
    graph: GraphArgs,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct GenerateArgs {
    #[command(subcommand)]
    kind: Generator,
}

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Generator {
    /// G(n, p), unit features.
    ErdosRenyi {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Planted-partition graph with noisy class-centroid features.
    Sbm {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long)]
        p_in: f64,
        #[arg(long)]
        p_out: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Binary tree whose root must read the class of the leaf sharing its key.
    Tree {
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct ConvergenceArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Use G(n, p) instead of an input graph.
    #[arg(long, requires = "er_p")]
    er_n: Option<usize>,
    #[arg(long)]
    er_p: Option<f64>,
    /// Gaussian feature width for generated graphs.
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long, default_value_t = 20)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    n_global: usize,
    #[arg(long, default_value_t = 2)]
    n_local: usize,
    /// Allowed increase between consecutive layers.
    #[arg(long, default_value_t = 1e-6)]
    slack: f64,
    /// Largest final change that counts as settled.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Message transforms void the descent guarantee and are refused.
    #[arg(long)]
    message_transform: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
struct RerunArgs {
    manifest: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Check(String),
    Input(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Lib(Error::Divergence(_)) => 3,
            Failure::Input(_) | Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Input(m) => write!(f, "{m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    command: Command,
    resolved: serde_json::Value,
    outputs: Vec<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// Output directory plus the list of files written so far.
struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(mut self, command: Command, resolved: serde_json::Value) -> Result<(), Failure> {
        let path = self.file("manifest.json");
        let manifest = Manifest {
            tool: "dcgnn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            resolved,
            outputs: self.outputs,
        };
        write_json(&manifest, &path)
    }
}

fn ensure_splits(g: &mut UndirectedGraph, seed: u64) -> Result<(), Failure> {
    if g.splits().train.is_empty() {
        let labeled = g.labeled_nodes();
        if labeled.is_empty() {
            return Err(Failure::Input("graph has no labels to train on".into()));
        }
        log::info!("no splits given; drawing 50/25/25 over {} labeled nodes", labeled.len());
        g.set_splits(Splits::random(&labeled, 0.5, 0.25, seed)?)?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &Path) -> Result<(), Failure> {
    let mut g = args.graph.load()?;
    ensure_splits(&mut g, args.seed)?;
    let hp = args.hp.resolve()?;
    let outcome = train(&g, &hp, args.seed)?;
    let mut run = Run::new(out)?;
    write_history_csv(&outcome.history, &run.file("metrics.csv"))?;
    Checkpoint::new(&outcome.params, &hp).save(&run.file("checkpoint.json"))?;
    let ctx = GraphContext::new(&g, &hp)?;
    let mut summary = serde_json::json!({ "best_epoch": outcome.best_epoch });
    for (name, split) in [("train", Split::Train), ("valid", Split::Valid), ("test", Split::Test)] {
        if !g.splits().get(split).is_empty() {
            let m = evaluate(&outcome.params, &g, &ctx, &hp, split)?;
            println!(
                "{name}: accuracy {:.4}{}",
                m.accuracy,
                m.roc_auc.map(|a| format!(" auc {a:.4}")).unwrap_or_default()
            );
            summary[name] = serde_json::to_value(&m).map_err(Error::from)?;
        }
    }
    write_json(&summary, &run.file("summary.json"))?;
    let pinned = TrainArgs {
        graph: args.graph.pinned(),
        hp: HpArgs::pinned(&hp),
        seed: args.seed,
    };
    run.finish(Command::Train(pinned), serde_json::to_value(&hp).map_err(Error::from)?)
}

fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<(), Failure> {
    let g = args.graph.load()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let params = ckpt.params()?;
    if params.input_dim() != g.feature_dim() {
        return Err(Failure::Input(format!(
            "checkpoint expects {} features, graph has {}",
            params.input_dim(),
            g.feature_dim()
        )));
    }
    let ctx = GraphContext::new(&g, &ckpt.hyperparams)?;
    let m = evaluate(&params, &g, &ctx, &ckpt.hyperparams, args.split)?;
    println!(
        "accuracy {:.4}{}",
        m.accuracy,
        m.roc_auc.map(|a| format!(" auc {a:.4}")).unwrap_or_default()
    );
    let mut run = Run::new(out)?;
    write_json(&m, &run.file("eval.json"))?;
    let pinned = EvalArgs {
        graph: args.graph.pinned(),
        checkpoint: std::path::absolute(&args.checkpoint).unwrap_or_else(|_| args.checkpoint.clone()),
        split: args.split,
    };
    run.finish(
        Command::Eval(pinned),
        serde_json::to_value(&ckpt.hyperparams).map_err(Error::from)?,
    )
}

fn read_cost(path: &Path) -> Result<Matrix, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k as u64 + 1,
                detail: e.to_string(),
            })?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(Failure::Input(format!(
            "{}: cost matrix must be a non-empty rectangle",
            path.display()
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::from_shape_vec((flat.len() / cols, cols), flat).map_err(|e| Failure::Input(e.to_string()))
}

fn cmd_sinkhorn(args: &SinkhornArgs, out: &Path) -> Result<(), Failure> {
    let m = read_cost(&args.cost)?;
    let (n, k) = m.dim();
    let uniform = MarginalPair::uniform(n, k)?;
    let marg = MarginalPair::new(
        args.row_marginals.clone().unwrap_or_else(|| uniform.u().to_vec()),
        args.col_marginals.clone().unwrap_or_else(|| uniform.v().to_vec()),
    )?;
    let cfg = match args.tolerance {
        Some(tol) => SinkhornConfig::to_convergence(args.lambda, tol, args.iterations),
        None => SinkhornConfig::new(args.lambda, args.iterations),
    };
    let (mut p, row_err, col_err) = sinkhorn_matrix(&m, &marg, &cfg)?;
    if args.round {
        p = round_to_feasible(&p, &marg)?;
    }
    let mut run = Run::new(out)?;
    write_matrix_csv(&p, None, &run.file("coupling.csv"))?;
    let summary = serde_json::json!({
        "lambda": args.lambda,
        "row_residual": row_err,
        "col_residual": col_err,
        "transport_cost": transport_cost(&p, &m),
        "entropy": entropy(&p),
        "rounded": args.round,
    });
    write_json(&summary, &run.file("sinkhorn.json"))?;
    for row in p.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        println!("{}", cells.join(" "));
    }
    let mut pinned = args.clone();
    pinned.cost = std::path::absolute(&args.cost).unwrap_or_else(|_| args.cost.clone());
    run.finish(Command::Sinkhorn(pinned), summary)
}

fn cmd_resistance(args: &ResistanceArgs, out: &Path) -> Result<(), Failure> {
    let g = args.graph.load()?;
    let report = total_effective_resistance(g.n(), g.edges(), None)?;
    let mut run = Run::new(out)?;
    write_matrix_csv(&report.pairwise, None, &run.file("resistance.csv"))?;
    println!("r_tot {:.12}", report.r_tot);
    let mut summary = serde_json::json!({ "r_tot": report.r_tot });
    if let Some(pair) = &args.pair {
        let r = effective_resistance(g.n(), g.edges(), pair[0], pair[1])?;
        println!("R({}, {}) {r}", pair[0], pair[1]);
        summary["pair"] = serde_json::json!({ "u": pair[0], "v": pair[1], "resistance": r });
    }
    if args.global.is_some() || args.local.is_some() {
        let global = args.global.clone().unwrap_or_else(|| vec![0]);
        let local = args.local.clone().unwrap_or_else(|| vec![0]);
        let hm = resistance_heatmap(&g, &global, &local)?;
        hm.write_csv(&run.file("heatmap.csv"))?;
        summary["heatmap_monotone"] = serde_json::Value::Bool(hm.is_monotone(1e-9));
    }
    write_json(&summary, &run.file("resistance.json"))?;
    let pinned = ResistanceArgs {
        graph: args.graph.pinned(),
        ..args.clone()
    };
    run.finish(Command::Resistance(pinned), summary)
}

fn cmd_homophily(args: &HomophilyArgs, out: &Path) -> Result<(), Failure> {
    let g = args.graph.load()?;
    let hm = homophily_matrix(&g)?;
    let mut run = Run::new(out)?;
    let header: Vec<String> = (0..g.num_classes()).map(|c| format!("class_{c}")).collect();
    write_matrix_csv(&hm.h, Some(&header), &run.file("homophily.csv"))?;
    match hm.edge_homophily {
        Some(h) => println!("edge homophily {h:.4}"),
        None => println!("edge homophily undefined (no edges)"),
    }
    let summary = serde_json::json!({ "edge_homophily": hm.edge_homophily });
    write_json(&summary, &run.file("homophily.json"))?;
    run.finish(
        Command::Homophily(HomophilyArgs {
            graph: args.graph.pinned(),
        }),
        summary,
    )
}

fn cmd_generate(args: &GenerateArgs, out: &Path) -> Result<(), Failure> {
    let g = match &args.kind {
        Generator::ErdosRenyi { n, p, seed } => gen_erdos_renyi(*n, *p, *seed)?,
        Generator::Sbm {
            n,
            classes,
            p_in,
            p_out,
            noise,
            feature_dim,
            seed,
        } => {
            let mut params = SbmParams::new(*n, *classes, *p_in, *p_out, *noise);
            params.feature_dim = *feature_dim;
            gen_hetero_sbm(&params, *seed)?
        }
        Generator::Tree { depth, seed } => gen_tree_neighbors_match(*depth, *seed)?.graph,
    };
    let mut run = Run::new(out)?;
    write_graph_csv(&g, &run.dir)?;
    for name in ["edges.csv", "features.csv", "labels.csv", "splits.json"] {
        run.outputs.push(name.into());
    }
    write_graph_json(&g, &run.file("graph.json"))?;
    println!("{} nodes, {} edges", g.n(), g.num_edges());
    let summary = serde_json::json!({ "nodes": g.n(), "edges": g.num_edges() });
    run.finish(Command::Generate(args.clone()), summary)
}

fn cmd_convergence(args: &ConvergenceArgs, out: &Path) -> Result<(), Failure> {
    if args.message_transform {
        return Err(Failure::Input(
            "message transforms break the descent property; convergence-check runs without them".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let g = match (args.er_n, args.er_p) {
        (Some(n), Some(p)) => {
            let mut g = gen_erdos_renyi(n, p, args.seed)?;
            let x = Matrix::from_shape_simple_fn((n, args.feature_dim), || StandardNormal.sample(&mut rng));
            g.set_features(x)?;
            g
        }
        _ => args.graph.load()?,
    };
    let cfg = LayerConfig::monitoring(args.alpha, args.beta, args.lambda);
    let bip = BipartiteClusterGraph::build(&g, args.n_global, args.n_local)?;
    let d = g.feature_dim();
    let a = 1.0 / (d as f64).sqrt();
    let c0 = Matrix::from_shape_simple_fn((args.n_global, d), || rng.random_range(-a..=a));
    let tape = Tape::no_grad();
    let x = tape.constant(g.features().clone());
    let params = DcParams {
        c_global: tape.constant(c0),
        transforms: Vec::new(),
    };
    let res = dc_msgpassing(&tape, x, &bip, &cfg, args.layers, &params, true, None)?;
    let bound = entropy_bound_for(&bip, args.alpha, args.lambda)?;
    let verdict = convergence_monitor(&res.trace, args.slack, args.tolerance);
    let above_bound = res.trace.iter().all(|o| o.total >= bound - args.slack);

    let mut run = Run::new(out)?;
    let path = run.file("trace.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    w.write_record([
        "layer",
        "global_term",
        "local_term",
        "fidelity_term",
        "global_entropy",
        "local_entropy",
        "total",
        "lower_bound",
    ])
    .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    for (l, o) in res.trace.iter().enumerate() {
        let cells = [
            (l + 1).to_string(),
            o.global_term.to_string(),
            o.local_term.to_string(),
            o.fidelity_term.to_string(),
            o.global_entropy.to_string(),
            o.local_entropy.to_string(),
            o.total.to_string(),
            bound.to_string(),
        ];
        w.write_record(&cells)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let summary = serde_json::json!({
        "verdict": verdict,
        "lower_bound": bound,
        "above_bound": above_bound,
        "first_total": res.trace.first().map(|o| o.total),
        "last_total": res.trace.last().map(|o| o.total),
    });
    write_json(&summary, &run.file("verdict.json"))?;
    let pinned = ConvergenceArgs {
        graph: args.graph.pinned(),
        ..args.clone()
    };
    run.finish(Command::ConvergenceCheck(pinned), summary)?;
    let ok = verdict.passed && above_bound;
    println!(
        "{}: max increase {:.3e}, final change {:.3e}, bound {}",
        if ok { "pass" } else { "fail" },
        verdict.max_increase,
        verdict.final_change,
        if above_bound { "respected" } else { "violated" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("objective trace is not a converging descent".into()))
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &Path) -> Result<(), Failure> {
    let (g, params, hp) = gradcheck_fixture(args.seed)?;
    let report = gradcheck(&g, &params, &hp, args.step)?;
    let mut run = Run::new(out)?;
    let path = run.file("gradcheck.csv");
    let mut text = String::from("tensor,max_rel_error,max_abs_grad\n");
    for e in &report.entries {
        text.push_str(&format!("{},{},{}\n", e.name, e.max_rel_error, e.max_abs_grad));
        println!("{:<12} {:.3e}", e.name, e.max_rel_error);
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let worst = report.worst();
    let summary = serde_json::json!({ "loss": report.loss, "worst": worst, "threshold": args.threshold });
    run.finish(Command::Gradcheck(args.clone()), summary)?;
    if worst < args.threshold {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "relative error {worst:.3e} ≥ {}",
            args.threshold
        )))
    }
}

fn dispatch(command: &Command, out: &Path) -> Result<(), Failure> {
    match command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sinkhorn(a) => cmd_sinkhorn(a, out),
        Command::Resistance(a) => cmd_resistance(a, out),
        Command::Homophily(a) => cmd_homophily(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::ConvergenceCheck(a) => cmd_convergence(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Rerun(a) => {
            let manifest: Manifest = read_json(&a.manifest)?;
            if matches!(manifest.command, Command::Rerun(_)) {
                return Err(Failure::Input("manifest records a rerun".into()));
            }
            dispatch(&manifest.command, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command, &cli.out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dcgnn: {f}");
            ExitCode::from(f.code())
        }
    }
}
