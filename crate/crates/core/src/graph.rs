//! Graph data model, file formats, synthetic generators and the
//! node / cluster-node bipartite construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RowSegments, SparseMatrix};

/// Node index lists for the train / validation / test splits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<usize>,
    #[serde(default)]
    pub valid: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `candidates` and cuts it by the given fractions; whatever the
    /// train and validation fractions leave over goes to test.
    pub fn random(candidates: &[usize], train_frac: f64, valid_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&valid_frac)
            || train_frac + valid_frac > 1.0 + 1e-12
        {
            return Err(Error::InvalidArgument(format!(
                "split fractions {train_frac}/{valid_frac}"
            )));
        }
        let mut idx = candidates.to_vec();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = idx.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_valid = (((n as f64) * valid_frac).round() as usize).min(n - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut valid = idx[n_train..n_train + n_valid].to_vec();
        let mut test = idx[n_train + n_valid..].to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, valid, test })
    }

    pub fn mask(indices: &[usize], n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in indices {
            m[i] = true;
        }
        m
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, list) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for &i in list {
                if i >= n {
                    return Err(Error::InvalidGraph(format!(
                        "{name} split references node {i} but n = {n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidGraph(format!(
                        "node {i} appears in more than one split (or twice in {name})"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Simple undirected graph with node features, optional labels and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct UndirectedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    splits: Splits,
}

impl UndirectedGraph {
    /// Validates and normalises the parts. Self-loops and duplicate edges are
    /// dropped with a warning, or rejected when `strict` is set.
    pub fn new(
        n: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<Option<usize>>,
        num_classes: Option<usize>,
        splits: Splits,
        strict: bool,
    ) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {n} nodes",
                features.nrows()
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!("{} labels for {n} nodes", labels.len())));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!("edge ({u},{v}) out of range for n = {n}")));
            }
            if u == v {
                if strict {
                    return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
                }
                warn!("dropping self-loop at node {u}");
                continue;
            }
            let key = (u.min(v), u.max(v));
            if !set.insert(key) {
                if strict {
                    return Err(Error::InvalidGraph(format!("duplicate edge ({u},{v})")));
                }
                warn!("dropping duplicate edge ({u},{v})");
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());

        let max_label = labels.iter().flatten().max().copied();
        let num_classes = match (num_classes, max_label) {
            (Some(c), Some(m)) if m >= c => {
                return Err(Error::InvalidGraph(format!("label {m} out of range for {c} classes")))
            }
            (Some(c), _) => c,
            (None, Some(m)) => m + 1,
            (None, None) => 0,
        };
        splits.validate(n)?;
        Ok(Self {
            n,
            edges,
            adjacency,
            features,
            labels,
            num_classes,
            splits,
        })
    }

    /// Structure-only graph with a constant one-dimensional feature.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            n,
            edges,
            Matrix::ones((n, 1)),
            vec![None; n],
            None,
            Splits::default(),
            false,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn set_splits(&mut self, splits: Splits) -> Result<()> {
        splits.validate(self.n)?;
        self.splits = splits;
        Ok(())
    }

    pub fn set_features(&mut self, features: Matrix) -> Result<()> {
        if features.nrows() != self.n {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                self.n
            )));
        }
        self.features = features;
        Ok(())
    }

    /// Labels of `nodes`, failing on any unlabeled node.
    pub fn labels_of(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&i| self.labels[i].ok_or_else(|| Error::InvalidGraph(format!("node {i} has no label"))))
            .collect()
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.labels[i].is_some()).collect()
    }

    /// Applies a node relabelling `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut features = Matrix::zeros(self.features.dim());
        let mut labels = vec![None; n];
        for old in 0..n {
            features.row_mut(perm[old]).assign(&self.features.row(old));
            labels[perm[old]] = self.labels[old];
        }
        let map = |v: &[usize]| {
            let mut out: Vec<_> = v.iter().map(|&i| perm[i]).collect();
            out.sort_unstable();
            out
        };
        let splits = Splits {
            train: map(&self.splits.train),
            valid: map(&self.splits.valid),
            test: map(&self.splits.test),
        };
        Self::new(n, &edges, features, labels, Some(self.num_classes), splits, true)
    }

    /// Connected components as a node → component id map.
    pub fn components(&self) -> (usize, Vec<usize>) {
        components(self.n, &self.adjacency)
    }
}

pub(crate) fn components(n: usize, adjacency: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = count;
        stack.push(s);
        while let Some(u) = stack.pop() {
            for &v in &adjacency[u] {
                if comp[v] == usize::MAX {
                    comp[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (count, comp)
}

/// On-disk single-document graph format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    #[serde(default)]
    pub labels: Option<Vec<Option<usize>>>,
    #[serde(default)]
    pub splits: Option<Splits>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl GraphDocument {
    pub fn from_graph(g: &UndirectedGraph) -> Self {
        Self {
            n: g.n,
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            features: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            labels: Some(g.labels.clone()),
            splits: Some(g.splits.clone()),
            num_classes: Some(g.num_classes),
        }
    }

    pub fn into_graph(self, strict: bool) -> Result<UndirectedGraph> {
        let n = self.n;
        let d = self.features.first().map_or(0, Vec::len);
        if self.features.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} feature rows for n = {n}",
                self.features.len()
            )));
        }
        if self.features.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidGraph("ragged feature rows".into()));
        }
        let flat: Vec<f64> = self.features.into_iter().flatten().collect();
        let features = Matrix::from_shape_vec((n, d), flat).map_err(|e| Error::InvalidGraph(e.to_string()))?;
        let edges: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        UndirectedGraph::new(
            n,
            &edges,
            features,
            self.labels.unwrap_or_else(|| vec![None; n]),
            self.num_classes,
            self.splits.unwrap_or_default(),
            strict,
        )
    }
}

/// Input locations for the multi-file CSV format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvGraphPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub splits: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum GraphSource {
    Json { path: PathBuf },
    Csv(CsvGraphPaths),
}

pub fn load_graph(source: &GraphSource, strict: bool) -> Result<UndirectedGraph> {
    match source {
        GraphSource::Json { path } => load_graph_json(path, strict),
        GraphSource::Csv(paths) => load_graph_csv(paths, strict),
    }
}

pub fn load_graph_json(path: &Path, strict: bool) -> Result<UndirectedGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: GraphDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        detail: e.to_string(),
    })?;
    doc.into_graph(strict)
}

fn csv_records(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, field: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: format!("cannot parse {field:?}"),
    })
}

/// Drops a leading header row when its first field is not numeric.
fn skip_header(mut records: Vec<(u64, Vec<String>)>) -> Vec<(u64, Vec<String>)> {
    if let Some((_, first)) = records.first() {
        if first.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            records.remove(0);
        }
    }
    records
}

pub fn load_graph_csv(paths: &CsvGraphPaths, strict: bool) -> Result<UndirectedGraph> {
    let feat_rows = skip_header(csv_records(&paths.features)?);
    let n = feat_rows.len();
    let d = feat_rows.first().map_or(0, |(_, r)| r.len());
    let mut flat = Vec::with_capacity(n * d);
    for (line, row) in &feat_rows {
        if row.len() != d {
            return Err(Error::Parse {
                path: paths.features.clone(),
                line: *line,
                detail: format!("expected {d} columns, found {}", row.len()),
            });
        }
        for f in row {
            flat.push(parse_field::<f64>(&paths.features, *line, f)?);
        }
    }
    let features = Matrix::from_shape_vec((n, d), flat).expect("sized above");

    let mut edges = Vec::new();
    for (line, row) in skip_header(csv_records(&paths.edges)?) {
        if row.len() != 2 {
            return Err(Error::Parse {
                path: paths.edges.clone(),
                line,
                detail: format!("expected `u,v`, found {} fields", row.len()),
            });
        }
        let u: usize = parse_field(&paths.edges, line, &row[0])?;
        let v: usize = parse_field(&paths.edges, line, &row[1])?;
        if u >= n || v >= n {
            return Err(Error::Parse {
                path: paths.edges.clone(),
                line,
                detail: format!("edge ({u},{v}) references a node beyond the {n} feature rows"),
            });
        }
        edges.push((u, v));
    }

    let mut labels = vec![None; n];
    if let Some(lp) = &paths.labels {
        for (line, row) in skip_header(csv_records(lp)?) {
            if row.len() != 2 {
                return Err(Error::Parse {
                    path: lp.clone(),
                    line,
                    detail: "expected `node,label`".into(),
                });
            }
            let i: usize = parse_field(lp, line, &row[0])?;
            let y: usize = parse_field(lp, line, &row[1])?;
            if i >= n {
                return Err(Error::Parse {
                    path: lp.clone(),
                    line,
                    detail: format!("node {i} out of range for n = {n}"),
                });
            }
            labels[i] = Some(y);
        }
    }

    let splits = match &paths.splits {
        Some(sp) => {
            let text = fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: sp.clone(),
                line: e.line() as u64,
                detail: e.to_string(),
            })?
        }
        None => Splits::default(),
    };
    UndirectedGraph::new(n, &edges, features, labels, None, splits, strict)
}

/// Writes `edges.csv`, `features.csv`, `labels.csv` and `splits.json` into `dir`.
pub fn write_graph_csv(g: &UndirectedGraph, dir: &Path) -> Result<CsvGraphPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CsvGraphPaths {
        edges: dir.join("edges.csv"),
        features: dir.join("features.csv"),
        labels: Some(dir.join("labels.csv")),
        splits: Some(dir.join("splits.json")),
    };
    let mut s = String::new();
    for &(u, v) in &g.edges {
        s.push_str(&format!("{u},{v}\n"));
    }
    fs::write(&paths.edges, s).map_err(|e| Error::io(&paths.edges, e))?;
    let mut s = String::new();
    for row in g.features.rows() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(&paths.features, s).map_err(|e| Error::io(&paths.features, e))?;
    let mut s = String::new();
    for (i, y) in g.labels.iter().enumerate() {
        if let Some(y) = y {
            s.push_str(&format!("{i},{y}\n"));
        }
    }
    let lp = paths.labels.as_ref().unwrap();
    fs::write(lp, s).map_err(|e| Error::io(lp, e))?;
    let sp = paths.splits.as_ref().unwrap();
    fs::write(sp, serde_json::to_string_pretty(&g.splits)?).map_err(|e| Error::io(sp, e))?;
    Ok(paths)
}

pub fn write_graph_json(g: &UndirectedGraph, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&GraphDocument::from_graph(g))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Nodes plus global cluster-nodes (adjacent to every node) and, per node,
/// local cluster-nodes adjacent to its ego-neighbourhood.
///
/// Ego-neighbourhoods list the centre first, then its neighbours in
/// ascending order. Local assignment matrices of all nodes are stacked
/// row-wise in that order; `segments()` describes the stacking.
#[derive(Clone, Debug)]
pub struct BipartiteClusterGraph {
    n_nodes: usize,
    n_global: usize,
    n_local: Vec<usize>,
    neighborhoods: Vec<Vec<usize>>,
    segments: Arc<RowSegments>,
    gather: Arc<SparseMatrix>,
    scatter: Arc<SparseMatrix>,
    local_weight: Vec<f64>,
}

impl BipartiteClusterGraph {
    pub fn build(g: &UndirectedGraph, n_global: usize, n_local_per_node: usize) -> Result<Self> {
        if n_global == 0 || n_local_per_node == 0 {
            return Err(Error::InvalidArgument(
                "need at least one global and one local cluster-node".into(),
            ));
        }
        let n = g.n();
        let neighborhoods: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut ego = Vec::with_capacity(g.degree(i) + 1);
                ego.push(i);
                ego.extend_from_slice(g.neighbors(i));
                ego
            })
            .collect();
        let sizes: Vec<usize> = neighborhoods.iter().map(Vec::len).collect();
        let flat: Vec<usize> = neighborhoods.iter().flatten().copied().collect();
        let segments = Arc::new(RowSegments::from_sizes(&sizes, n_local_per_node));
        let gather = Arc::new(SparseMatrix::gather(&flat, n)?);
        let t: Vec<_> = flat.iter().enumerate().map(|(k, &i)| (i, k, 1.0)).collect();
        let scatter = Arc::new(SparseMatrix::from_triplets(n, flat.len(), &t)?);
        let mut local_weight = vec![0.0; n];
        for ego in &neighborhoods {
            let w = 1.0 / ego.len() as f64;
            for &i in ego {
                local_weight[i] += w;
            }
        }
        Ok(Self {
            n_nodes: n,
            n_global,
            n_local: vec![n_local_per_node; n],
            neighborhoods,
            segments,
            gather,
            scatter,
            local_weight,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_global(&self) -> usize {
        self.n_global
    }

    pub fn n_local(&self, i: usize) -> usize {
        self.n_local[i]
    }

    pub fn local_counts(&self) -> &[usize] {
        &self.n_local
    }

    /// Common local cluster count (constant across nodes).
    pub fn local_width(&self) -> usize {
        self.segments.width()
    }

    /// `|C| = |Ω| + Σ_i |Γ_i|`.
    pub fn total_cluster_nodes(&self) -> usize {
        self.n_global + self.n_local.iter().sum::<usize>()
    }

    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn ego_size(&self, i: usize) -> usize {
        self.neighborhoods[i].len()
    }

    pub fn ego_sizes(&self) -> Vec<usize> {
        self.neighborhoods.iter().map(Vec::len).collect()
    }

    /// `f(u, k)`: node index of the `k`-th member of `N_u⁺`.
    pub fn local_index(&self, u: usize, k: usize) -> Result<usize> {
        let ego = self.neighborhoods.get(u).ok_or(Error::IndexOutOfRange {
            index: u,
            len: self.n_nodes,
        })?;
        ego.get(k).copied().ok_or(Error::IndexOutOfRange {
            index: k,
            len: ego.len(),
        })
    }

    pub fn segments(&self) -> &Arc<RowSegments> {
        &self.segments
    }

    /// `(Σ|N_i⁺|) × |V|` operator stacking the ego-neighbourhood rows.
    pub fn gather_op(&self) -> &Arc<SparseMatrix> {
        &self.gather
    }

    /// Transpose of [`gather_op`](Self::gather_op): adds stacked rows back
    /// onto their nodes.
    pub fn scatter_op(&self) -> &Arc<SparseMatrix> {
        &self.scatter
    }

    /// `Σ_{u : i ∈ N_u⁺} 1/|N_u⁺|`, the total local assignment mass of node `i`.
    pub fn local_weights(&self) -> &[f64] {
        &self.local_weight
    }

    /// `(n·|Γ|) × n` operator giving the initial local cluster-node
    /// embeddings: cluster 0 of node `i` starts at `x_i`, the last at the mean
    /// of its neighbours, intermediate ones evenly in between. Isolated nodes
    /// use `x_i` throughout.
    pub fn local_init_op(&self) -> Result<SparseMatrix> {
        let w = self.local_width();
        let mut t = Vec::new();
        for (i, ego) in self.neighborhoods.iter().enumerate() {
            let nbrs = &ego[1..];
            for k in 0..w {
                let row = i * w + k;
                let frac = if w > 1 && !nbrs.is_empty() {
                    k as f64 / (w - 1) as f64
                } else {
                    0.0
                };
                if frac < 1.0 {
                    t.push((row, i, 1.0 - frac));
                }
                if frac > 0.0 {
                    let share = frac / nbrs.len() as f64;
                    t.extend(nbrs.iter().map(|&u| (row, u, share)));
                }
            }
        }
        SparseMatrix::from_triplets(self.n_nodes * w, self.n_nodes, &t)
    }

    /// Slice of a stacked `(Σ|N_i⁺|) × |Γ|` matrix belonging to node `i`.
    pub fn local_block(&self, stacked: &Matrix, i: usize) -> Matrix {
        stacked.slice(ndarray::s![self.segments.range(i), ..]).to_owned()
    }
}

/// Row `f(u, k)` of the result is row `k` of `p_local`; all other rows are zero.
pub fn broadcast_local(p_local: &Matrix, u: usize, bip: &BipartiteClusterGraph) -> Result<Matrix> {
    if u >= bip.n_nodes() {
        return Err(Error::IndexOutOfRange {
            index: u,
            len: bip.n_nodes(),
        });
    }
    if p_local.nrows() != bip.ego_size(u) {
        return Err(Error::Shape {
            op: "broadcast_local",
            lhs: p_local.dim(),
            rhs: (bip.ego_size(u), p_local.ncols()),
        });
    }
    let mut out = Matrix::zeros((bip.n_nodes(), p_local.ncols()));
    for k in 0..p_local.nrows() {
        out.row_mut(bip.local_index(u, k)?).assign(&p_local.row(k));
    }
    Ok(out)
}

/// Flat undirected graph over original nodes and cluster-nodes, with the
/// original edges kept and every bipartite edge materialised.
///
/// Vertex layout: original nodes, then `|Ω|` global cluster-nodes, then the
/// local cluster-nodes of node 0, node 1, …
#[derive(Clone, Debug)]
pub struct AugmentedResistanceGraph {
    n_original: usize,
    n_vertices: usize,
    base_edges: usize,
    edges: Vec<(usize, usize)>,
}

impl AugmentedResistanceGraph {
    /// Zero counts are allowed and simply add nothing.
    pub fn new(g: &UndirectedGraph, n_global: usize, n_local_per_node: usize) -> Self {
        let n = g.n();
        let mut edges = g.edges().to_vec();
        for j in 0..n_global {
            edges.extend((0..n).map(|i| (i, n + j)));
        }
        let mut next = n + n_global;
        for i in 0..n {
            for _ in 0..n_local_per_node {
                edges.push((i, next));
                edges.extend(g.neighbors(i).iter().map(|&u| (u, next)));
                next += 1;
            }
        }
        Self {
            n_original: n,
            n_vertices: next,
            base_edges: g.num_edges(),
            edges,
        }
    }

    pub fn from_bipartite(g: &UndirectedGraph, bip: &BipartiteClusterGraph) -> Self {
        Self::new(g, bip.n_global(), bip.local_width())
    }

    pub fn n_original(&self) -> usize {
        self.n_original
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `|Ω|·|V| + Σ_i |Γ_i|·|N_i⁺|`.
    pub fn bipartite_edge_count(&self) -> usize {
        self.edges.len() - self.base_edges
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// G(n, p): every unordered pair independently with probability `p`.
pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<UndirectedGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("edge probability {p}")));
    }
    let mut rng = rng_for(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    UndirectedGraph::from_edges(n, &edges)
}

/// Sparse G(n, p) for large `n` at fixed mean degree, by geometric skipping
/// over the pair sequence (Batagelj–Brandes).
pub fn gen_erdos_renyi_sparse(n: usize, mean_degree: f64, seed: u64) -> Result<UndirectedGraph> {
    if n < 2 {
        return UndirectedGraph::from_edges(n, &[]);
    }
    let p = (mean_degree / (n - 1) as f64).clamp(0.0, 1.0);
    if p <= 0.0 || p >= 1.0 {
        return gen_erdos_renyi(n, p, seed);
    }
    let mut rng = rng_for(seed);
    let lp = (1.0 - p).ln();
    let mut edges = Vec::new();
    let (mut v, mut w) = (1i64, -1i64);
    let n = n as i64;
    while v < n {
        let r: f64 = rng.random();
        w += 1 + ((1.0 - r).ln() / lp).floor() as i64;
        while w >= v && v < n {
            w -= v;
            v += 1;
        }
        if v < n {
            edges.push((w as usize, v as usize));
        }
    }
    UndirectedGraph::from_edges(n as usize, &edges)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SbmParams {
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_noise: f64,
    /// Feature dimension; defaults to `classes`.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_valid_frac")]
    pub valid_frac: f64,
}

fn default_train_frac() -> f64 {
    0.5
}

fn default_valid_frac() -> f64 {
    0.25
}

impl SbmParams {
    pub fn new(n: usize, classes: usize, p_in: f64, p_out: f64, feature_noise: f64) -> Self {
        Self {
            n,
            classes,
            p_in,
            p_out,
            feature_noise,
            feature_dim: None,
            train_frac: default_train_frac(),
            valid_frac: default_valid_frac(),
        }
    }
}

/// Planted-partition graph. Node `i` belongs to class `i mod classes`;
/// same-class pairs connect with `p_in`, cross-class pairs with `p_out`.
/// Features are the one-hot class centroid plus isotropic Gaussian noise.
pub fn gen_hetero_sbm(params: &SbmParams, seed: u64) -> Result<UndirectedGraph> {
    let SbmParams {
        n,
        classes,
        p_in,
        p_out,
        feature_noise,
        ..
    } = *params;
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::InvalidArgument(format!("probabilities {p_in}, {p_out}")));
    }
    if classes == 0 || feature_noise < 0.0 {
        return Err(Error::InvalidArgument("need ≥1 class and non-negative noise".into()));
    }
    let dim = params.feature_dim.unwrap_or(classes).max(classes);
    let mut rng = rng_for(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let noise =
        Normal::new(0.0, feature_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut features = Matrix::zeros((n, dim));
    for i in 0..n {
        features[[i, labels[i]]] = 1.0;
        if feature_noise > 0.0 {
            for j in 0..dim {
                features[[i, j]] += noise.sample(&mut rng);
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let splits = Splits::random(&all, params.train_frac, params.valid_frac, rng.random())?;
    UndirectedGraph::new(
        n,
        &edges,
        features,
        labels.into_iter().map(Some).collect(),
        Some(classes),
        splits,
        true,
    )
}

/// One generated tree: the graph (root = node 0, the only training target)
/// and the root's label.
#[derive(Clone, Debug)]
pub struct TreeSample {
    pub graph: UndirectedGraph,
    pub root: usize,
    pub label: usize,
}

/// Complete binary tree of the given depth in heap order. Leaves carry a
/// one-hot class and a one-hot key (keys are a permutation over leaves); the
/// root carries a key, and its label is the class of the leaf holding the
/// same key. Features are `[class one-hot ; key one-hot]` with one slot per
/// leaf in each half.
pub fn gen_tree_neighbors_match(depth: usize, seed: u64) -> Result<TreeSample> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be ≥ 1".into()));
    }
    let leaves = 1usize << depth;
    let n = 2 * leaves - 1;
    let first_leaf = leaves - 1;
    let mut rng = rng_for(seed);
    let mut edges = Vec::with_capacity(n - 1);
    for child in 1..n {
        edges.push(((child - 1) / 2, child));
    }
    let mut keys: Vec<usize> = (0..leaves).collect();
    keys.shuffle(&mut rng);
    let classes: Vec<usize> = (0..leaves).map(|_| rng.random_range(0..leaves)).collect();
    let root_key = rng.random_range(0..leaves);

    let mut features = Matrix::zeros((n, 2 * leaves));
    let mut label = 0;
    for l in 0..leaves {
        let node = first_leaf + l;
        features[[node, classes[l]]] = 1.0;
        features[[node, leaves + keys[l]]] = 1.0;
        if keys[l] == root_key {
            label = classes[l];
        }
    }
    features[[0, leaves + root_key]] = 1.0;
    let mut labels = vec![None; n];
    labels[0] = Some(label);
    let splits = Splits {
        train: vec![0],
        ..Splits::default()
    };
    let graph = UndirectedGraph::new(n, &edges, features, labels, Some(leaves), splits, true)?;
    Ok(TreeSample { graph, root: 0, label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path(n: usize) -> UndirectedGraph {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        UndirectedGraph::from_edges(n, &e).unwrap()
    }

    #[test]
    fn self_loops_and_duplicates() {
        let f = Matrix::zeros((3, 1));
        let g = UndirectedGraph::new(
            3,
            &[(0, 1), (1, 0), (2, 2)],
            f.clone(),
            vec![None; 3],
            None,
            Splits::default(),
            false,
        )
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        let strict = UndirectedGraph::new(3, &[(2, 2)], f.clone(), vec![None; 3], None, Splits::default(), true);
        assert!(strict.is_err());
        let dup = UndirectedGraph::new(3, &[(0, 1), (1, 0)], f, vec![None; 3], None, Splits::default(), true);
        assert!(dup.is_err());
    }

    #[test]
    fn split_and_label_validation() {
        let f = Matrix::zeros((3, 1));
        let overlap = Splits {
            train: vec![0, 1],
            valid: vec![1],
            test: vec![],
        };
        assert!(UndirectedGraph::new(3, &[], f.clone(), vec![None; 3], None, overlap, false).is_err());
        let bad_label = UndirectedGraph::new(3, &[], f, vec![Some(3), None, None], Some(2), Splits::default(), false);
        assert!(bad_label.is_err());
    }

    #[test]
    fn bipartite_path_example() {
        let g = path(2);
        let bip = BipartiteClusterGraph::build(&g, 1, 2).unwrap();
        assert_eq!(bip.total_cluster_nodes(), 5);
        assert_eq!(bip.neighborhood(0), &[0, 1]);
        assert_eq!(bip.neighborhood(1), &[1, 0]);
        let aug = AugmentedResistanceGraph::from_bipartite(&g, &bip);
        // local nodes of a (vertices 3 and 4) touch exactly {a, b}
        let adj = aug.adjacency();
        let mut a3 = adj[3].clone();
        a3.sort();
        assert_eq!(a3, vec![0, 1]);
    }

    #[test]
    fn bipartite_isolated_and_complete() {
        let g = UndirectedGraph::from_edges(3, &[(0, 1)]).unwrap();
        let bip = BipartiteClusterGraph::build(&g, 1, 2).unwrap();
        assert_eq!(bip.neighborhood(2), &[2]);
        let aug = AugmentedResistanceGraph::from_bipartite(&g, &bip);
        let adj = aug.adjacency();
        // local cluster-nodes of node 2 are the last two vertices
        assert_eq!(adj[aug.n_vertices() - 1], vec![2]);

        let k3 = UndirectedGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let bip = BipartiteClusterGraph::build(&k3, 2, 2).unwrap();
        assert_eq!(bip.total_cluster_nodes(), 8);
        assert!(BipartiteClusterGraph::build(&k3, 0, 2).is_err());
    }

    #[test]
    fn ego_neighbourhoods_are_symmetric_and_edges_counted() {
        let g = gen_erdos_renyi(15, 0.3, 5).unwrap();
        let bip = BipartiteClusterGraph::build(&g, 3, 2).unwrap();
        for i in 0..15 {
            assert_eq!(bip.neighborhood(i)[0], i);
            for u in 0..15 {
                assert_eq!(bip.neighborhood(u).contains(&i), bip.neighborhood(i).contains(&u));
            }
        }
        let aug = AugmentedResistanceGraph::from_bipartite(&g, &bip);
        let expected: usize = 3 * 15 + bip.ego_sizes().iter().map(|s| 2 * s).sum::<usize>();
        assert_eq!(aug.bipartite_edge_count(), expected);
        assert_eq!(aug.n_vertices(), 15 + bip.total_cluster_nodes());
    }

    #[test]
    fn broadcast_examples() {
        // 0-1, 1-2, 1-3, u = 3 has N⁺ = {3, 1}
        let g = UndirectedGraph::from_edges(4, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        let bip = BipartiteClusterGraph::build(&g, 1, 2).unwrap();
        let p = array![[0.1, 0.2], [0.3, 0.4]];
        let b = broadcast_local(&p, 3, &bip).unwrap();
        assert_eq!(b, array![[0.0, 0.0], [0.3, 0.4], [0.0, 0.0], [0.1, 0.2]]);
        let zero = broadcast_local(&Matrix::zeros((2, 2)), 3, &bip).unwrap();
        assert_eq!(zero, Matrix::zeros((4, 2)));
        assert!(broadcast_local(&p, 9, &bip).is_err());
        assert!(broadcast_local(&p, 1, &bip).is_err());

        // N_u⁺ = V: a row permutation
        let star = UndirectedGraph::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let bip = BipartiteClusterGraph::build(&star, 1, 1).unwrap();
        let p = array![[1.0], [2.0], [3.0]];
        let b = broadcast_local(&p, 0, &bip).unwrap();
        assert_eq!(b, array![[1.0], [2.0], [3.0]]);
    }

    #[test]
    fn erdos_renyi_examples() {
        assert_eq!(gen_erdos_renyi(4, 1.0, 1).unwrap().num_edges(), 6);
        assert_eq!(gen_erdos_renyi(4, 0.0, 1).unwrap().num_edges(), 0);
        let a = gen_erdos_renyi(10, 0.3, 42).unwrap();
        let b = gen_erdos_renyi(10, 0.3, 42).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert!(gen_erdos_renyi(10, 1.5, 1).is_err());
    }

    #[test]
    fn sparse_erdos_renyi_mean_degree() {
        let g = gen_erdos_renyi_sparse(4000, 6.0, 3).unwrap();
        let mean = 2.0 * g.num_edges() as f64 / 4000.0;
        assert!((mean - 6.0).abs() < 0.3, "mean degree {mean}");
    }

    #[test]
    fn tree_examples() {
        let t = gen_tree_neighbors_match(2, 1).unwrap();
        assert_eq!(t.graph.n(), 7);
        assert_eq!(t.graph.num_edges(), 6);
        let leaves: Vec<usize> = (0..7).filter(|&i| t.graph.degree(i) == 1).collect();
        assert_eq!(leaves.len(), 4);

        for seed in 0..20 {
            let t = gen_tree_neighbors_match(1, seed).unwrap();
            assert_eq!(t.graph.n(), 3);
            let f = t.graph.features();
            let root_key = (0..2).find(|&k| f[[0, 2 + k]] == 1.0).unwrap();
            let matches: Vec<usize> = (1..3).filter(|&l| f[[l, 2 + root_key]] == 1.0).collect();
            assert_eq!(matches.len(), 1);
            assert_eq!(f[[matches[0], t.label]], 1.0);
            assert_eq!(t.graph.splits().train, vec![0]);
        }
    }

    #[test]
    fn sbm_planted_partition() {
        let g = gen_hetero_sbm(&SbmParams::new(60, 2, 0.0, 0.2, 0.1), 4).unwrap();
        assert!(g.edges().iter().all(|&(u, v)| g.labels()[u] != g.labels()[v]));
        let g = gen_hetero_sbm(&SbmParams::new(60, 2, 0.2, 0.0, 0.1), 4).unwrap();
        assert!(g.edges().iter().all(|&(u, v)| g.labels()[u] == g.labels()[v]));
        assert_eq!(
            g.splits().train.len() + g.splits().valid.len() + g.splits().test.len(),
            60
        );
    }

    #[test]
    fn local_init_interpolates_centre_and_neighbour_mean() {
        let g = UndirectedGraph::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let bip = BipartiteClusterGraph::build(&g, 1, 2).unwrap();
        let x = array![[1.0], [3.0], [5.0]];
        let c = bip.local_init_op().unwrap().apply(&x);
        assert_eq!(c, array![[1.0], [4.0], [3.0], [1.0], [5.0], [1.0]]);
    }

    #[test]
    fn json_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = gen_hetero_sbm(&SbmParams::new(12, 3, 0.1, 0.5, 0.3), 9).unwrap();
        let jp = dir.path().join("g.json");
        write_graph_json(&g, &jp).unwrap();
        assert_eq!(load_graph_json(&jp, true).unwrap(), g);
        let paths = write_graph_csv(&g, &dir.path().join("csv")).unwrap();
        let back = load_graph_csv(&paths, true).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.labels(), g.labels());
        assert_eq!(back.splits(), g.splits());
        assert!((back.features() - g.features()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.csv");
        let f = dir.path().join("f.csv");
        fs::write(&f, "1.0\n2.0\n").unwrap();
        fs::write(&e, "0,1\n1,x\n").unwrap();
        let paths = CsvGraphPaths {
            edges: e.clone(),
            features: f.clone(),
            labels: None,
            splits: None,
        };
        match load_graph_csv(&paths, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&e, "0,1\n").unwrap();
        let g = load_graph_csv(&paths, false).unwrap();
        assert_eq!((g.n(), g.num_edges()), (2, 1));
        fs::write(&e, "0,1\n1,1\n").unwrap();
        assert!(load_graph_csv(&paths, true).is_err());
        fs::write(&e, "0,5\n").unwrap();
        assert!(load_graph_csv(&paths, false).is_err());
    }

    #[test]
    fn json_shapes_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        fs::write(
            &p,
            r#"{"n":3,"edges":[[0,1],[1,2]],"features":[[1,2],[3,4],[5,6]],"labels":[0,1,null]}"#,
        )
        .unwrap();
        let g = load_graph_json(&p, true).unwrap();
        assert_eq!(g.features().dim(), (3, 2));
        assert_eq!(g.num_classes(), 2);
    }
}
