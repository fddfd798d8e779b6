//! Cluster message passing: alternating optimal-transport assignments and
//! closed-form embedding updates of the entropic clustering objective.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteClusterGraph;
use crate::sinkhorn::{
    entropy, sinkhorn_knopp, sinkhorn_segments, stabilize_cost, stabilize_cost_segments, Coupling, MarginalPair,
    SinkhornConfig,
};
use crate::tensor::{Matrix, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    None,
}

/// How the per-node factor in front of the node update is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeNormalizer {
    /// `(α/|V| + β + (1−α)·w_i)⁻¹` with `w_i` the local assignment mass of
    /// node `i`; the exact minimiser on any graph.
    #[default]
    Exact,
    /// `(α/|V| + β + 1 − α)⁻¹`, which equals the exact factor only when every
    /// node's local mass is 1 (regular graphs).
    Constant,
}

/// Combination of local messages. `Sum` weights each neighbourhood's
/// contribution by its size instead of by its assignment mass (experimental).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub t_global: usize,
    pub t_local: usize,
    pub use_message_transform: bool,
    pub activation: Activation,
    pub normalizer: NodeNormalizer,
    pub aggregation: Aggregation,
    /// Treat assignments as constants for differentiation.
    pub detach_assignments: bool,
    /// Divide each cost matrix by its maximum before solving.
    pub stabilize_costs: bool,
    /// Run Sinkhorn to this marginal residual instead of a fixed count
    /// (`t_global` / `t_local` become caps).
    pub sinkhorn_tolerance: Option<f64>,
    pub message_dropout: f64,
    pub layer_norm: bool,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            lambda: 2.0,
            t_global: 5,
            t_local: 5,
            use_message_transform: false,
            activation: Activation::Tanh,
            normalizer: NodeNormalizer::Exact,
            aggregation: Aggregation::Mean,
            detach_assignments: false,
            stabilize_costs: true,
            sinkhorn_tolerance: None,
            message_dropout: 0.0,
            layer_norm: false,
        }
    }
}

impl LayerConfig {
    /// Plain block-coordinate descent on the objective: solvers run to
    /// convergence on raw costs, no transforms, no activation.
    pub fn monitoring(alpha: f64, beta: f64, lambda: f64) -> Self {
        Self {
            alpha,
            beta,
            lambda,
            t_global: 200_000,
            t_local: 200_000,
            use_message_transform: false,
            activation: Activation::None,
            stabilize_costs: false,
            sinkhorn_tolerance: Some(1e-12),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.t_global == 0 || self.t_local == 0 {
            return Err(Error::InvalidArgument("Sinkhorn iteration counts must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.message_dropout) {
            return Err(Error::InvalidArgument("dropout rate must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// True when the layer is an exact descent step on the objective.
    pub fn is_monitoring(&self) -> bool {
        self.sinkhorn_tolerance.is_some()
            && !self.use_message_transform
            && self.activation == Activation::None
            && !self.stabilize_costs
            && !self.layer_norm
            && self.message_dropout == 0.0
            && self.normalizer == NodeNormalizer::Exact
            && self.aggregation == Aggregation::Mean
    }

    fn sinkhorn(&self, iterations: usize) -> SinkhornConfig {
        SinkhornConfig {
            tolerance: self.sinkhorn_tolerance,
            ..SinkhornConfig::new(self.lambda, iterations)
        }
    }
}

/// Node embeddings `Z`, global cluster embeddings (`|Ω| × d`), local cluster
/// embeddings stacked node-major (`|V|·|Γ| × d`) and the fidelity anchor `X`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingState {
    pub z: Tensor,
    pub c_global: Tensor,
    pub c_local: Tensor,
    pub x: Tensor,
}

/// Global coupling (`|V| × |Ω|`) and the local couplings stacked by
/// ego-neighbourhood (`Σ|N_i⁺| × |Γ|`).
#[derive(Clone, Copy, Debug)]
pub struct AssignmentState {
    pub p_global: Coupling,
    pub p_local: Coupling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub global_term: f64,
    pub local_term: f64,
    pub fidelity_term: f64,
    pub global_entropy: f64,
    pub local_entropy: f64,
    pub total: f64,
}

fn check_dims(emb: &EmbeddingState, bip: &BipartiteClusterGraph) -> Result<()> {
    let d = emb.z.cols();
    let ok = emb.z.rows() == bip.n_nodes()
        && emb.x.shape() == emb.z.shape()
        && emb.c_global.shape() == (bip.n_global(), d)
        && emb.c_local.shape() == (bip.n_nodes() * bip.local_width(), d);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "embedding state",
            lhs: emb.z.shape(),
            rhs: emb.c_global.shape(),
        })
    }
}

pub fn assignment_update(
    tape: &Tape,
    emb: &EmbeddingState,
    bip: &BipartiteClusterGraph,
    cfg: &LayerConfig,
) -> Result<AssignmentState> {
    cfg.validate()?;
    check_dims(emb, bip)?;
    let seg = bip.segments();

    let mut cost_g = tape.pairwise_sq_dist(emb.z, emb.c_global)?;
    if cfg.stabilize_costs {
        cost_g = stabilize_cost(tape, cost_g)?;
    }
    if cfg.detach_assignments {
        cost_g = tape.detach(cost_g);
    }
    let marg = MarginalPair::uniform(bip.n_nodes(), bip.n_global())?;
    let p_global = sinkhorn_knopp(tape, cost_g, &marg, &cfg.sinkhorn(cfg.t_global))?;

    let z_stacked = tape.spmm(bip.gather_op(), emb.z)?;
    let mut cost_l = tape.segment_sq_dist(z_stacked, emb.c_local, seg)?;
    if cfg.stabilize_costs {
        cost_l = stabilize_cost_segments(tape, cost_l, seg)?;
    }
    if cfg.detach_assignments {
        cost_l = tape.detach(cost_l);
    }
    let row_targets: Vec<f64> = (0..seg.len())
        .flat_map(|s| {
            let size = seg.range(s).len();
            std::iter::repeat_n(1.0 / size as f64, size)
        })
        .collect();
    let col_targets = vec![1.0 / seg.width() as f64; seg.len() * seg.width()];
    let p_local = sinkhorn_segments(
        tape,
        cost_l,
        seg,
        &row_targets,
        &col_targets,
        &cfg.sinkhorn(cfg.t_local),
    )?;
    Ok(AssignmentState { p_global, p_local })
}

/// Closed-form minimiser in the cluster embeddings: `C = diag(k) PᵀZ`
/// blockwise, `k` being the cluster count of each block.
pub fn cluster_update(
    tape: &Tape,
    assign: &AssignmentState,
    z: Tensor,
    bip: &BipartiteClusterGraph,
) -> Result<(Tensor, Tensor)> {
    let pg = tape.transpose(assign.p_global.p);
    let c_global = tape.scale(tape.matmul(pg, z)?, bip.n_global() as f64);
    let z_stacked = tape.spmm(bip.gather_op(), z)?;
    let pooled = tape.segment_pool(assign.p_local.p, z_stacked, bip.segments())?;
    let c_local = tape.scale(pooled, bip.local_width() as f64);
    Ok((c_global, c_local))
}

/// Per-node local mass under the chosen aggregation.
fn local_mass(bip: &BipartiteClusterGraph, aggregation: Aggregation) -> Vec<f64> {
    match aggregation {
        Aggregation::Mean => bip.local_weights().to_vec(),
        Aggregation::Sum => (0..bip.n_nodes()).map(|i| bip.ego_size(i) as f64).collect(),
    }
}

/// Closed-form minimiser in `Z`. With a transform `W` (or an activation) the
/// normalised global and local messages pass through `f(y) = act(y W)` before
/// being recombined with the same weights.
#[allow(clippy::too_many_arguments)]
pub fn node_update<'r>(
    tape: &Tape,
    assign: &AssignmentState,
    emb: &EmbeddingState,
    bip: &BipartiteClusterGraph,
    cfg: &LayerConfig,
    transform: Option<Tensor>,
    rng: Option<&mut (dyn RngCore + 'r)>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_dims(emb, bip)?;
    let n = bip.n_nodes() as f64;
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let seg = bip.segments();

    let global_msg = tape.matmul(assign.p_global.p, emb.c_global)?;
    let mut p_loc = assign.p_local.p;
    if cfg.aggregation == Aggregation::Sum {
        let sizes: Vec<f64> = (0..seg.len())
            .flat_map(|s| {
                let size = seg.range(s).len();
                std::iter::repeat_n(size as f64, size)
            })
            .collect();
        p_loc = tape.scale_rows(p_loc, sizes)?;
    }
    let spread = tape.segment_spread(p_loc, emb.c_local, seg)?;
    let local_msg = tape.spmm(bip.scatter_op(), spread)?;
    let mass = local_mass(bip, cfg.aggregation);

    let shaped = transform.is_some() || cfg.activation != Activation::None;
    let (global_part, local_part) = if shaped || cfg.layer_norm || cfg.message_dropout > 0.0 {
        // Row i of |V|·P^Ω C^Ω and of the local message divided by its mass
        // are convex combinations of cluster embeddings.
        let g_hat = tape.scale(global_msg, n);
        let l_hat = tape.scale_rows(local_msg, mass.iter().map(|m| 1.0 / m).collect())?;
        let mut rng = rng;
        let mut shape = |t: Tensor| -> Result<Tensor> {
            let mut y = match transform {
                Some(w) => tape.matmul(t, w)?,
                None => t,
            };
            if cfg.activation == Activation::Tanh {
                y = tape.tanh(y);
            }
            if cfg.layer_norm {
                y = tape.layer_norm_rows(y, 1e-5);
            }
            if cfg.message_dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    y = tape.dropout(y, cfg.message_dropout, r)?;
                }
            }
            Ok(y)
        };
        let g = shape(g_hat)?;
        let l = shape(l_hat)?;
        (
            tape.scale(g, alpha / n),
            tape.scale_rows(l, mass.iter().map(|m| (1.0 - alpha) * m).collect())?,
        )
    } else {
        (tape.scale(global_msg, alpha), tape.scale(local_msg, 1.0 - alpha))
    };

    let mut sum = tape.add(global_part, local_part)?;
    if beta > 0.0 {
        sum = tape.add(sum, tape.scale(emb.x, beta))?;
    }
    let gamma: Vec<f64> = mass
        .iter()
        .map(|&w| match cfg.normalizer {
            NodeNormalizer::Exact => 1.0 / (alpha / n + beta + (1.0 - alpha) * w),
            NodeNormalizer::Constant => 1.0 / (alpha / n + beta + 1.0 - alpha),
        })
        .collect();
    tape.scale_rows(sum, gamma)
}

fn weighted_sq_dist_sum(p: &Matrix, z: &Matrix, c: &Matrix) -> f64 {
    let mut total = 0.0;
    for (i, zi) in z.rows().into_iter().enumerate() {
        for (j, cj) in c.rows().into_iter().enumerate() {
            let pij = p[[i, j]];
            if pij != 0.0 {
                total += pij * zi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
    }
    total
}

/// Evaluates every term of the entropic clustering objective.
pub fn objective(
    tape: &Tape,
    emb: &EmbeddingState,
    assign: &AssignmentState,
    bip: &BipartiteClusterGraph,
    cfg: &LayerConfig,
) -> Result<ObjectiveBreakdown> {
    check_dims(emb, bip)?;
    let z = tape.value(emb.z);
    let x = tape.value(emb.x);
    let pg = tape.value(assign.p_global.p);
    let pl = tape.value(assign.p_local.p);
    let cg = tape.value(emb.c_global);
    let cl = tape.value(emb.c_local);
    let w = bip.local_width();

    let global_term = weighted_sq_dist_sum(&pg, &z, &cg);
    let mut local_term = 0.0;
    let seg = bip.segments();
    for u in 0..bip.n_nodes() {
        for (k, r) in seg.range(u).enumerate() {
            let zi = z.row(bip.local_index(u, k)?);
            for j in 0..w {
                let cj = cl.row(u * w + j);
                local_term += pl[[r, j]] * zi.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
    }
    let fidelity_term = (&*z - &*x).mapv(|v| v * v).sum();
    let global_entropy = entropy(&pg);
    let local_entropy = entropy(&pl);
    Ok(ObjectiveBreakdown::assemble(
        global_term,
        local_term,
        fidelity_term,
        global_entropy,
        local_entropy,
        cfg.alpha,
        cfg.beta,
        cfg.lambda,
    ))
}

impl ObjectiveBreakdown {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        global_term: f64,
        local_term: f64,
        fidelity_term: f64,
        global_entropy: f64,
        local_entropy: f64,
        alpha: f64,
        beta: f64,
        lambda: f64,
    ) -> Self {
        let total = alpha * global_term + (1.0 - alpha) * local_term + beta * fidelity_term
            - alpha / lambda * global_entropy
            - (1.0 - alpha) / lambda * local_entropy;
        Self {
            global_term,
            local_term,
            fidelity_term,
            global_entropy,
            local_entropy,
            total,
        }
    }
}

/// Lower bound on the objective from the maximal entropies of the couplings.
pub fn entropy_lower_bound(
    n_nodes: usize,
    n_global: usize,
    ego_sizes: &[usize],
    local_counts: &[usize],
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    if n_nodes == 0 || n_global == 0 || ego_sizes.len() != local_counts.len() || !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lower bound needs positive sizes and λ".into()));
    }
    if ego_sizes.iter().chain(local_counts).any(|&s| s == 0) {
        return Err(Error::InvalidArgument("lower bound needs positive sizes".into()));
    }
    let global = -((n_nodes * n_global) as f64).ln();
    let local: f64 = ego_sizes
        .iter()
        .zip(local_counts)
        .map(|(&a, &b)| -((a * b) as f64).ln())
        .sum();
    Ok(alpha / lambda * global + (1.0 - alpha) / lambda * local)
}

pub fn entropy_bound_for(bip: &BipartiteClusterGraph, alpha: f64, lambda: f64) -> Result<f64> {
    entropy_lower_bound(
        bip.n_nodes(),
        bip.n_global(),
        &bip.ego_sizes(),
        bip.local_counts(),
        alpha,
        lambda,
    )
}

/// Trainable inputs of a stack of layers: the global cluster table used to
/// start the first layer and one optional `d × d` message transform per layer.
#[derive(Clone, Debug)]
pub struct DcParams {
    pub c_global: Tensor,
    pub transforms: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct DcOutput {
    pub z: Tensor,
    pub c_global: Tensor,
    pub c_local: Tensor,
    pub assignments: AssignmentState,
    /// One entry per layer when monitoring was requested.
    pub trace: Vec<ObjectiveBreakdown>,
}

/// Runs `layers` rounds of assignment, cluster and node updates starting from
/// `Z = X`, the given global table and locally initialised clusters.
#[allow(clippy::too_many_arguments)]
pub fn dc_msgpassing<'r>(
    tape: &Tape,
    x: Tensor,
    bip: &BipartiteClusterGraph,
    cfg: &LayerConfig,
    layers: usize,
    params: &DcParams,
    monitor: bool,
    mut rng: Option<&mut (dyn RngCore + 'r)>,
) -> Result<DcOutput> {
    cfg.validate()?;
    if layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if cfg.use_message_transform && params.transforms.len() != layers {
        return Err(Error::InvalidArgument(format!(
            "{} message transforms for {layers} layers",
            params.transforms.len()
        )));
    }
    let local_init = Arc::new(bip.local_init_op()?);
    let mut emb = EmbeddingState {
        z: x,
        c_global: params.c_global,
        c_local: tape.spmm(&local_init, x)?,
        x,
    };
    check_dims(&emb, bip)?;
    let mut trace = Vec::new();
    let mut last = None;
    for l in 0..layers {
        let assign = assignment_update(tape, &emb, bip, cfg)?;
        let (c_global, c_local) = cluster_update(tape, &assign, emb.z, bip)?;
        emb.c_global = c_global;
        emb.c_local = c_local;
        let transform = cfg.use_message_transform.then(|| params.transforms[l]);
        emb.z = node_update(tape, &assign, &emb, bip, cfg, transform, rng.as_deref_mut())?;
        if tape.value(emb.z).iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite node embeddings after layer {}",
                l + 1
            )));
        }
        if monitor {
            trace.push(objective(tape, &emb, &assign, bip, cfg)?);
        }
        last = Some(assign);
    }
    Ok(DcOutput {
        z: emb.z,
        c_global: emb.c_global,
        c_local: emb.c_local,
        assignments: last.expect("layers ≥ 1"),
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceVerdict {
    pub passed: bool,
    pub monotone: bool,
    pub settled: bool,
    /// Largest step-to-step increase of the total (≤ 0 for a descending trace).
    pub max_increase: f64,
    pub final_change: f64,
}

/// Passes when no step increases the total by more than `slack` and the last
/// step changes it by less than `tolerance`.
pub fn convergence_monitor(trace: &[ObjectiveBreakdown], slack: f64, tolerance: f64) -> ConvergenceVerdict {
    let totals: Vec<f64> = trace.iter().map(|o| o.total).collect();
    let max_increase = totals.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let final_change = match totals.as_slice() {
        [.., a, b] => (b - a).abs(),
        _ => 0.0,
    };
    let monotone = totals.windows(2).all(|w| w[1] <= w[0] + slack) && totals.iter().all(|t| t.is_finite());
    let settled = final_change < tolerance;
    ConvergenceVerdict {
        passed: monotone && settled,
        monotone,
        settled,
        max_increase: if totals.len() < 2 { 0.0 } else { max_increase },
        final_change,
    }
}

/// Plain-matrix snapshot of an embedding and assignment state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub z: Matrix,
    pub c_global: Matrix,
    pub c_local: Matrix,
    pub x: Matrix,
    pub p_global: Matrix,
    pub p_local: Matrix,
}

impl StateValues {
    pub fn capture(tape: &Tape, emb: &EmbeddingState, assign: &AssignmentState) -> Self {
        Self {
            z: (*tape.value(emb.z)).clone(),
            c_global: (*tape.value(emb.c_global)).clone(),
            c_local: (*tape.value(emb.c_local)).clone(),
            x: (*tape.value(emb.x)).clone(),
            p_global: (*tape.value(assign.p_global.p)).clone(),
            p_local: (*tape.value(assign.p_local.p)).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Clusters,
    Nodes,
}

/// Reference minimiser of the objective over one block of embeddings with
/// the assignments held fixed, by `steps` of fixed-step gradient descent on
/// the taped objective. Used to check the closed-form updates.
pub fn descent_reference(
    vals: &StateValues,
    bip: &BipartiteClusterGraph,
    alpha: f64,
    beta: f64,
    block: Block,
    steps: usize,
) -> Result<StateValues> {
    let n = bip.n_nodes() as f64;
    // Curvature of the quadratic per row; the step uses the largest one.
    let h_max = match block {
        Block::Clusters => 2.0 * (alpha / bip.n_global() as f64).max((1.0 - alpha) / bip.local_width() as f64),
        Block::Nodes => bip
            .local_weights()
            .iter()
            .map(|w| 2.0 * (alpha / n + beta + (1.0 - alpha) * w))
            .fold(0.0, f64::max),
    };
    if !(h_max > 0.0) {
        return Err(Error::Degenerate {
            op: "descent_reference",
            detail: "block has no curvature".into(),
        });
    }
    let step = 1.0 / h_max;
    let mut out = vals.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let grad_c = block == Block::Clusters;
        let z = tape.leaf(out.z.clone(), !grad_c);
        let cg = tape.leaf(out.c_global.clone(), grad_c);
        let cl = tape.leaf(out.c_local.clone(), grad_c);
        let x = tape.constant(out.x.clone());
        let pg = tape.constant(out.p_global.clone());
        let pl = tape.constant(out.p_local.clone());
        let global = tape.sum(tape.hadamard(pg, tape.pairwise_sq_dist(z, cg)?)?);
        let zs = tape.spmm(bip.gather_op(), z)?;
        let local = tape.sum(tape.hadamard(pl, tape.segment_sq_dist(zs, cl, bip.segments())?)?);
        let diff = tape.sub(z, x)?;
        let fid = tape.sum(tape.hadamard(diff, diff)?);
        let loss = tape.add(
            tape.add(tape.scale(global, alpha), tape.scale(local, 1.0 - alpha))?,
            tape.scale(fid, beta),
        )?;
        let g = tape.backward(loss)?;
        match block {
            Block::Clusters => {
                out.c_global.scaled_add(-step, &g.get_or_zeros(&cg));
                out.c_local.scaled_add(-step, &g.get_or_zeros(&cl));
            }
            Block::Nodes => out.z.scaled_add(-step, &g.get_or_zeros(&z)),
        }
    }
    Ok(out)
}
