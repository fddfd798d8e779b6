//! Entropic optimal transport by Sinkhorn–Knopp matrix scaling, plus an
//! exact min-cost-flow solver for small transportation problems.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix, RowSegments, Tape, Tensor};

const MARGINAL_TOL: f64 = 1e-12;

/// Source and target marginals of a transport plan.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPair {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl MarginalPair {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        for (name, w) in [("u", &u), ("v", &v)] {
            if w.is_empty() || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "marginal {name} must be non-empty with positive entries"
                )));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > MARGINAL_TOL * w.len() as f64 {
                return Err(Error::InvalidArgument(format!("marginal {name} sums to {s}")));
            }
        }
        Ok(Self { u, v })
    }

    pub fn uniform(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument("empty marginal".into()));
        }
        Ok(Self {
            u: vec![1.0 / n as f64; n],
            v: vec![1.0 / k as f64; k],
        })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornConfig {
    pub lambda: f64,
    /// Scaling iterations; an upper bound when `tolerance` is set.
    pub iterations: usize,
    /// Floor on the initial kernel entries.
    pub min_entry: f64,
    /// Stop as soon as both marginal residuals fall below this.
    pub tolerance: Option<f64>,
}

impl SinkhornConfig {
    pub fn new(lambda: f64, iterations: usize) -> Self {
        Self {
            lambda,
            iterations,
            min_entry: 1e-30,
            tolerance: None,
        }
    }

    /// Runs until the residual drops below `tol` (at most `max_iterations`).
    pub fn to_convergence(lambda: f64, tol: f64, max_iterations: usize) -> Self {
        Self {
            tolerance: Some(tol),
            ..Self::new(lambda, max_iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("Sinkhorn needs at least one iteration".into()));
        }
        if !(self.min_entry > 0.0) {
            return Err(Error::InvalidArgument("min_entry must be > 0".into()));
        }
        if matches!(self.tolerance, Some(t) if !(t > 0.0)) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Transport plan on the tape with its final marginal residuals.
#[derive(Clone, Copy, Debug)]
pub struct Coupling {
    pub p: Tensor,
    pub achieved_row_err: f64,
    pub achieved_col_err: f64,
    pub iterations: usize,
}

/// Divides the cost by its largest entry; all-zero (or non-positive) costs
/// pass through.
pub fn stabilize_cost(tape: &Tape, m: Tensor) -> Result<Tensor> {
    let seg = Arc::new(RowSegments::from_sizes(&[m.rows()], m.cols()));
    tape.segment_max_normalize(m, &seg)
}

/// Per-segment version of [`stabilize_cost`].
pub fn stabilize_cost_segments(tape: &Tape, m: Tensor, seg: &Arc<RowSegments>) -> Result<Tensor> {
    tape.segment_max_normalize(m, seg)
}

pub fn sinkhorn_knopp(tape: &Tape, m: Tensor, marg: &MarginalPair, cfg: &SinkhornConfig) -> Result<Coupling> {
    if m.shape() != (marg.u.len(), marg.v.len()) {
        return Err(Error::Shape {
            op: "sinkhorn_knopp",
            lhs: m.shape(),
            rhs: (marg.u.len(), marg.v.len()),
        });
    }
    let seg = Arc::new(RowSegments::from_sizes(&[m.rows()], m.cols()));
    sinkhorn_segments(tape, m, &seg, &marg.u, &marg.v, cfg)
}

/// Independent transport problems stacked row-wise: segment `s` occupies
/// rows `seg.range(s)`, with row targets `row_targets[r]` and column targets
/// `col_targets[s * width + j]`.
///
/// One iteration rescales rows then columns. Gradients flow through every
/// iteration when `m` requires them; otherwise the scaling runs off-tape.
pub fn sinkhorn_segments(
    tape: &Tape,
    m: Tensor,
    seg: &Arc<RowSegments>,
    row_targets: &[f64],
    col_targets: &[f64],
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    cfg.validate()?;
    let w = seg.width();
    if m.rows() != seg.total_rows()
        || m.cols() != w
        || row_targets.len() != m.rows()
        || col_targets.len() != seg.len() * w
    {
        return Err(Error::Shape {
            op: "sinkhorn_segments",
            lhs: m.shape(),
            rhs: (row_targets.len(), col_targets.len()),
        });
    }
    let mv = tape.value(m);
    if mv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain {
            op: "sinkhorn_knopp",
            detail: "non-finite cost".into(),
        });
    }
    // Subtracting each row's minimum only rescales rows of the kernel, which
    // the first row normalisation absorbs; it keeps exp(−λm) from underflowing.
    let mut shift = Matrix::zeros(mv.dim());
    for (r, mut row) in shift.rows_mut().into_iter().enumerate() {
        let lo = mv.row(r).iter().copied().fold(f64::INFINITY, f64::min);
        row.fill(lo);
    }

    if !tape.is_recording() || !tape.requires_grad(m) {
        let (p, iterations, re, ce) = log_domain_scaling(&(&*mv - &shift), seg, row_targets, col_targets, cfg, None)?;
        return Ok(Coupling {
            p: tape.constant(p),
            achieved_row_err: re,
            achieved_col_err: ce,
            iterations,
        });
    }

    let shifted = tape.sub(m, tape.constant(shift))?;
    let b = tape.clamp_min(tape.exp(tape.scale(shifted, -cfg.lambda)), cfg.min_entry);
    let mut p = b;
    let mut done = 0;
    let (mut re, mut ce) = (f64::INFINITY, f64::INFINITY);
    while done < cfg.iterations {
        p = tape.row_normalize(p, row_targets)?;
        p = tape.segment_col_normalize(p, seg, col_targets)?;
        done += 1;
        if cfg.tolerance.is_some() || done == cfg.iterations {
            (re, ce) = residuals(&tape.value(p), seg, row_targets, col_targets);
            if cfg.tolerance.is_some_and(|t| re.max(ce) < t) {
                break;
            }
        }
    }
    Ok(Coupling {
        p,
        achieved_row_err: re,
        achieved_col_err: ce,
        iterations: done,
    })
}

/// Off-tape scaling carried out on log-potentials. The iterates are those of
/// the linear-domain recursion, but large `λ·m` neither underflows nor hits
/// the kernel floor.
fn log_domain_scaling(
    m: &Matrix,
    seg: &RowSegments,
    row_targets: &[f64],
    col_targets: &[f64],
    cfg: &SinkhornConfig,
    g0: Option<&[f64]>,
) -> Result<(Matrix, usize, f64, f64)> {
    let w = seg.width();
    let k = m.mapv(|x| -cfg.lambda * x);
    let log_rt: Vec<f64> = row_targets.iter().map(|x| x.ln()).collect();
    let log_ct: Vec<f64> = col_targets.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m.nrows()];
    let mut g = g0.map_or_else(|| vec![0.0; seg.len() * w], <[f64]>::to_vec);
    let plan = |f: &[f64], g: &[f64]| {
        let mut p = Matrix::zeros(k.dim());
        for s in 0..seg.len() {
            for r in seg.range(s) {
                for j in 0..w {
                    p[[r, j]] = (f[r] + g[s * w + j] + k[[r, j]]).exp();
                }
            }
        }
        p
    };
    let mut buf = Vec::new();
    let mut done = 0;
    let (mut re, mut ce) = (f64::INFINITY, f64::INFINITY);
    let mut p = None;
    while done < cfg.iterations {
        for s in 0..seg.len() {
            for r in seg.range(s) {
                buf.clear();
                buf.extend((0..w).map(|j| g[s * w + j] + k[[r, j]]));
                f[r] = log_rt[r] - log_sum_exp(&buf);
            }
            for j in 0..w {
                buf.clear();
                buf.extend(seg.range(s).map(|r| f[r] + k[[r, j]]));
                g[s * w + j] = log_ct[s * w + j] - log_sum_exp(&buf);
            }
        }
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(Error::Degenerate {
                op: "sinkhorn_knopp",
                detail: "scaling potentials became non-finite".into(),
            });
        }
        done += 1;
        if cfg.tolerance.is_some() || done == cfg.iterations {
            let q = plan(&f, &g);
            (re, ce) = residuals(&q, seg, row_targets, col_targets);
            p = Some(q);
            if cfg.tolerance.is_some_and(|t| re.max(ce) < t) {
                break;
            }
        }
    }
    Ok((p.unwrap_or_else(|| plan(&f, &g)), done, re, ce))
}

/// Largest absolute row and column marginal violations.
pub fn residuals(p: &Matrix, seg: &RowSegments, row_targets: &[f64], col_targets: &[f64]) -> (f64, f64) {
    let w = seg.width();
    let re = p
        .rows()
        .into_iter()
        .zip(row_targets)
        .map(|(row, t)| (row.sum() - t).abs())
        .fold(0.0, f64::max);
    let mut ce: f64 = 0.0;
    for s in 0..seg.len() {
        for j in 0..w {
            let cs: f64 = seg.range(s).map(|r| p[[r, j]]).sum();
            ce = ce.max((cs - col_targets[s * w + j]).abs());
        }
    }
    (re, ce)
}

/// Off-tape solve returning the plan and its residuals.
pub fn sinkhorn_matrix(m: &Matrix, marg: &MarginalPair, cfg: &SinkhornConfig) -> Result<(Matrix, f64, f64)> {
    let tape = Tape::no_grad();
    let c = sinkhorn_knopp(&tape, tape.constant(m.clone()), marg, cfg)?;
    Ok(((*tape.value(c.p)).clone(), c.achieved_row_err, c.achieved_col_err))
}

/// Off-tape solve whose scaling starts from `B·diag(v0)` instead of `B`.
/// The fixed point does not depend on `v0`.
pub fn sinkhorn_with_initial_scaling(
    m: &Matrix,
    marg: &MarginalPair,
    cfg: &SinkhornConfig,
    v0: &[f64],
) -> Result<Matrix> {
    cfg.validate()?;
    if v0.len() != m.ncols() || v0.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument(
            "initial scaling must be positive, one per column".into(),
        ));
    }
    if m.dim() != (marg.u.len(), marg.v.len()) {
        return Err(Error::Shape {
            op: "sinkhorn_with_initial_scaling",
            lhs: m.dim(),
            rhs: (marg.u.len(), marg.v.len()),
        });
    }
    let seg = RowSegments::from_sizes(&[m.nrows()], m.ncols());
    let g0: Vec<f64> = v0.iter().map(|x| x.ln()).collect();
    let (p, ..) = log_domain_scaling(m, &seg, &marg.u, &marg.v, cfg, Some(&g0))?;
    Ok(p)
}

/// Projects an approximately feasible plan onto `U(u, v)`: shrink rows and
/// columns that overshoot, then spread the remaining deficit as a rank-one
/// correction. Moves at most about twice the total marginal violation.
pub fn round_to_feasible(p: &Matrix, marg: &MarginalPair) -> Result<Matrix> {
    if p.dim() != (marg.u.len(), marg.v.len()) {
        return Err(Error::Shape {
            op: "round_to_feasible",
            lhs: p.dim(),
            rhs: (marg.u.len(), marg.v.len()),
        });
    }
    let mut q = p.mapv(|x| x.max(0.0));
    for (i, mut row) in q.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if s > marg.u[i] {
            row *= marg.u[i] / s;
        }
    }
    for (j, mut col) in q.columns_mut().into_iter().enumerate() {
        let s = col.sum();
        if s > marg.v[j] {
            col *= marg.v[j] / s;
        }
    }
    let er: Vec<f64> = q.rows().into_iter().zip(&marg.u).map(|(r, u)| u - r.sum()).collect();
    let ec: Vec<f64> = q.columns().into_iter().zip(&marg.v).map(|(c, v)| v - c.sum()).collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..er.len() {
            for j in 0..ec.len() {
                q[[i, j]] += er[i] * ec[j] / total;
            }
        }
    }
    Ok(q)
}

/// `−Σ p log p` with `0 log 0 = 0`.
pub fn entropy(p: &Matrix) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `⟨P, M⟩`.
pub fn transport_cost(p: &Matrix, m: &Matrix) -> f64 {
    (p * m).sum()
}

/// Exact optimal transport by successive shortest paths on the
/// transportation network (source → rows → columns → sink).
pub fn ot_lp_oracle(m: &Matrix, marg: &MarginalPair) -> Result<(f64, Matrix)> {
    let (n, k) = m.dim();
    if (n, k) != (marg.u.len(), marg.v.len()) {
        return Err(Error::Shape {
            op: "ot_lp_oracle",
            lhs: (n, k),
            rhs: (marg.u.len(), marg.v.len()),
        });
    }
    if n * k > 64 {
        return Err(Error::TooLarge(format!("{n}×{k} exceeds 64 cells")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain {
            op: "ot_lp_oracle",
            detail: "non-finite cost".into(),
        });
    }
    const EPS: f64 = 1e-15;
    let src = n + k;
    let sink = src + 1;
    let nv = sink + 1;
    let mut net = FlowNetwork::new(nv);
    for i in 0..n {
        net.add_edge(src, i, marg.u[i], 0.0);
    }
    let mut cell = vec![vec![0; k]; n];
    for i in 0..n {
        for j in 0..k {
            cell[i][j] = net.add_edge(i, n + j, f64::INFINITY, m[[i, j]]);
        }
    }
    for j in 0..k {
        net.add_edge(n + j, sink, marg.v[j], 0.0);
    }
    let mut remaining = 1.0;
    while remaining > EPS {
        let Some(path) = net.shortest_path(src, sink, EPS) else {
            break;
        };
        let bottleneck = path.iter().map(|&e| net.cap[e]).fold(remaining, f64::min);
        for &e in &path {
            net.cap[e] -= bottleneck;
            net.cap[e ^ 1] += bottleneck;
        }
        remaining -= bottleneck;
    }
    let mut p = Matrix::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            // flow on a forward edge equals the residual capacity of its twin
            p[[i, j]] = net.cap[cell[i][j] ^ 1];
        }
    }
    Ok((transport_cost(&p, m), p))
}

struct FlowNetwork {
    head: Vec<usize>,
    to: Vec<usize>,
    cap: Vec<f64>,
    cost: Vec<f64>,
    out: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self {
            head: Vec::new(),
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            out: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, cap: f64, cost: f64) -> usize {
        let e = self.to.len();
        for (from, to, c, w) in [(a, b, cap, cost), (b, a, 0.0, -cost)] {
            self.out[from].push(self.to.len());
            self.head.push(from);
            self.to.push(to);
            self.cap.push(c);
            self.cost.push(w);
        }
        e
    }

    /// Bellman–Ford over edges with residual capacity above `eps`.
    fn shortest_path(&self, s: usize, t: usize, eps: f64) -> Option<Vec<usize>> {
        let nv = self.out.len();
        let mut dist = vec![f64::INFINITY; nv];
        let mut via = vec![usize::MAX; nv];
        dist[s] = 0.0;
        for _ in 0..nv {
            let mut changed = false;
            for e in 0..self.to.len() {
                let a = self.head[e];
                if self.cap[e] > eps && dist[a] < f64::INFINITY {
                    let d = dist[a] + self.cost[e];
                    if d < dist[self.to[e]] - 1e-15 {
                        dist[self.to[e]] = d;
                        via[self.to[e]] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t] == f64::INFINITY {
            return None;
        }
        let mut path = Vec::new();
        let mut v = t;
        while v != s {
            let e = via[v];
            path.push(e);
            v = self.head[e];
        }
        path.reverse();
        Some(path)
    }
}
