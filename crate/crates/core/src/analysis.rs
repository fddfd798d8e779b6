//! Graph diagnostics: effective resistance under cluster-node augmentation,
//! class homophily and Dirichlet energy of embeddings.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{AugmentedResistanceGraph, UndirectedGraph};
use crate::tensor::Matrix;

/// Eigenvalues below this are treated as the Laplacian's null space.
const ZERO_EIGENVALUE: f64 = 1e-10;

fn laplacian(n: usize, edges: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let mut l = DMatrix::zeros(n, n);
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::IndexOutOfRange {
                index: u.max(v),
                len: n,
            });
        }
        if u == v {
            continue;
        }
        l[(u, u)] += 1.0;
        l[(v, v)] += 1.0;
        l[(u, v)] -= 1.0;
        l[(v, u)] -= 1.0;
    }
    Ok(l)
}

/// Component id per vertex and the number of components.
fn components(n: usize, edges: &[(usize, usize)]) -> (usize, Vec<usize>) {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = count;
        let mut stack = vec![s];
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if comp[y] == usize::MAX {
                    comp[y] = count;
                    stack.push(y);
                }
            }
        }
        count += 1;
    }
    (count, comp)
}

/// `R_uv` with unit resistors on `edges`, from one solve of
/// `(L + 11ᵀ/n) y = 1_u − 1_v` (the rank-one term pins the null space).
/// Only the component containing `u` and `v` is assembled.
pub fn effective_resistance(n: usize, edges: &[(usize, usize)], u: usize, v: usize) -> Result<f64> {
    for x in [u, v] {
        if x >= n {
            return Err(Error::IndexOutOfRange { index: x, len: n });
        }
    }
    if u == v {
        return Ok(0.0);
    }
    let (count, comp) = components(n, edges);
    if comp[u] != comp[v] {
        return Err(Error::Disconnected {
            components: count,
            u,
            v,
        });
    }
    let members: Vec<usize> = (0..n).filter(|&x| comp[x] == comp[u]).collect();
    let mut local = vec![usize::MAX; n];
    for (k, &x) in members.iter().enumerate() {
        local[x] = k;
    }
    let sub: Vec<(usize, usize)> = edges
        .iter()
        .filter(|&&(a, _)| comp[a] == comp[u])
        .map(|&(a, b)| (local[a], local[b]))
        .collect();
    let m = members.len();
    let mut a = laplacian(m, &sub)?;
    a.add_scalar_mut(1.0 / m as f64);
    let mut b = DVector::zeros(m);
    b[local[u]] = 1.0;
    b[local[v]] = -1.0;
    let chol = a.cholesky().ok_or_else(|| Error::Degenerate {
        op: "effective_resistance",
        detail: "shifted Laplacian is not positive definite".into(),
    })?;
    let y = chol.solve(&b);
    Ok(y[local[u]] - y[local[v]])
}

/// Moore–Penrose pseudoinverse of the Laplacian of a connected graph.
pub fn laplacian_pinv(n: usize, edges: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let (count, comp) = components(n, edges);
    if count > 1 {
        let v = comp.iter().position(|&c| c != comp[0]).unwrap_or(0);
        return Err(Error::Disconnected {
            components: count,
            u: 0,
            v,
        });
    }
    let eig = laplacian(n, edges)?.symmetric_eigen();
    let mut pinv = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() < ZERO_EIGENVALUE {
            continue;
        }
        let q = eig.eigenvectors.column(k);
        pinv += (q * q.transpose()) / lambda;
    }
    Ok(pinv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResistanceReport {
    /// Pairwise effective resistances among the reported vertices.
    pub pairwise: Matrix,
    /// Sum over unordered pairs.
    pub r_tot: f64,
}

/// All-pairs resistances of the first `restrict_to` vertices (all of them
/// when `None`) from one pseudoinverse of the full graph.
pub fn total_effective_resistance(
    n: usize,
    edges: &[(usize, usize)],
    restrict_to: Option<usize>,
) -> Result<ResistanceReport> {
    let k = restrict_to.unwrap_or(n).min(n);
    let pinv = laplacian_pinv(n, edges)?;
    let mut pairwise = Matrix::zeros((k, k));
    let mut r_tot = 0.0;
    for u in 0..k {
        for v in u + 1..k {
            let r = (pinv[(u, u)] + pinv[(v, v)] - 2.0 * pinv[(u, v)]).max(0.0);
            pairwise[[u, v]] = r;
            pairwise[[v, u]] = r;
            r_tot += r;
        }
    }
    Ok(ResistanceReport { pairwise, r_tot })
}

pub fn graph_resistance(g: &UndirectedGraph) -> Result<ResistanceReport> {
    total_effective_resistance(g.n(), g.edges(), None)
}

/// Total resistance among original nodes for every augmentation size.
#[derive(Clone, Debug, PartialEq)]
pub struct ResistanceHeatmap {
    pub global_counts: Vec<usize>,
    pub local_counts: Vec<usize>,
    /// Rows follow `local_counts`, columns `global_counts`.
    pub r_tot: Matrix,
}

impl ResistanceHeatmap {
    /// True when no entry exceeds its left or upper neighbour by more than
    /// `tol` (relative).
    pub fn is_monotone(&self, tol: f64) -> bool {
        let m = &self.r_tot;
        let (rows, cols) = m.dim();
        (0..rows).all(|i| {
            (0..cols).all(|j| {
                let ok_left = j == 0 || m[[i, j]] <= m[[i, j - 1]] * (1.0 + tol);
                let ok_up = i == 0 || m[[i, j]] <= m[[i - 1, j]] * (1.0 + tol);
                ok_left && ok_up
            })
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("local\\global");
        for g in &self.global_counts {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
        for (i, l) in self.local_counts.iter().enumerate() {
            out.push_str(&l.to_string());
            for j in 0..self.global_counts.len() {
                out.push_str(&format!(",{}", self.r_tot[[i, j]]));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn resistance_heatmap(
    g: &UndirectedGraph,
    global_counts: &[usize],
    local_counts: &[usize],
) -> Result<ResistanceHeatmap> {
    if global_counts.is_empty() || local_counts.is_empty() {
        return Err(Error::InvalidArgument(
            "heatmap needs at least one count per axis".into(),
        ));
    }
    let (count, comp) = g.components();
    if count > 1 {
        let v = comp.iter().position(|&c| c != comp[0]).unwrap_or(0);
        return Err(Error::Disconnected {
            components: count,
            u: 0,
            v,
        });
    }
    let mut r_tot = Matrix::zeros((local_counts.len(), global_counts.len()));
    for (i, &l) in local_counts.iter().enumerate() {
        for (j, &k) in global_counts.iter().enumerate() {
            let aug = AugmentedResistanceGraph::new(g, k, l);
            r_tot[[i, j]] = total_effective_resistance(aug.n_vertices(), aug.edges(), Some(g.n()))?.r_tot;
        }
    }
    Ok(ResistanceHeatmap {
        global_counts: global_counts.to_vec(),
        local_counts: local_counts.to_vec(),
        r_tot,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomophilyMatrix {
    /// `h[a][b]`: fraction of edge endpoints leaving class `a` that land in
    /// class `b`, each undirected edge counted in both directions.
    pub h: Matrix,
    /// Fraction of edges joining equal labels; `None` without edges.
    pub edge_homophily: Option<f64>,
}

pub fn homophily_matrix(g: &UndirectedGraph) -> Result<HomophilyMatrix> {
    let labels: Vec<usize> = g
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::InvalidArgument(format!("node {i} is unlabeled"))))
        .collect::<Result<_>>()?;
    let c = g.num_classes();
    let mut h = Matrix::zeros((c, c));
    let mut same = 0usize;
    for &(u, v) in g.edges() {
        let (a, b) = (labels[u], labels[v]);
        h[[a, b]] += 1.0;
        h[[b, a]] += 1.0;
        same += usize::from(a == b);
    }
    for mut row in h.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    let edge_homophily = (g.num_edges() > 0).then(|| same as f64 / g.num_edges() as f64);
    Ok(HomophilyMatrix { h, edge_homophily })
}

/// `Σ_{(u,v)∈E} ‖z_u/√(1+d_u) − z_v/√(1+d_v)‖² / ‖Z‖²_F`.
pub fn dirichlet_energy(z: &Matrix, g: &UndirectedGraph) -> Result<f64> {
    if z.nrows() != g.n() {
        return Err(Error::Shape {
            op: "dirichlet_energy",
            lhs: z.dim(),
            rhs: (g.n(), z.ncols()),
        });
    }
    let norm: f64 = z.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(Error::Degenerate {
            op: "dirichlet_energy",
            detail: "all-zero embeddings".into(),
        });
    }
    let scale: Vec<f64> = (0..g.n()).map(|i| 1.0 / ((1 + g.degree(i)) as f64).sqrt()).collect();
    let mut total = 0.0;
    for &(u, v) in g.edges() {
        total += z
            .row(u)
            .iter()
            .zip(z.row(v))
            .map(|(a, b)| {
                let d = a * scale[u] - b * scale[v];
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / norm)
}

/// Plain CSV of a matrix, optionally with a header row.
pub fn write_matrix_csv(m: &Matrix, header: Option<&[String]>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(out, "{}", h.join(",")).map_err(io)?;
    }
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(",")).map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_erdos_renyi, Splits};
    use ndarray::array;
    use proptest::prelude::*;

    fn path(n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|i| (i - 1, i)).collect()
    }

    #[test]
    fn series_and_parallel_examples() {
        assert!((effective_resistance(2, &[(0, 1)], 0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((effective_resistance(3, &path(3), 0, 2).unwrap() - 2.0).abs() < 1e-12);
        let tri = [(0, 1), (1, 2), (0, 2)];
        assert!((effective_resistance(3, &tri, 0, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let rep = total_effective_resistance(3, &tri, None).unwrap();
        assert!((rep.r_tot - 2.0).abs() < 1e-12);
        assert!((total_effective_resistance(3, &path(3), None).unwrap().r_tot - 4.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_pairs_are_errors() {
        let e = [(0, 1), (2, 3)];
        assert!(matches!(
            effective_resistance(4, &e, 0, 3),
            Err(Error::Disconnected { components: 2, .. })
        ));
        assert!((effective_resistance(4, &e, 2, 3).unwrap() - 1.0).abs() < 1e-12);
        assert!(total_effective_resistance(4, &e, None).is_err());
    }

    #[test]
    fn heatmap_base_cell_and_monotonicity() {
        let g = UndirectedGraph::from_edges(3, &path(3)).unwrap();
        let hm = resistance_heatmap(&g, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert!((hm.r_tot[[0, 0]] - 4.0).abs() < 1e-9);
        assert!(hm.is_monotone(1e-9));
        assert!(hm.r_tot[[2, 2]] < hm.r_tot[[0, 0]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        hm.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "local\\global,0,1,2");
        let base: f64 = lines.next().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!((base - 4.0).abs() < 1e-9);
    }

    #[test]
    fn homophily_examples() {
        let f = Matrix::zeros((4, 1));
        let labels = vec![Some(0), Some(0), Some(1), Some(1)];
        let within = UndirectedGraph::new(
            4,
            &[(0, 1), (2, 3)],
            f.clone(),
            labels.clone(),
            Some(2),
            Splits::default(),
            true,
        )
        .unwrap();
        let hm = homophily_matrix(&within).unwrap();
        assert_eq!(hm.h, Matrix::eye(2));
        assert_eq!(hm.edge_homophily, Some(1.0));
        let across = UndirectedGraph::new(
            4,
            &[(0, 2), (1, 3), (0, 3)],
            f.clone(),
            labels,
            Some(2),
            Splits::default(),
            true,
        )
        .unwrap();
        let hm = homophily_matrix(&across).unwrap();
        assert_eq!(hm.h, array![[0.0, 1.0], [1.0, 0.0]]);
        let unl = UndirectedGraph::new(4, &[], f, vec![None; 4], Some(2), Splits::default(), true).unwrap();
        assert!(homophily_matrix(&unl).is_err());
    }

    #[test]
    fn dirichlet_examples() {
        let cycle = UndirectedGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let constant = Matrix::from_elem((4, 2), 0.7);
        assert!(dirichlet_energy(&constant, &cycle).unwrap().abs() < 1e-15);
        let empty = UndirectedGraph::from_edges(3, &[]).unwrap();
        assert_eq!(dirichlet_energy(&Matrix::ones((3, 1)), &empty).unwrap(), 0.0);
        let z = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0], [0.5, 0.5]];
        let a = dirichlet_energy(&z, &cycle).unwrap();
        assert!((a - dirichlet_energy(&(2.0 * &z), &cycle).unwrap()).abs() < 1e-12);
        assert!(dirichlet_energy(&Matrix::zeros((4, 2)), &cycle).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn solve_and_pseudoinverse_agree(n in 3usize..40, seed in 0u64..1000) {
            let g = gen_erdos_renyi(n, 0.3, seed).unwrap();
            prop_assume!(g.components().0 == 1);
            let rep = graph_resistance(&g).unwrap();
            for u in 0..n.min(6) {
                for v in u + 1..n.min(6) {
                    let r = effective_resistance(n, g.edges(), u, v).unwrap();
                    prop_assert!((r - rep.pairwise[[u, v]]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn adding_an_edge_never_increases_total(n in 3usize..15, seed in 0u64..1000, a in 0usize..15, b in 0usize..15) {
            let g = gen_erdos_renyi(n, 0.4, seed).unwrap();
            prop_assume!(g.components().0 == 1);
            let (a, b) = (a % n, b % n);
            prop_assume!(a != b && !g.neighbors(a).contains(&b));
            let mut e = g.edges().to_vec();
            e.push((a, b));
            let before = graph_resistance(&g).unwrap().r_tot;
            let after = total_effective_resistance(n, &e, None).unwrap().r_tot;
            prop_assert!(after <= before + 1e-9);
        }
    }
}
