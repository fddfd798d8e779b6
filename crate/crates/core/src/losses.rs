//! Regularisers on the global cluster-nodes and the combined training loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tape, Tensor};

/// Similarity `Λ` used when scoring nodes against cluster-nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Cosine similarity, used as written in the loss.
    #[default]
    Cosine,
    /// `1 − cos`, so the loss falls as a node approaches its class clusters.
    CosineDistance,
}

/// `‖G/‖G‖_F − I/√|Ω|‖_F` with `G = C Cᵀ` the Gram matrix of the cluster rows.
pub fn l_ortho(tape: &Tape, c_global: Tensor) -> Result<Tensor> {
    let k = c_global.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("empty cluster table".into()));
    }
    let gram = tape.matmul(c_global, tape.transpose(c_global))?;
    let fro2 = tape.sum(tape.hadamard(gram, gram)?);
    if !(tape.scalar(fro2) > 0.0) {
        return Err(Error::Degenerate {
            op: "l_ortho",
            detail: "cluster Gram matrix is zero".into(),
        });
    }
    let inv_norm = tape.powf(fro2, -0.5)?;
    let normalized = tape.mul_scalar(gram, inv_norm)?;
    let target = tape.constant(ndarray::Array2::eye(k) / (k as f64).sqrt());
    let diff = tape.sub(normalized, target)?;
    let sq = tape.sum(tape.hadamard(diff, diff)?);
    // guarded square root: d√x/dx is unbounded at 0
    let sq = tape.add_scalar(sq, 1e-30);
    tape.powf(sq, 0.5)
}

/// Contrastive similarity loss over the nodes in `rows`: each node's best
/// similarity to its own class block of cluster-nodes against a soft
/// minimum over the other classes, averaged as `1/(|Ω|·|rows|)`.
///
/// Cluster-nodes are split into `classes` contiguous equal blocks.
pub fn l_sim(
    tape: &Tape,
    z: Tensor,
    c_global: Tensor,
    labels: &[usize],
    rows: &[usize],
    classes: usize,
    similarity: Similarity,
) -> Result<Tensor> {
    let k = c_global.rows();
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "similarity loss needs at least two classes".into(),
        ));
    }
    if !k.is_multiple_of(classes) {
        return Err(Error::InvalidArgument(format!(
            "{k} global cluster-nodes cannot be split evenly across {classes} classes"
        )));
    }
    if rows.is_empty() || labels.len() != rows.len() {
        return Err(Error::InvalidArgument("similarity loss needs labeled rows".into()));
    }
    let pick = Arc::new(SparseMatrix::gather(rows, z.rows())?);
    let zs = tape.row_l2_normalize(tape.spmm(&pick, z)?);
    let cs = tape.row_l2_normalize(c_global);
    let s = tape.matmul(zs, tape.transpose(cs))?;
    // the most similar cluster-node of each class block
    let mut best = tape.block_max(s, k / classes)?;
    if similarity == Similarity::CosineDistance {
        best = tape.add_scalar(tape.neg(best), 1.0);
    }
    let per_node = tape.contrast_rows(best, labels)?;
    Ok(tape.scale(tape.sum(per_node), 1.0 / (k * rows.len()) as f64))
}

/// `ce + ω₁·ortho + ω₂·sim`.
pub fn l_train(tape: &Tape, ce: Tensor, ortho: Tensor, sim: Tensor, omega1: f64, omega2: f64) -> Result<Tensor> {
    let a = tape.add(ce, tape.scale(ortho, omega1))?;
    tape.add(a, tape.scale(sim, omega2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error, Matrix};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ortho_value(c: Matrix) -> f64 {
        let tape = Tape::no_grad();
        let t = tape.constant(c);
        tape.scalar(l_ortho(&tape, t).unwrap())
    }

    /// Rows of a random orthonormal basis, by Gram–Schmidt.
    fn orthonormal(rng: &mut impl Rng, k: usize, d: usize) -> Matrix {
        let mut q = Matrix::zeros((k, d));
        let mut i = 0;
        while i < k {
            let mut v = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            for j in 0..i {
                let p = v.dot(&q.row(j));
                v.scaled_add(-p, &q.row(j));
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-6 {
                q.row_mut(i).assign(&(v / n));
                i += 1;
            }
        }
        q
    }

    #[test]
    fn ortho_examples() {
        assert!(ortho_value(Matrix::eye(3)) < 1e-12);
        let v = ortho_value(array![[1.0, 0.0], [1.0, 0.0]]);
        let expected = (2.0 * (0.5 - 1.0 / 2f64.sqrt()).powi(2) + 2.0 * 0.25).sqrt();
        assert!((v - expected).abs() < 1e-12 && (v - 0.7654).abs() < 1e-4);
        let c = array![[0.3, -1.2, 0.5], [2.0, 0.1, 0.0]];
        assert!((ortho_value(c.clone()) - ortho_value(2.0 * &c)).abs() < 1e-12);
        let tape = Tape::no_grad();
        let z = tape.constant(Matrix::zeros((2, 2)));
        assert!(l_ortho(&tape, z).is_err());
    }

    #[test]
    fn ortho_zero_iff_scaled_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = orthonormal(&mut rng, 3, 5);
            let s = rng.random_range(0.1..10.0);
            assert!(ortho_value(s * &q) < 1e-10);
            // unequal norms break it
            let mut r = q.clone();
            r.row_mut(0).mapv_inplace(|x| 2.0 * x);
            assert!(ortho_value(r) > 1e-3);
        }
    }

    #[test]
    fn sim_fixture() {
        let tape = Tape::no_grad();
        let z = tape.constant(array![[1.0, 0.0]]);
        let c = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = tape.scalar(l_sim(&tape, z, c, &[0], &[0], 2, Similarity::Cosine).unwrap());
        assert!((v - 0.5).abs() < 1e-12);
        assert!(l_sim(&tape, z, c, &[0], &[0], 1, Similarity::Cosine).is_err());
        let c3 = tape.constant(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!(l_sim(&tape, z, c3, &[0], &[0], 2, Similarity::Cosine).is_err());
    }

    #[test]
    fn sim_equal_similarities_and_max_selection() {
        // three classes with one cluster each, all at 60° from z
        let tape = Tape::no_grad();
        let s = 0.5f64;
        let z = tape.constant(array![[1.0, 0.0, 0.0]]);
        let r = (1.0 - s * s).sqrt();
        let c = tape.constant(array![[s, r, 0.0], [s, 0.0, r], [s, -r, 0.0]]);
        let v = tape.scalar(l_sim(&tape, z, c, &[1], &[0], 3, Similarity::Cosine).unwrap());
        let per_node = s + (2.0 * (-s).exp()).ln();
        assert!((v - per_node / 3.0).abs() < 1e-12);

        // adding a worse cluster to the own-class block leaves s_τ unchanged
        let base = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let worse = tape.constant(array![[1.0, 0.0], [-1.0, 0.2], [0.0, 1.0], [0.0, 1.0]]);
        let z = tape.constant(array![[1.0, 0.1]]);
        let a = tape.scalar(l_sim(&tape, z, base, &[0], &[0], 2, Similarity::Cosine).unwrap());
        let b = tape.scalar(l_sim(&tape, z, worse, &[0], &[0], 2, Similarity::Cosine).unwrap());
        // only the normaliser 1/|Ω| changed
        assert!((2.0 * a - 4.0 * b).abs() < 1e-12);
    }

    /// Directional derivative of the loss when the node rotates toward its
    /// best same-class cluster-node. The node and its class clusters lie in
    /// the first two coordinates and the other class sits on the third axis,
    /// so only the own-class term moves.
    fn directional(similarity: Similarity, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = |rng: &mut ChaCha8Rng| rng.random_range(0.0..std::f64::consts::TAU);
        let (a, b1, b2) = (angle(&mut rng), angle(&mut rng), angle(&mut rng));
        let r = rng.random_range(0.5..2.0);
        let z0 = array![[r * a.cos(), r * a.sin(), 0.0]];
        let c0 = array![
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 2.0],
            [b1.cos(), b1.sin(), 0.0],
            [3.0 * b2.cos(), 3.0 * b2.sin(), 0.0]
        ];
        let cos = |i: usize| (a - if i == 2 { b1 } else { b2 }).cos();
        let best = if cos(2) >= cos(3) { b1 } else { b2 };
        // tangent of the circle through z, turning toward the best cluster
        let sign = (best - a).sin().signum();
        let dir = array![-a.sin() * sign, a.cos() * sign, 0.0];
        let tape = Tape::new();
        let z = tape.param(z0);
        let c = tape.constant(c0);
        let loss = l_sim(&tape, z, c, &[1], &[0], 2, similarity).unwrap();
        let g = tape.backward(loss).unwrap().get_or_zeros(&z);
        g.row(0).dot(&dir)
    }

    #[test]
    fn moving_toward_own_class_lowers_distance_form_and_raises_cosine_form() {
        for seed in 0..50 {
            assert!(directional(Similarity::CosineDistance, seed) < 0.0);
            assert!(directional(Similarity::Cosine, seed) > 0.0);
        }
    }

    #[test]
    fn l_train_examples_and_linearity() {
        let tape = Tape::new();
        let (a, b, c) = (
            tape.param(array![[1.0]]),
            tape.param(array![[2.0]]),
            tape.param(array![[3.0]]),
        );
        let t = l_train(&tape, a, b, c, 0.1, 0.01).unwrap();
        assert!((tape.scalar(t) - 1.23).abs() < 1e-12);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.get_or_zeros(&b)[[0, 0]], 0.1);
        assert_eq!(g.get_or_zeros(&c)[[0, 0]], 0.01);
        let t0 = l_train(&tape, a, b, c, 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar(t0), 1.0);
    }

    #[test]
    fn regulariser_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c0 = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let z0 = Matrix::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 1];
        let rows = [0, 2, 4];
        let f = |c: &Matrix| -> crate::Result<f64> {
            let tape = Tape::no_grad();
            let ct = tape.constant(c.clone());
            let zt = tape.constant(z0.clone());
            let o = l_ortho(&tape, ct)?;
            let s = l_sim(&tape, zt, ct, &labels, &rows, 2, Similarity::Cosine)?;
            Ok(tape.scalar(o) + tape.scalar(s))
        };
        let tape = Tape::new();
        let c = tape.param(c0.clone());
        let z = tape.constant(z0.clone());
        let o = l_ortho(&tape, c).unwrap();
        let s = l_sim(&tape, z, c, &labels, &rows, 2, Similarity::Cosine).unwrap();
        let g = tape.backward(tape.add(o, s).unwrap()).unwrap().get_or_zeros(&c);
        let fd = finite_diff_grad(f, &c0, 1e-6).unwrap();
        assert!(max_rel_error(&g, &fd, 1e-8) < 1e-5);
    }
}
