use dcgnn::analysis::{effective_resistance, resistance_heatmap};
use dcgnn::dc::{dc_msgpassing, entropy_bound_for, DcParams, LayerConfig};
use dcgnn::graph::{gen_erdos_renyi, BipartiteClusterGraph, UndirectedGraph};
use dcgnn::model::{GraphContext, Hyperparams, ModelParams};
use dcgnn::sinkhorn::{round_to_feasible, sinkhorn_matrix, MarginalPair, SinkhornConfig};
use dcgnn::train::predict;
use dcgnn::{Matrix, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, r: usize, c: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn marginals_of(p: &Matrix) -> (Vec<f64>, Vec<f64>) {
    (
        p.rows().into_iter().map(|r| r.sum()).collect(),
        p.columns().into_iter().map(|c| c.sum()).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rounded_plans_are_exactly_feasible(seed in 0u64..10_000, n in 1usize..7, k in 1usize..7) {
        let m = random(seed, n, k).mapv(f64::abs);
        let marg = MarginalPair::uniform(n, k).unwrap();
        // a deliberately short run leaves the plan off the polytope
        let (p, ..) = sinkhorn_matrix(&m, &marg, &SinkhornConfig::new(5.0, 2)).unwrap();
        let q = round_to_feasible(&p, &marg).unwrap();
        let (r, c) = marginals_of(&q);
        prop_assert!(q.iter().all(|&x| x >= 0.0));
        prop_assert!(r.iter().zip(marg.u()).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert!(c.iter().zip(marg.v()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn adding_an_edge_never_raises_resistance(seed in 0u64..10_000) {
        let g = gen_erdos_renyi(9, 0.4, seed).unwrap();
        prop_assume!(g.components().0 == 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rng.random_range(0..9), rng.random_range(0..9));
        prop_assume!(a != b && !g.neighbors(a).contains(&b));
        let mut more = g.edges().to_vec();
        more.push((a.min(b), a.max(b)));
        for (u, v) in [(0, 8), (a, b), (1, 5)] {
            let before = effective_resistance(9, g.edges(), u, v).unwrap();
            let after = effective_resistance(9, &more, u, v).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn heatmap_is_monotone_on_random_connected_graphs(seed in 0u64..10_000) {
        let g = gen_erdos_renyi(7, 0.5, seed).unwrap();
        prop_assume!(g.components().0 == 1);
        let h = resistance_heatmap(&g, &[0, 1, 3], &[0, 2]).unwrap();
        prop_assert!(h.is_monotone(1e-12));
    }

    #[test]
    fn monitoring_layers_descend(seed in 0u64..10_000, alpha in 0.0f64..1.0, beta in 0.0f64..2.0) {
        let g = gen_erdos_renyi(10, 0.3, seed).unwrap();
        let bip = BipartiteClusterGraph::build(&g, 3, 2).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(random(seed, 10, 2));
        let params = DcParams { c_global: tape.constant(random(seed + 1, 3, 2)), transforms: vec![] };
        let cfg = LayerConfig::monitoring(alpha, beta, 2.0);
        let out = dc_msgpassing(&tape, x, &bip, &cfg, 6, &params, true, None).unwrap();
        let bound = entropy_bound_for(&bip, alpha, 2.0).unwrap();
        for w in out.trace.windows(2) {
            prop_assert!(w[1].total <= w[0].total + 1e-6);
        }
        prop_assert!(out.trace.iter().all(|o| o.total >= bound - 1e-12));
    }

    #[test]
    fn predictions_are_permutation_equivariant(seed in 0u64..10_000) {
        let mut g = gen_erdos_renyi(8, 0.4, seed).unwrap();
        g.set_features(random(seed, 8, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let hp = Hyperparams { hidden_channels: 4, ..Hyperparams::default() };
        let params = ModelParams::init(3, 2, &hp, &mut rng);
        let run = |g: &UndirectedGraph| predict(&params, &GraphContext::new(g, &hp).unwrap(), &hp).unwrap();
        let a = run(&g);
        let b = run(&g.permuted(&perm).unwrap());
        for (i, &pi) in perm.iter().enumerate() {
            prop_assert!((&a.row(i) - &b.row(pi)).iter().all(|d| d.abs() < 1e-9));
        }
    }
}
