//! Encoder, cluster message passing layers and readout, plus the two
//! baselines (feature-only MLP and plain neighbourhood-mean aggregation).

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dc::{dc_msgpassing, DcParams, LayerConfig};
use crate::error::{Error, Result};
use crate::graph::{BipartiteClusterGraph, UndirectedGraph};
use crate::losses::Similarity;
use crate::tensor::{Matrix, SparseMatrix, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    DcGnn,
    /// Encoder and per-layer `tanh(Z W)`, no graph.
    Mlp,
    /// Per-layer `tanh(Â Z W)` with `Â` the row-normalised ego adjacency.
    MeanAggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub architecture: Architecture,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Dropout on the encoder output, training only.
    pub dropout: f64,
    pub hidden_channels: usize,
    pub layers: usize,
    pub encoder_layers: usize,
    pub omega1: f64,
    pub omega2: f64,
    pub n_global: usize,
    pub n_local: usize,
    pub similarity: Similarity,
    pub layer: LayerConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            architecture: Architecture::DcGnn,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            dropout: 0.2,
            hidden_channels: 32,
            layers: 2,
            encoder_layers: 1,
            omega1: 0.01,
            omega2: 0.0,
            n_global: 4,
            n_local: 2,
            similarity: Similarity::Cosine,
            layer: LayerConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        if self.hidden_channels == 0 || self.layers == 0 {
            return bad("hidden_channels and layers must be ≥ 1".into());
        }
        if !(1..=2).contains(&self.encoder_layers) {
            return bad(format!("encoder_layers must be 1 or 2, got {}", self.encoder_layers));
        }
        if !(self.omega1 >= 0.0) || !(self.omega2 >= 0.0) {
            return bad("omega1 and omega2 must be ≥ 0".into());
        }
        if classes == 0 {
            return bad("graph has no classes".into());
        }
        if self.architecture == Architecture::DcGnn {
            if self.n_global == 0 || self.n_local == 0 {
                return bad("n_global and n_local must be ≥ 1".into());
            }
            if self.omega2 > 0.0 && (classes < 2 || !self.n_global.is_multiple_of(classes)) {
                return bad(format!(
                    "similarity loss needs n_global ({}) to be a multiple of the class count ({classes})",
                    self.n_global
                ));
            }
            self.layer.validate()?;
        }
        Ok(())
    }

    /// Whether the model carries one `d × d` weight per layer.
    fn has_layer_weights(&self) -> bool {
        match self.architecture {
            Architecture::DcGnn => self.layer.use_message_transform,
            Architecture::Mlp | Architecture::MeanAggregation => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: uniform((fan_in, fan_out), a, rng),
            b: Matrix::zeros((1, fan_out)),
        }
    }
}

fn uniform(shape: (usize, usize), a: f64, rng: &mut dyn RngCore) -> Matrix {
    Matrix::from_shape_simple_fn(shape, || rng.random_range(-a..=a))
}

/// All trainable tensors. `c_global` exists only for the cluster model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    pub c_global: Option<Matrix>,
    pub layer_weights: Vec<Matrix>,
    pub readout: Linear,
}

impl ModelParams {
    pub fn init(input_dim: usize, classes: usize, hp: &Hyperparams, rng: &mut dyn RngCore) -> Self {
        let d = hp.hidden_channels;
        let mut encoder = vec![Linear::glorot(input_dim, d, rng)];
        if hp.encoder_layers == 2 {
            encoder.push(Linear::glorot(d, d, rng));
        }
        let c_global =
            (hp.architecture == Architecture::DcGnn).then(|| uniform((hp.n_global, d), 1.0 / (d as f64).sqrt(), rng));
        let layer_weights = if hp.has_layer_weights() {
            (0..hp.layers).map(|_| Linear::glorot(d, d, rng).w).collect()
        } else {
            Vec::new()
        };
        let readout = Linear::glorot(d, classes, rng);
        Self {
            encoder,
            c_global,
            layer_weights,
            readout,
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, lin) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{k}.w"), &lin.w));
            out.push((format!("encoder.{k}.b"), &lin.b));
        }
        if let Some(c) = &self.c_global {
            out.push(("c_global".into(), c));
        }
        for (k, w) in self.layer_weights.iter().enumerate() {
            out.push((format!("layer.{k}.w"), w));
        }
        out.push(("readout.w".into(), &self.readout.w));
        out.push(("readout.b".into(), &self.readout.b));
        out
    }

    /// Mutable views in the order of [`ModelParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for lin in &mut self.encoder {
            out.push(&mut lin.w);
            out.push(&mut lin.b);
        }
        if let Some(c) = &mut self.c_global {
            out.push(c);
        }
        out.extend(self.layer_weights.iter_mut());
        out.push(&mut self.readout.w);
        out.push(&mut self.readout.b);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named().iter().map(|(_, m)| m.dim()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.readout.w.ncols()
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn register(&self, tape: &Tape) -> Registered {
        let leaf = |m: &Matrix| tape.param(m.clone());
        Registered {
            encoder: self.encoder.iter().map(|l| (leaf(&l.w), leaf(&l.b))).collect(),
            c_global: self.c_global.as_ref().map(leaf),
            layer_weights: self.layer_weights.iter().map(leaf).collect(),
            readout: (leaf(&self.readout.w), leaf(&self.readout.b)),
        }
    }
}

/// Tape handles of a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Registered {
    pub encoder: Vec<(Tensor, Tensor)>,
    pub c_global: Option<Tensor>,
    pub layer_weights: Vec<Tensor>,
    pub readout: (Tensor, Tensor),
}

impl Registered {
    pub fn all(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        out.extend(self.c_global);
        out.extend(self.layer_weights.iter().copied());
        out.push(self.readout.0);
        out.push(self.readout.1);
        out
    }
}

/// Per-graph structures the forward pass needs, built once.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub features: Matrix,
    pub bip: Option<BipartiteClusterGraph>,
    pub mean_op: Option<Arc<SparseMatrix>>,
}

impl GraphContext {
    pub fn new(g: &UndirectedGraph, hp: &Hyperparams) -> Result<Self> {
        let (bip, mean_op) = match hp.architecture {
            Architecture::DcGnn => (Some(BipartiteClusterGraph::build(g, hp.n_global, hp.n_local)?), None),
            Architecture::Mlp => (None, None),
            Architecture::MeanAggregation => (None, Some(Arc::new(mean_operator(g)?))),
        };
        Ok(Self {
            features: g.features().clone(),
            bip,
            mean_op,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }
}

fn mean_operator(g: &UndirectedGraph) -> Result<SparseMatrix> {
    let mut t = Vec::new();
    for i in 0..g.n() {
        let w = 1.0 / (g.degree(i) + 1) as f64;
        t.push((i, i, w));
        t.extend(g.neighbors(i).iter().map(|&u| (i, u, w)));
    }
    SparseMatrix::from_triplets(g.n(), g.n(), &t)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Final node embeddings, before the readout.
    pub z: Tensor,
    /// Final-layer global cluster embeddings (cluster model only).
    pub c_global: Option<Tensor>,
}

/// Runs the model. Passing an RNG selects training mode (dropout active);
/// without one the pass is deterministic.
pub fn forward<'r>(
    tape: &Tape,
    reg: &Registered,
    ctx: &GraphContext,
    hp: &Hyperparams,
    mut rng: Option<&mut (dyn RngCore + 'r)>,
) -> Result<ForwardOutput> {
    let x = tape.constant(ctx.features.clone());
    let mut h = x;
    for (k, &(w, b)) in reg.encoder.iter().enumerate() {
        if k > 0 {
            h = tape.relu(h);
        }
        h = tape.add_row(tape.matmul(h, w)?, b)?;
    }
    if hp.dropout > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            h = tape.dropout(h, hp.dropout, r)?;
        }
    }
    let (z, c_global) = match hp.architecture {
        Architecture::DcGnn => {
            let bip = ctx.bip.as_ref().ok_or_else(|| missing("bipartite cluster graph"))?;
            let c = reg.c_global.ok_or_else(|| missing("global cluster table"))?;
            let params = DcParams {
                c_global: c,
                transforms: reg.layer_weights.clone(),
            };
            let out = dc_msgpassing(tape, h, bip, &hp.layer, hp.layers, &params, false, rng)?;
            (out.z, Some(out.c_global))
        }
        Architecture::Mlp => {
            let mut z = h;
            for &w in &reg.layer_weights {
                z = tape.tanh(tape.matmul(z, w)?);
            }
            (z, None)
        }
        Architecture::MeanAggregation => {
            let op = ctx
                .mean_op
                .as_ref()
                .ok_or_else(|| missing("mean aggregation operator"))?;
            let mut z = h;
            for &w in &reg.layer_weights {
                z = tape.tanh(tape.matmul(tape.spmm(op, z)?, w)?);
            }
            (z, None)
        }
    };
    let (w, b) = reg.readout;
    let logits = tape.add_row(tape.matmul(z, w)?, b)?;
    Ok(ForwardOutput { logits, z, c_global })
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("model context lacks a {what} for this architecture"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_hetero_sbm, SbmParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(arch: Architecture) -> (UndirectedGraph, Hyperparams, ModelParams) {
        let g = gen_hetero_sbm(&SbmParams::new(12, 2, 0.1, 0.6, 0.3), 3).unwrap();
        let hp = Hyperparams {
            architecture: arch,
            hidden_channels: 5,
            dropout: 0.5,
            ..Hyperparams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(g.feature_dim(), 2, &hp, &mut rng);
        (g, hp, p)
    }

    #[test]
    fn shapes_and_eval_determinism() {
        for arch in [Architecture::DcGnn, Architecture::Mlp, Architecture::MeanAggregation] {
            let (g, hp, p) = setup(arch);
            let ctx = GraphContext::new(&g, &hp).unwrap();
            let run = || {
                let tape = Tape::no_grad();
                let reg = p.register(&tape);
                let out = forward(&tape, &reg, &ctx, &hp, None).unwrap();
                assert_eq!(out.logits.shape(), (12, 2));
                tape.value(out.logits).as_ref().clone()
            };
            assert_eq!(run(), run());
            assert_eq!(p.named().len(), p.shapes().len());
        }
    }

    #[test]
    fn zero_readout_gives_zero_logits() {
        let (g, hp, mut p) = setup(Architecture::DcGnn);
        p.readout.w.fill(0.0);
        let ctx = GraphContext::new(&g, &hp).unwrap();
        let tape = Tape::no_grad();
        let reg = p.register(&tape);
        let out = forward(&tape, &reg, &ctx, &hp, None).unwrap();
        assert!(tape.value(out.logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let (g, hp, p) = setup(Architecture::Mlp);
        let ctx = GraphContext::new(&g, &hp).unwrap();
        let tape = Tape::no_grad();
        let reg = p.register(&tape);
        let eval = forward(&tape, &reg, &ctx, &hp, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = forward(&tape, &reg, &ctx, &hp, Some(&mut rng)).unwrap();
        assert_ne!(*tape.value(eval.logits), *tape.value(train.logits));
    }

    #[test]
    fn parameter_layout_per_architecture() {
        let (_, _, p) = setup(Architecture::DcGnn);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["encoder.0.w", "encoder.0.b", "c_global", "readout.w", "readout.b"]
        );
        let (_, _, p) = setup(Architecture::MeanAggregation);
        assert!(p.c_global.is_none());
        assert_eq!(p.layer_weights.len(), 2);
    }

    #[test]
    fn validation() {
        let hp = Hyperparams {
            omega2: 1.0,
            n_global: 3,
            ..Hyperparams::default()
        };
        assert!(hp.validate(2).is_err());
        assert!(Hyperparams {
            epochs: 0,
            ..Hyperparams::default()
        }
        .validate(2)
        .is_err());
        assert!(Hyperparams::default().validate(2).is_ok());
    }
}
