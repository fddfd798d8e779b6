//! Training loop, evaluation metrics, gradient check and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Split, Splits, UndirectedGraph};
use crate::losses::{l_ortho, l_sim, l_train};
use crate::model::{forward, Architecture, ForwardOutput, GraphContext, Hyperparams, ModelParams};
use crate::tensor::{max_rel_error, Matrix, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub ortho: f64,
    pub sim: f64,
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub ortho: f64,
    pub sim: f64,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Present for two-class tasks.
    pub roc_auc: Option<f64>,
    pub ce: f64,
}

impl Metrics {
    /// The selection metric: ROC AUC for binary tasks, accuracy otherwise.
    pub fn headline(&self) -> f64 {
        self.roc_auc.unwrap_or(self.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// `ce + ω₁·l_ortho + ω₂·l_sim` over the given rows. The regularisers act on
/// the final-layer global clusters and are skipped for the baselines.
pub fn training_loss(
    tape: &Tape,
    out: &ForwardOutput,
    rows: &[usize],
    labels: &[usize],
    classes: usize,
    hp: &Hyperparams,
) -> Result<(Tensor, LossParts)> {
    let ce = tape.cross_entropy(out.logits, labels, rows)?;
    let zero = || tape.constant(Matrix::zeros((1, 1)));
    let (ortho, sim) = match out.c_global {
        Some(c) if hp.architecture == Architecture::DcGnn => {
            let ortho = if hp.omega1 > 0.0 { l_ortho(tape, c)? } else { zero() };
            let sim = if hp.omega2 > 0.0 {
                l_sim(tape, out.z, c, labels, rows, classes, hp.similarity)?
            } else {
                zero()
            };
            (ortho, sim)
        }
        _ => (zero(), zero()),
    };
    let total = l_train(tape, ce, ortho, sim, hp.omega1, hp.omega2)?;
    let parts = LossParts {
        total: tape.scalar(total),
        ce: tape.scalar(ce),
        ortho: tape.scalar(ortho),
        sim: tape.scalar(sim),
    };
    Ok((total, parts))
}

/// Rank-based area under the ROC curve; tied scores share their mean rank.
/// `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "roc_auc",
            detail: "NaN score".into(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mean_rank;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q)))
}

/// Accuracy, binary AUC (score = logit₁ − logit₀) and mean cross-entropy of
/// `logits` on `rows`.
pub fn metrics_from_logits(logits: &Matrix, rows: &[usize], labels: &[usize]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut correct = 0usize;
    let mut ce = 0.0;
    for (&r, &y) in rows.iter().zip(labels) {
        let row = logits.row(r);
        let pred = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (k, &v)| if v > best.1 { (k, v) } else { best },
            )
            .0;
        correct += usize::from(pred == y);
        ce += crate::tensor::log_sum_exp(&row.to_vec()) - row[y];
    }
    let roc_auc = if logits.ncols() == 2 {
        let scores: Vec<f64> = rows.iter().map(|&r| logits[[r, 1]] - logits[[r, 0]]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        roc_auc(&scores, &pos)?
    } else {
        None
    };
    Ok(Metrics {
        accuracy: correct as f64 / rows.len() as f64,
        roc_auc,
        ce: ce / rows.len() as f64,
    })
}

/// Deterministic logits for every node.
pub fn predict(params: &ModelParams, ctx: &GraphContext, hp: &Hyperparams) -> Result<Matrix> {
    let tape = Tape::no_grad();
    let reg = params.register(&tape);
    let out = forward(&tape, &reg, ctx, hp, None)?;
    Ok(tape.value(out.logits).as_ref().clone())
}

pub fn evaluate(
    params: &ModelParams,
    graph: &UndirectedGraph,
    ctx: &GraphContext,
    hp: &Hyperparams,
    split: Split,
) -> Result<Metrics> {
    let rows = graph.splits().get(split);
    let labels = graph.labels_of(rows)?;
    metrics_from_logits(&predict(params, ctx, hp)?, rows, &labels)
}

fn check_finite(parts: &LossParts, epoch: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "non-finite training loss at epoch {epoch} (ce {}, ortho {}, sim {})",
            parts.ce, parts.ortho, parts.sim
        )))
    }
}

/// After the first update the inputs are unchanged, so numeric failures in
/// later passes come from the parameters.
fn after_update<T>(r: Result<T>, epoch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Domain { .. } | Error::Degenerate { .. } if epoch > 1 => {
            Error::Divergence(format!("epoch {epoch}: {e}"))
        }
        e => e,
    })
}

fn step_params(opt: &mut crate::optim::Adam, params: &mut ModelParams, grads: Vec<Matrix>, epoch: usize) -> Result<()> {
    opt.step(&mut params.values_mut(), &grads)?;
    if let Some((name, _)) = params
        .named()
        .into_iter()
        .find(|(_, m)| m.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Divergence(format!(
            "parameter {name} became non-finite at epoch {epoch}"
        )));
    }
    Ok(())
}

/// Higher selection metric wins; ties go to the lower cross-entropy.
fn keep_best(best: &mut Option<(Metrics, usize, ModelParams)>, m: &Metrics, epoch: usize, params: &ModelParams) {
    let better = best
        .as_ref()
        .is_none_or(|(b, _, _)| m.headline() > b.headline() || (m.headline() == b.headline() && m.ce < b.ce));
    if better {
        *best = Some((m.clone(), epoch, params.clone()));
    }
}

fn adam_for(params: &ModelParams, hp: &Hyperparams) -> crate::optim::Adam {
    crate::optim::Adam::new(crate::optim::AdamConfig::new(hp.lr, hp.weight_decay), &params.shapes())
}

/// Full-graph training on the train split with best-validation selection
/// (validation AUC for two classes, accuracy otherwise; the train split
/// stands in when there is no validation split).
pub fn train(graph: &UndirectedGraph, hp: &Hyperparams, seed: u64) -> Result<TrainOutcome> {
    let classes = graph.num_classes();
    hp.validate(classes)?;
    let train_rows = graph.splits().train.clone();
    if train_rows.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let train_labels = graph.labels_of(&train_rows)?;
    let select_split = if graph.splits().valid.is_empty() {
        Split::Train
    } else {
        Split::Valid
    };
    let ctx = GraphContext::new(graph, hp)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(graph.feature_dim(), classes, hp, &mut rng);
    let mut opt = adam_for(&params, hp);
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<(Metrics, usize, ModelParams)> = None;

    for epoch in 1..=hp.epochs {
        let tape = Tape::new();
        let reg = params.register(&tape);
        let out = after_update(
            forward(&tape, &reg, &ctx, hp, Some(&mut rng as &mut dyn RngCore)),
            epoch,
        )?;
        let (loss, parts) = training_loss(&tape, &out, &train_rows, &train_labels, classes, hp)?;
        check_finite(&parts, epoch)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Matrix> = reg.all().iter().map(|t| grads.get_or_zeros(t)).collect();
        step_params(&mut opt, &mut params, g, epoch)?;

        let logits = after_update(predict(&params, &ctx, hp), epoch + 1)?;
        let metrics = |split: Split| -> Result<Option<Metrics>> {
            let rows = graph.splits().get(split);
            if rows.is_empty() {
                return Ok(None);
            }
            metrics_from_logits(&logits, rows, &graph.labels_of(rows)?).map(Some)
        };
        let select = metrics(select_split)?.expect("selection split is non-empty");
        keep_best(&mut best, &select, epoch, &params);
        history.push(EpochMetrics {
            epoch,
            train_loss: parts.total,
            ce: parts.ce,
            ortho: parts.ortho,
            sim: parts.sim,
            val_metric: metrics(Split::Valid)?.map(|m| m.headline()),
            test_metric: metrics(Split::Test)?.map(|m| m.headline()),
        });
    }
    let (_, best_epoch, params) = best.expect("epochs ≥ 1");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

/// Accuracy and cross-entropy over the labeled nodes of a collection of
/// graphs (no AUC: the selection metric is accuracy here).
pub fn evaluate_graphs(
    params: &ModelParams,
    graphs: &[UndirectedGraph],
    contexts: &[GraphContext],
    hp: &Hyperparams,
) -> Result<Metrics> {
    let (mut correct, mut ce) = (0.0, 0.0);
    let mut total = 0usize;
    for (g, ctx) in graphs.iter().zip(contexts) {
        let rows = g.labeled_nodes();
        if rows.is_empty() {
            continue;
        }
        let m = metrics_from_logits(&predict(params, ctx, hp)?, &rows, &g.labels_of(&rows)?)?;
        correct += m.accuracy * rows.len() as f64;
        ce += m.ce * rows.len() as f64;
        total += rows.len();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no labeled nodes to evaluate".into()));
    }
    Ok(Metrics {
        accuracy: correct / total as f64,
        roc_auc: None,
        ce: ce / total as f64,
    })
}

/// Graph-collection training: every labeled node of every training graph is
/// a target, graphs are processed independently and averaged in shuffled
/// batches. Selection by accuracy on `valid` (or on `train` when empty).
pub fn train_on_graphs(
    train: &[UndirectedGraph],
    valid: &[UndirectedGraph],
    hp: &Hyperparams,
    seed: u64,
    batch_size: usize,
) -> Result<TrainOutcome> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training graphs".into()))?;
    let (classes, dim) = (first.num_classes(), first.feature_dim());
    hp.validate(classes)?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    if let Some(g) = train
        .iter()
        .chain(valid)
        .find(|g| g.num_classes() != classes || g.feature_dim() != dim)
    {
        return Err(Error::InvalidGraph(format!(
            "graph with {} classes and {} features among graphs with {classes} and {dim}",
            g.num_classes(),
            g.feature_dim()
        )));
    }
    let build =
        |gs: &[UndirectedGraph]| -> Result<Vec<GraphContext>> { gs.iter().map(|g| GraphContext::new(g, hp)).collect() };
    let train_ctx = build(train)?;
    let valid_ctx = build(valid)?;
    let targets: Vec<(Vec<usize>, Vec<usize>)> = train
        .iter()
        .map(|g| {
            let rows = g.labeled_nodes();
            let labels = g.labels_of(&rows)?;
            Ok((rows, labels))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(dim, classes, hp, &mut rng);
    let mut opt = adam_for(&params, hp);
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<(Metrics, usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train.len()).filter(|&k| !targets[k].0.is_empty()).collect();
    if order.is_empty() {
        return Err(Error::InvalidArgument("training graphs carry no labels".into()));
    }

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let batches = order.chunks(batch_size);
        let n_batches = batches.len();
        for batch in batches {
            let tape = Tape::new();
            let reg = params.register(&tape);
            let mut total: Option<Tensor> = None;
            for &k in batch {
                let out = forward(&tape, &reg, &train_ctx[k], hp, Some(&mut rng as &mut dyn RngCore));
                let out = after_update(out, epoch)?;
                let (rows, labels) = &targets[k];
                let (loss, parts) = training_loss(&tape, &out, rows, labels, classes, hp)?;
                check_finite(&parts, epoch)?;
                let w = 1.0 / (batch.len() * n_batches) as f64;
                sums.total += w * parts.total;
                sums.ce += w * parts.ce;
                sums.ortho += w * parts.ortho;
                sums.sim += w * parts.sim;
                total = Some(match total {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let grads = tape.backward(loss)?;
            let g: Vec<Matrix> = reg.all().iter().map(|t| grads.get_or_zeros(t)).collect();
            step_params(&mut opt, &mut params, g, epoch)?;
        }
        let val = if valid.is_empty() {
            evaluate_graphs(&params, train, &train_ctx, hp)
        } else {
            evaluate_graphs(&params, valid, &valid_ctx, hp)
        };
        let val = after_update(val, epoch + 1)?;
        keep_best(&mut best, &val, epoch, &params);
        history.push(EpochMetrics {
            epoch,
            train_loss: sums.total,
            ce: sums.ce,
            ortho: sums.ortho,
            sim: sums.sim,
            val_metric: Some(val.accuracy),
            test_metric: None,
        });
    }
    let (_, best_epoch, params) = best.expect("epochs ≥ 1");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

pub fn write_history_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in history {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the full training loss (train split,
/// evaluation mode) with central differences, tensor by tensor. Relative
/// errors use `max(|a|, |b|, 1e-6)` as denominator.
pub fn gradcheck(
    graph: &UndirectedGraph,
    params: &ModelParams,
    hp: &Hyperparams,
    step: f64,
) -> Result<GradcheckReport> {
    let classes = graph.num_classes();
    hp.validate(classes)?;
    let ctx = GraphContext::new(graph, hp)?;
    let rows = graph.splits().train.clone();
    let labels = graph.labels_of(&rows)?;
    let loss_at = |p: &ModelParams, tape: &Tape| -> Result<(Tensor, crate::model::Registered)> {
        let reg = p.register(tape);
        let out = forward(tape, &reg, &ctx, hp, None)?;
        Ok((training_loss(tape, &out, &rows, &labels, classes, hp)?.0, reg))
    };

    let tape = Tape::new();
    let (loss, reg) = loss_at(params, &tape)?;
    let grads = tape.backward(loss)?;
    let names = params.named();
    let mut entries = Vec::with_capacity(names.len());
    for (k, (name, value)) in names.iter().enumerate() {
        let analytic = grads.get_or_zeros(&reg.all()[k]);
        let numeric = crate::tensor::finite_diff_grad(
            |m| {
                let mut p = params.clone();
                *p.values_mut()[k] = m.clone();
                let t = Tape::no_grad();
                let (l, _) = loss_at(&p, &t)?;
                Ok(t.scalar(l))
            },
            value,
            step,
        )?;
        entries.push(GradcheckEntry {
            name: name.clone(),
            max_rel_error: max_rel_error(&analytic, &numeric, 1e-6),
            max_abs_grad: analytic.iter().fold(0.0, |a, v| a.max(v.abs())),
        });
    }
    Ok(GradcheckReport {
        loss: tape.scalar(loss),
        entries,
    })
}

/// The small configuration used for gradient checks: 6 nodes, d = 3, two
/// layers with message transforms and both regularisers active.
pub fn gradcheck_fixture(seed: u64) -> Result<(UndirectedGraph, ModelParams, Hyperparams)> {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Matrix::from_shape_simple_fn((6, 4), || rand::Rng::random_range(&mut rng, -1.0..1.0));
    let labels = (0..6).map(|i| Some(i % 2)).collect();
    let splits = Splits {
        train: vec![0, 1, 2, 3],
        valid: vec![4],
        test: vec![5],
    };
    let g = UndirectedGraph::new(6, &edges, features, labels, Some(2), splits, true)?;
    let hp = Hyperparams {
        hidden_channels: 3,
        layers: 2,
        dropout: 0.0,
        omega1: 0.5,
        omega2: 0.5,
        n_global: 2,
        n_local: 2,
        layer: crate::dc::LayerConfig {
            use_message_transform: true,
            ..Default::default()
        },
        ..Hyperparams::default()
    };
    let params = ModelParams::init(4, 2, &hp, &mut rng);
    Ok((g, params, hp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// JSON checkpoint: hyperparameters plus every tensor with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hyperparams: Hyperparams,
    pub input_dim: usize,
    pub classes: usize,
    pub tensors: Vec<TensorDump>,
}

const CHECKPOINT_FORMAT: &str = "dcgnn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: &ModelParams, hp: &Hyperparams) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, m)| TensorDump {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyperparams: hp.clone(),
            input_dim: params.input_dim(),
            classes: params.classes(),
            tensors,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(self.input_dim, self.classes, &self.hyperparams, &mut rng);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, the model needs {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), dump) in params.values_mut().into_iter().zip(&names).zip(&self.tensors) {
            if &dump.name != name || slot.dim() != (dump.rows, dump.cols) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor {} ({}×{}) does not match {name} {:?}",
                    dump.name,
                    dump.rows,
                    dump.cols,
                    slot.dim()
                )));
            }
            *slot = Matrix::from_shape_vec((dump.rows, dump.cols), dump.data.clone())
                .map_err(|e| Error::InvalidArgument(format!("tensor {name}: {e}")))?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_hetero_sbm, SbmParams};

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), Some(0.0));
        assert_eq!(roc_auc(&[0.5; 4], &pos).unwrap(), Some(0.5));
        // one tie across classes: 3 of 4 pairs ordered, one half
        assert_eq!(roc_auc(&[0.1, 0.5, 0.5, 0.9], &pos).unwrap(), Some(0.875));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
    }

    #[test]
    fn accuracy_from_logits() {
        let logits = ndarray::array![[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]];
        let m = metrics_from_logits(&logits, &[0, 1, 2], &[0, 1, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.roc_auc, Some(1.0));
        assert!(metrics_from_logits(&logits, &[], &[]).is_err());
    }

    fn separable() -> UndirectedGraph {
        gen_hetero_sbm(&SbmParams::new(40, 2, 0.3, 0.0, 0.1), 5).unwrap()
    }

    #[test]
    fn separable_sbm_fits_training_split() {
        let g = separable();
        let hp = Hyperparams {
            epochs: 200,
            hidden_channels: 8,
            dropout: 0.0,
            ..Hyperparams::default()
        };
        let out = train(&g, &hp, 1).unwrap();
        let ctx = GraphContext::new(&g, &hp).unwrap();
        let m = evaluate(&out.params, &g, &ctx, &hp, Split::Train).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(out.history.len(), 200);
        let first = out.history[0].ce;
        assert!((first - 2f64.ln()).abs() < 0.35, "epoch-1 ce {first}");
    }

    #[test]
    fn zero_epochs_rejected_and_training_reproducible() {
        let g = separable();
        let hp = Hyperparams {
            epochs: 0,
            ..Hyperparams::default()
        };
        assert!(train(&g, &hp, 0).is_err());
        let hp = Hyperparams {
            epochs: 5,
            ..Hyperparams::default()
        };
        assert_eq!(train(&g, &hp, 9).unwrap().history, train(&g, &hp, 9).unwrap().history);
    }

    #[test]
    fn divergence_reported() {
        let g = separable();
        let hp = Hyperparams {
            epochs: 3,
            lr: 1e300,
            ..Hyperparams::default()
        };
        match train(&g, &hp, 0) {
            Err(Error::Divergence(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fixture_gradients_match_finite_differences() {
        let (g, params, hp) = gradcheck_fixture(0).unwrap();
        let report = gradcheck(&g, &params, &hp, 1e-5).unwrap();
        assert_eq!(report.entries.len(), params.named().len());
        for e in &report.entries {
            assert!(e.max_rel_error < 1e-3, "{}: {}", e.name, e.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, params, hp) = gradcheck_fixture(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(&params, &hp).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.hyperparams, hp);
        assert_eq!(back.params().unwrap(), params);
        let mut bad = back.clone();
        bad.tensors[0].rows += 1;
        assert!(bad.params().is_err());
    }

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![EpochMetrics {
            epoch: 1,
            train_loss: 0.5,
            ce: 0.5,
            ortho: 0.0,
            sim: 0.0,
            val_metric: Some(0.75),
            test_metric: None,
        }];
        write_history_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,train_loss,ce,ortho,sim,val_metric,test_metric"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.5,0.0,0.0,0.75,");
    }
}
