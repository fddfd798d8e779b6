//! C ABI over the dcgnn library.
//!
//! Every fallible call returns a [`DcStatus`]; on failure the message is
//! available from [`dc_last_error`] on the same thread. Graphs and models are
//! opaque handles released with their `_free` function. Matrices are dense
//! row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dcgnn::analysis::{dirichlet_energy, effective_resistance, homophily_matrix, total_effective_resistance};
use dcgnn::graph::{load_graph_json, Splits, UndirectedGraph};
use dcgnn::model::{GraphContext, Hyperparams, ModelParams};
use dcgnn::sinkhorn::{sinkhorn_matrix, MarginalPair, SinkhornConfig};
use dcgnn::train::{predict, train, Checkpoint};
use dcgnn::{Error, Matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Disconnected = 4,
    Io = 5,
    Parse = 6,
    Divergence = 7,
    Degenerate = 8,
    TooLarge = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque graph handle.
pub struct DcGraph {
    graph: UndirectedGraph,
}

/// Opaque trained-model handle.
pub struct DcModel {
    params: ModelParams,
    hp: Hyperparams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Shape { .. } => DcStatus::ShapeMismatch,
        Error::Disconnected { .. } => DcStatus::Disconnected,
        Error::Io { .. } => DcStatus::Io,
        Error::Parse { .. } | Error::Json(_) => DcStatus::Parse,
        Error::Divergence(_) => DcStatus::Divergence,
        Error::Degenerate { .. } | Error::Domain { .. } => DcStatus::Degenerate,
        Error::TooLarge(_) => DcStatus::TooLarge,
        _ => DcStatus::InvalidArgument,
    }
}

struct Fail(DcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            DcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn graph_ref<'a>(g: *const DcGraph) -> Result<&'a DcGraph, Fail> {
    g.as_ref().ok_or_else(|| null("graph"))
}

unsafe fn c_str(s: *const c_char, what: &str) -> Result<String, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(DcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Matrix, Fail> {
    Matrix::from_shape_vec((rows, cols), data.to_vec()).map_err(|e| Fail(DcStatus::ShapeMismatch, e.to_string()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a graph from `m` edges given as `2m` node indices and an `n × dim`
/// feature matrix. `labels` (length `n`, negative = unlabeled) may be NULL.
/// Self-loops and duplicate edges are rejected.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_graph_new(
    n: usize,
    edges: *const usize,
    m: usize,
    features: *const f64,
    dim: usize,
    labels: *const i64,
    num_classes: usize,
    out_graph: *mut *mut DcGraph,
) -> DcStatus {
    guard(|| {
        let out_graph = out(out_graph, "out_graph")?;
        let flat = slice(edges, 2 * m, "edges")?;
        let pairs: Vec<(usize, usize)> = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let x = matrix(slice(features, n * dim, "features")?, n, dim)?;
        let labels: Vec<Option<usize>> = if labels.is_null() {
            vec![None; n]
        } else {
            slice(labels, n, "labels")?
                .iter()
                .map(|&y| usize::try_from(y).ok())
                .collect()
        };
        let classes = (num_classes > 0).then_some(num_classes);
        let graph = UndirectedGraph::new(n, &pairs, x, labels, classes, Splits::default(), true)?;
        *out_graph = Box::into_raw(Box::new(DcGraph { graph }));
        Ok(())
    })
}

/// Loads a graph stored as a JSON document (with labels and splits if present).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_graph_load_json(path: *const c_char, out_graph: *mut *mut DcGraph) -> DcStatus {
    guard(|| {
        let out_graph = out(out_graph, "out_graph")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let graph = load_graph_json(&path, false)?;
        *out_graph = Box::into_raw(Box::new(DcGraph { graph }));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_graph_free(graph: *mut DcGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node count, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_graph_num_nodes(graph: *const DcGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.n())
}

/// Edge count, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_graph_num_edges(graph: *const DcGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.num_edges())
}

/// Entropic coupling of a `rows × cols` cost matrix written to `out_plan`.
/// NULL marginals mean uniform. A positive `tolerance` runs to that
/// marginal residual with `iterations` as cap; otherwise exactly
/// `iterations` scalings are done. Residuals go to the optional out-params.
///
/// # Safety
/// Buffers must hold `rows·cols` (cost, plan), `rows` and `cols` values.
#[no_mangle]
pub unsafe extern "C" fn dc_sinkhorn(
    cost: *const f64,
    rows: usize,
    cols: usize,
    row_marginals: *const f64,
    col_marginals: *const f64,
    lambda: f64,
    iterations: usize,
    tolerance: f64,
    out_plan: *mut f64,
    out_row_residual: *mut f64,
    out_col_residual: *mut f64,
) -> DcStatus {
    guard(|| {
        let m = matrix(slice(cost, rows * cols, "cost")?, rows, cols)?;
        let plan = slice_mut(out_plan, rows * cols, "out_plan")?;
        let uniform = MarginalPair::uniform(rows, cols)?;
        let u = if row_marginals.is_null() {
            uniform.u().to_vec()
        } else {
            slice(row_marginals, rows, "row_marginals")?.to_vec()
        };
        let v = if col_marginals.is_null() {
            uniform.v().to_vec()
        } else {
            slice(col_marginals, cols, "col_marginals")?.to_vec()
        };
        let marg = MarginalPair::new(u, v)?;
        let cfg = if tolerance > 0.0 {
            SinkhornConfig::to_convergence(lambda, tolerance, iterations)
        } else {
            SinkhornConfig::new(lambda, iterations)
        };
        let (p, row_err, col_err) = sinkhorn_matrix(&m, &marg, &cfg)?;
        for (dst, src) in plan.iter_mut().zip(p.iter()) {
            *dst = *src;
        }
        if let Some(r) = out_row_residual.as_mut() {
            *r = row_err;
        }
        if let Some(c) = out_col_residual.as_mut() {
            *c = col_err;
        }
        Ok(())
    })
}

/// Effective resistance between nodes `u` and `v`.
///
/// # Safety
/// `graph` must be a live handle; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_effective_resistance(
    graph: *const DcGraph,
    u: usize,
    v: usize,
    out_value: *mut f64,
) -> DcStatus {
    guard(|| {
        let g = &graph_ref(graph)?.graph;
        *out(out_value, "out_value")? = effective_resistance(g.n(), g.edges(), u, v)?;
        Ok(())
    })
}

/// Sum of effective resistances over all node pairs. `out_pairwise` may be
/// NULL; otherwise it receives the `n × n` matrix.
///
/// # Safety
/// `graph` must be a live handle; buffers as described.
#[no_mangle]
pub unsafe extern "C" fn dc_total_resistance(
    graph: *const DcGraph,
    out_r_tot: *mut f64,
    out_pairwise: *mut f64,
) -> DcStatus {
    guard(|| {
        let g = &graph_ref(graph)?.graph;
        let rep = total_effective_resistance(g.n(), g.edges(), None)?;
        *out(out_r_tot, "out_r_tot")? = rep.r_tot;
        if !out_pairwise.is_null() {
            let dst = slice_mut(out_pairwise, g.n() * g.n(), "out_pairwise")?;
            for (d, s) in dst.iter_mut().zip(rep.pairwise.iter()) {
                *d = *s;
            }
        }
        Ok(())
    })
}

/// Class homophily matrix (`classes × classes`, capacity `cap` doubles) and
/// edge homophily (NaN without edges). All nodes must be labeled.
///
/// # Safety
/// `graph` must be a live handle; `out_h` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn dc_homophily(
    graph: *const DcGraph,
    out_h: *mut f64,
    cap: usize,
    out_classes: *mut usize,
    out_edge_homophily: *mut f64,
) -> DcStatus {
    guard(|| {
        let g = &graph_ref(graph)?.graph;
        let hm = homophily_matrix(g)?;
        let c = hm.h.nrows();
        *out(out_classes, "out_classes")? = c;
        if cap < c * c {
            return Err(Fail(
                DcStatus::BufferTooSmall,
                format!("need {} doubles, got {cap}", c * c),
            ));
        }
        let dst = slice_mut(out_h, c * c, "out_h")?;
        for (d, s) in dst.iter_mut().zip(hm.h.iter()) {
            *d = *s;
        }
        *out(out_edge_homophily, "out_edge_homophily")? = hm.edge_homophily.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Degree-normalised Dirichlet energy of an `n × cols` embedding matrix.
///
/// # Safety
/// `z` must hold `n·cols` doubles where `n` is the node count.
#[no_mangle]
pub unsafe extern "C" fn dc_dirichlet_energy(
    graph: *const DcGraph,
    z: *const f64,
    cols: usize,
    out_value: *mut f64,
) -> DcStatus {
    guard(|| {
        let g = &graph_ref(graph)?.graph;
        let z = matrix(slice(z, g.n() * cols, "z")?, g.n(), cols)?;
        *out(out_value, "out_value")? = dirichlet_energy(&z, g)?;
        Ok(())
    })
}

/// Trains on the graph's train split. `hyperparams_json` may be NULL for
/// defaults or hold any subset of the hyperparameter fields.
///
/// # Safety
/// `graph` must be a live handle; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_train(
    graph: *const DcGraph,
    hyperparams_json: *const c_char,
    seed: u64,
    out_model: *mut *mut DcModel,
) -> DcStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let g = &graph_ref(graph)?.graph;
        let hp: Hyperparams = if hyperparams_json.is_null() {
            Hyperparams::default()
        } else {
            serde_json::from_str(&c_str(hyperparams_json, "hyperparams_json")?).map_err(Error::from)?
        };
        let outcome = train(g, &hp, seed)?;
        *out_model = Box::into_raw(Box::new(DcModel {
            params: outcome.params,
            hp,
        }));
        Ok(())
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out_model: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let ckpt = Checkpoint::load(&PathBuf::from(c_str(path, "path")?))?;
        let params = ckpt.params()?;
        *out_model = Box::into_raw(Box::new(DcModel {
            params,
            hp: ckpt.hyperparams,
        }));
        Ok(())
    })
}

/// Writes a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dc_model_save(model: *const DcModel, path: *const c_char) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Checkpoint::new(&m.params, &m.hp).save(&PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Class count, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_model_num_classes(model: *const DcModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.classes())
}

/// Deterministic logits (`n × classes`, capacity `cap` doubles).
///
/// # Safety
/// Handles must be live; `out_logits` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn dc_model_predict(
    model: *const DcModel,
    graph: *const DcGraph,
    out_logits: *mut f64,
    cap: usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = &graph_ref(graph)?.graph;
        if g.feature_dim() != m.params.input_dim() {
            return Err(Fail(
                DcStatus::ShapeMismatch,
                format!(
                    "model expects {} features, graph has {}",
                    m.params.input_dim(),
                    g.feature_dim()
                ),
            ));
        }
        let need = g.n() * m.params.classes();
        if cap < need {
            return Err(Fail(
                DcStatus::BufferTooSmall,
                format!("need {need} doubles, got {cap}"),
            ));
        }
        let ctx = GraphContext::new(g, &m.hp)?;
        let logits = predict(&m.params, &ctx, &m.hp)?;
        let dst = slice_mut(out_logits, need, "out_logits")?;
        for (d, s) in dst.iter_mut().zip(logits.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
