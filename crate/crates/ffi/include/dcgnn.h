#ifndef DCGNN_H
#define DCGNN_H

#include <stddef.h>
#include <stdint.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_SHAPE_MISMATCH = 3,
  DC_STATUS_DISCONNECTED = 4,
  DC_STATUS_IO = 5,
  DC_STATUS_PARSE = 6,
  DC_STATUS_DIVERGENCE = 7,
  DC_STATUS_DEGENERATE = 8,
  DC_STATUS_TOO_LARGE = 9,
  DC_STATUS_BUFFER_TOO_SMALL = 10,
  DC_STATUS_PANIC = 11,
} DcStatus;

/**
 * Opaque graph handle.
 */
typedef struct DcGraph DcGraph;

/**
 * Opaque trained-model handle.
 */
typedef struct DcModel DcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dc_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from this thread.
 */
const char *dc_last_error(void);

/**
 * Builds a graph from `m` edges given as `2m` node indices and an `n × dim`
 * feature matrix. `labels` (length `n`, negative = unlabeled) may be NULL.
 * Self-loops and duplicate edges are rejected.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum DcStatus dc_graph_new(size_t n,
                           const size_t *edges,
                           size_t m,
                           const double *features,
                           size_t dim,
                           const int64_t *labels,
                           size_t num_classes,
                           struct DcGraph **out_graph);

/**
 * Loads a graph stored as a JSON document (with labels and splits if present).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_graph` must be writable.
 */
enum DcStatus dc_graph_load_json(const char *path, struct DcGraph **out_graph);

/**
 * # Safety
 * `graph` must come from this library and not be used afterwards.
 */
void dc_graph_free(struct DcGraph *graph);

/**
 * Node count, or 0 for NULL.
 *
 * # Safety
 * `graph` must be NULL or a live handle.
 */
size_t dc_graph_num_nodes(const struct DcGraph *graph);

/**
 * Edge count, or 0 for NULL.
 *
 * # Safety
 * `graph` must be NULL or a live handle.
 */
size_t dc_graph_num_edges(const struct DcGraph *graph);

/**
 * Entropic coupling of a `rows × cols` cost matrix written to `out_plan`.
 * NULL marginals mean uniform. A positive `tolerance` runs to that
 * marginal residual with `iterations` as cap; otherwise exactly
 * `iterations` scalings are done. Residuals go to the optional out-params.
 *
 * # Safety
 * Buffers must hold `rows·cols` (cost, plan), `rows` and `cols` values.
 */
enum DcStatus dc_sinkhorn(const double *cost,
                          size_t rows,
                          size_t cols,
                          const double *row_marginals,
                          const double *col_marginals,
                          double lambda,
                          size_t iterations,
                          double tolerance,
                          double *out_plan,
                          double *out_row_residual,
                          double *out_col_residual);

/**
 * Effective resistance between nodes `u` and `v`.
 *
 * # Safety
 * `graph` must be a live handle; `out_value` writable.
 */
enum DcStatus dc_effective_resistance(const struct DcGraph *graph,
                                      size_t u,
                                      size_t v,
                                      double *out_value);

/**
 * Sum of effective resistances over all node pairs. `out_pairwise` may be
 * NULL; otherwise it receives the `n × n` matrix.
 *
 * # Safety
 * `graph` must be a live handle; buffers as described.
 */
enum DcStatus dc_total_resistance(const struct DcGraph *graph,
                                  double *out_r_tot,
                                  double *out_pairwise);

/**
 * Class homophily matrix (`classes × classes`, capacity `cap` doubles) and
 * edge homophily (NaN without edges). All nodes must be labeled.
 *
 * # Safety
 * `graph` must be a live handle; `out_h` must hold `cap` doubles.
 */
enum DcStatus dc_homophily(const struct DcGraph *graph,
                           double *out_h,
                           size_t cap,
                           size_t *out_classes,
                           double *out_edge_homophily);

/**
 * Degree-normalised Dirichlet energy of an `n × cols` embedding matrix.
 *
 * # Safety
 * `z` must hold `n·cols` doubles where `n` is the node count.
 */
enum DcStatus dc_dirichlet_energy(const struct DcGraph *graph,
                                  const double *z,
                                  size_t cols,
                                  double *out_value);

/**
 * Trains on the graph's train split. `hyperparams_json` may be NULL for
 * defaults or hold any subset of the hyperparameter fields.
 *
 * # Safety
 * `graph` must be a live handle; `out_model` writable.
 */
enum DcStatus dc_model_train(const struct DcGraph *graph,
                             const char *hyperparams_json,
                             uint64_t seed,
                             struct DcModel **out_model);

/**
 * Loads a JSON checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_model` writable.
 */
enum DcStatus dc_model_load(const char *path, struct DcModel **out_model);

/**
 * Writes a JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum DcStatus dc_model_save(const struct DcModel *model, const char *path);

/**
 * Class count, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t dc_model_num_classes(const struct DcModel *model);

/**
 * Deterministic logits (`n × classes`, capacity `cap` doubles).
 *
 * # Safety
 * Handles must be live; `out_logits` must hold `cap` doubles.
 */
enum DcStatus dc_model_predict(const struct DcModel *model,
                               const struct DcGraph *graph,
                               double *out_logits,
                               size_t cap);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void dc_model_free(struct DcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCGNN_H */
