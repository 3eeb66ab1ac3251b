#ifndef STMOE_H
#define STMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum {
  STMOE_STATUS_OK = 0,
  STMOE_STATUS_NULL_ARGUMENT = 1,
  STMOE_STATUS_INVALID_UTF8 = 2,
  STMOE_STATUS_INVALID_ARGUMENT = 3,
  STMOE_STATUS_IO = 4,
  STMOE_STATUS_UNSUPPORTED = 5,
  STMOE_STATUS_INTERNAL = 6,
} StmoeStatus;

/**
 * Loaded model plus the run config recovered from its checkpoint.
 */
typedef struct StmoeModel StmoeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static C string.
 */
const char *stmoe_version(void);

/**
 * Message for the most recent failure on this thread. Valid until the
 * next failing call on the same thread.
 */
const char *stmoe_last_error(void);

/**
 * Learned routing parameter count for a router kind
 * ("cosine", "linear", "hash", "random_fixed").
 *
 * # Safety
 * `kind` must be a valid NUL-terminated string and `out` a valid pointer.
 */
StmoeStatus stmoe_routing_param_count(const char *kind,
                                      uint64_t d_model,
                                      uint64_t d_space,
                                      uint64_t experts,
                                      uint64_t layers,
                                      bool include_kinematic,
                                      uint64_t *out);

/**
 * Expert-FLOP savings in percent for a mean executed hop count.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
StmoeStatus stmoe_flop_savings(double avg_hops, uint64_t hops, double *out);

/**
 * Percentile bootstrap CI over per-batch loss differences.
 *
 * # Safety
 * `diffs` must point to `len` doubles; output pointers must be valid.
 */
StmoeStatus stmoe_paired_bootstrap_ci(const double *diffs,
                                      size_t len,
                                      size_t resamples,
                                      double level,
                                      uint64_t seed,
                                      double *out_mean,
                                      double *out_lo,
                                      double *out_hi);

/**
 * TOST equivalence verdict with its 90% CI bounds.
 *
 * # Safety
 * `diffs` must point to `len` doubles; output pointers must be valid.
 */
StmoeStatus stmoe_tost(const double *diffs,
                       size_t len,
                       double margin,
                       size_t resamples,
                       uint64_t seed,
                       bool *out_equivalent,
                       double *out_lo,
                       double *out_hi);

/**
 * Load a checkpoint into an opaque handle. Free with `stmoe_model_free`.
 *
 * # Safety
 * `ckpt_path` must be a valid NUL-terminated path; `out` a valid pointer.
 */
StmoeStatus stmoe_model_load(const char *ckpt_path, StmoeModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from `stmoe_model_load` and not be freed twice.
 */
void stmoe_model_free(StmoeModel *model);

/**
 * Total parameter count of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
StmoeStatus stmoe_model_param_total(const StmoeModel *model, uint64_t *out);

/**
 * Routing parameter count of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
StmoeStatus stmoe_model_routing_params(const StmoeModel *model, uint64_t *out);

/**
 * Teacher-forced evaluation on the validation tail of a byte corpus.
 * Uses the handle's stored batch/window settings when `batch_size` or
 * `max_batches` are zero.
 *
 * # Safety
 * Pointers must be valid; the corpus path NUL-terminated.
 */
StmoeStatus stmoe_model_eval_ppl(const StmoeModel *model,
                                 const char *corpus_path,
                                 double val_fraction,
                                 size_t batch_size,
                                 size_t max_batches,
                                 double *out_loss,
                                 double *out_ppl);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* STMOE_H */
