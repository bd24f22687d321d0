#ifndef OTMERGE_H
#define OTMERGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OtmSolverMode {
  OTM_SOLVER_MODE_DENSE = 0,
  OTM_SOLVER_MODE_LOG_DOMAIN = 1,
  OTM_SOLVER_MODE_STREAMING = 2,
} OtmSolverMode;

// Result codes shared by every function.
typedef enum OtmStatus {
  OTM_STATUS_OK = 0,
  OTM_STATUS_NULL_POINTER = 1,
  OTM_STATUS_VALIDATION = 2,
  OTM_STATUS_INFEASIBLE = 3,
  OTM_STATUS_NUMERICAL_FAILURE = 4,
  OTM_STATUS_IO = 5,
  OTM_STATUS_FORMAT = 6,
  OTM_STATUS_CORRUPTION = 7,
  OTM_STATUS_CONTAINER_INTEGRITY = 8,
  OTM_STATUS_MISSING_INPUT = 9,
  OTM_STATUS_CONSISTENCY = 10,
  OTM_STATUS_UNSUPPORTED_SCALE = 11,
  OTM_STATUS_INSUFFICIENT_SAMPLES = 12,
  OTM_STATUS_EMPTY_SEQUENCE = 13,
  OTM_STATUS_JSON = 14,
  OTM_STATUS_BUFFER_TOO_SMALL = 15,
  OTM_STATUS_INTERNAL = 16,
} OtmStatus;

// Opaque, fully decoded OTMB container.
typedef struct OtmContainer OtmContainer;

// Opaque transport plan.
typedef struct OtmPlan OtmPlan;

// Sinkhorn settings; see `otm_solver_config_feature` / `_layer` for defaults.
typedef struct OtmSolverConfig {
  double epsilon;
  size_t max_iters;
  double tol;
  enum OtmSolverMode mode;
  size_t block_size;
  double stability_eps;
} OtmSolverConfig;

// Convergence summary of a solved plan.
typedef struct OtmPlanInfo {
  size_t rows;
  size_t cols;
  bool converged;
  double final_violation;
  size_t iterations_used;
} OtmPlanInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or NULL. The pointer
// stays valid until the next call into this library on the same thread.
const char *otm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *otm_version(void);

// Feature-level defaults: eps 0.1, 200 iterations, tolerance 1e-6.
struct OtmSolverConfig otm_solver_config_feature(void);

// Layer-level defaults: eta 0.1, 1000 iterations, tolerance 1e-9.
struct OtmSolverConfig otm_solver_config_layer(void);

// Solves entropic OT for an `n x m` cost. `a` / `b` may be NULL for
// uniform marginals. Hitting the iteration cap is not an error; inspect
// `otm_plan_info`.
//
// # Safety
// `cost` must point to `n * m` doubles, `a` to `n` and `b` to `m` (or be
// NULL), `config` to a valid config and `out_plan` to writable storage.
enum OtmStatus otm_sinkhorn_solve(const double *cost,
                                  size_t n,
                                  size_t m,
                                  const double *a,
                                  const double *b,
                                  const struct OtmSolverConfig *config,
                                  struct OtmPlan **out_plan);

// # Safety
// `plan` must be a live handle and `out` writable.
enum OtmStatus otm_plan_info(const struct OtmPlan *plan, struct OtmPlanInfo *out);

// Copies the plan row-major into `out`, which must hold `rows * cols`
// doubles (`len` is checked).
//
// # Safety
// `plan` must be a live handle and `out` must point to `len` doubles.
enum OtmStatus otm_plan_copy(const struct OtmPlan *plan, double *out, size_t len);

// # Safety
// `plan` must come from `otm_sinkhorn_solve` and not be freed twice.
void otm_plan_free(struct OtmPlan *plan);

// Pearson cost `1 - rho` between the columns of `x` (`t x n`) and `y`
// (`t x m`), written to `out` (`n x m`).
//
// # Safety
// Buffers must hold the stated number of doubles.
enum OtmStatus otm_pearson_cost(const double *x,
                                size_t t,
                                size_t n,
                                const double *y,
                                size_t m,
                                double *out);

// Fraction of the plan's mass in its `k` largest entries.
//
// # Safety
// `q` must hold `n * m` doubles and `out` must be writable.
enum OtmStatus otm_mass_explained(const double *q, size_t n, size_t m, size_t k, double *out);

// Builds the coordinate maps from `q_in` (`a_in x b_in`) and `q_out`
// (`a_out x b_out`) and writes `phi_out W_B phi_in` (`a_out x a_in`) for
// `w_b` (`b_out x b_in`).
//
// # Safety
// Buffers must hold the stated number of doubles.
enum OtmStatus otm_transported_operator(const double *q_in,
                                        size_t a_in,
                                        size_t b_in,
                                        const double *q_out,
                                        size_t a_out,
                                        size_t b_out,
                                        const double *w_b,
                                        bool scale,
                                        double *out);

// Indices of the `k` largest scores (ties to the lower index), ascending.
// `out_indices` must hold `min(k, len)` entries; the count is written to
// `out_count`.
//
// # Safety
// `scores` must hold `len` doubles; outputs must be writable.
enum OtmStatus otm_select_topk(const double *scores,
                               size_t len,
                               size_t k,
                               size_t *out_indices,
                               size_t *out_count);

// Opens and fully validates an OTMB container.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum OtmStatus otm_container_open(const char *path, struct OtmContainer **out);

// # Safety
// `c` must be a live handle; `out` writable.
enum OtmStatus otm_container_num_records(const struct OtmContainer *c, size_t *out);

// Name of record `index` (records are sorted by name). `needed` (may be
// NULL) receives the byte length including the terminator, also on
// `OTM_STATUS_BUFFER_TOO_SMALL`.
//
// # Safety
// `c` must be a live handle; `buf` must hold `buf_len` bytes.
enum OtmStatus otm_container_record_name(const struct OtmContainer *c,
                                         size_t index,
                                         char *buf,
                                         size_t buf_len,
                                         size_t *needed);

// Canonical JSON manifest of the container.
//
// # Safety
// As for `otm_container_record_name`.
enum OtmStatus otm_container_manifest_json(const struct OtmContainer *c,
                                           char *buf,
                                           size_t buf_len,
                                           size_t *needed);

// Shape of a named record. `shape` must hold `max_rank` entries; the rank
// is written to `out_rank`.
//
// # Safety
// `c` live, `name` NUL-terminated, outputs writable.
enum OtmStatus otm_container_record_shape(const struct OtmContainer *c,
                                          const char *name,
                                          size_t *shape,
                                          size_t max_rank,
                                          size_t *out_rank);

// Reads a named record as doubles (float32 payloads are widened).
//
// # Safety
// `c` live, `name` NUL-terminated, `out` holds `len` doubles.
enum OtmStatus otm_container_read_f64(const struct OtmContainer *c,
                                      const char *name,
                                      double *out,
                                      size_t len);

// # Safety
// `c` must come from `otm_container_open` and not be freed twice.
void otm_container_free(struct OtmContainer *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTMERGE_H */
