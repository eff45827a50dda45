#ifndef PDALAB_H
#define PDALAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdaStatus {
  PDA_STATUS_OK = 0,
  PDA_STATUS_NULL_POINTER = 1,
  PDA_STATUS_INVALID_ARGUMENT = 2,
  PDA_STATUS_CONFIG = 3,
  PDA_STATUS_IO = 4,
  PDA_STATUS_PARSE = 5,
  PDA_STATUS_BOUND_VIOLATION = 6,
  PDA_STATUS_OUT_OF_RANGE = 7,
  PDA_STATUS_INTERNAL = 8,
} PdaStatus;

/**
 * Opaque run configuration.
 */
typedef struct PdaConfig PdaConfig;

/**
 * Opaque result of a training run.
 */
typedef struct PdaTrace PdaTrace;

/**
 * Bound terms logged at one epoch.
 */
typedef struct PdaBoundTerms {
  double w_error_l1;
  double delta_bar;
  double e_type1;
  double e_tgt_shared;
  double e_src_shared;
  double d_hdh_proxy;
  double rhs_intermediate;
  double rhs_full;
} PdaBoundTerms;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pda_last_error(void);

/**
 * Annealed learning rate at progress `p` in [0, 1].
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum PdaStatus pda_lr_at(double p, double eta0, double alpha, double beta, double *out);

/**
 * Adversarial ramp `2 / (1 + exp(-gamma p)) - 1` at progress `p` in [0, 1].
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum PdaStatus pda_adv_ramp(double p, double gamma, double *out);

/**
 * Both sides of the target-side bound for `n` prediction rows of `k`
 * classes (row-major). Returns `PDA_STATUS_BOUND_VIOLATION` when
 * `lhs > rhs + 1e-9`; the terms are written either way.
 *
 * # Safety
 * `preds` must hold `n * k` doubles, `shared` `n_shared` indices and
 * `labels` `n` indices; `lhs` and `rhs` must be valid.
 */
enum PdaStatus pda_check_intermediate_bound(const double *preds,
                                            size_t n,
                                            size_t k,
                                            const size_t *shared,
                                            size_t n_shared,
                                            const size_t *labels,
                                            double *lhs,
                                            double *rhs);

/**
 * Built-in default configuration.
 *
 * # Safety
 * `out` must be a valid pointer; the handle written there is owned by the
 * caller.
 */
enum PdaStatus pda_config_default(struct PdaConfig **out);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdaStatus pda_config_from_toml(const char *toml, struct PdaConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum PdaStatus pda_config_set_seed(struct PdaConfig *cfg, uint64_t seed);

/**
 * Sets the number of training epochs (and clamps warm-up to it).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum PdaStatus pda_config_set_epochs(struct PdaConfig *cfg, size_t epochs);

/**
 * Selects a preset by name, e.g. `"san_pp"` or `"dann"`.
 *
 * # Safety
 * `cfg` must be a live handle and `name` a NUL-terminated string.
 */
enum PdaStatus pda_config_set_variant(struct PdaConfig *cfg, const char *name);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards. NULL is a
 * no-op.
 */
void pda_config_free(struct PdaConfig *cfg);

/**
 * Trains in memory; nothing is written to disk.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer; the trace written
 * there is owned by the caller.
 */
enum PdaStatus pda_run_experiment(const struct PdaConfig *cfg, struct PdaTrace **out);

/**
 * Number of logged records; epoch 0 is the state before training.
 *
 * # Safety
 * `trace` must be a live handle and `out` a valid pointer.
 */
enum PdaStatus pda_trace_len(const struct PdaTrace *trace, size_t *out);

/**
 * # Safety
 * `trace` must be a live handle and `out` a valid pointer.
 */
enum PdaStatus pda_trace_accuracy(const struct PdaTrace *trace, size_t epoch, double *out);

/**
 * Copies the class weights of `epoch` into `buf`. `len` is the capacity of
 * `buf`; the number of classes is always written to `written`, and
 * `PDA_STATUS_OUT_OF_RANGE` is returned when `buf` is too small.
 *
 * # Safety
 * `buf` must hold `len` doubles and `written` must be valid.
 */
enum PdaStatus pda_trace_class_weights(const struct PdaTrace *trace,
                                       size_t epoch,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

/**
 * # Safety
 * `trace` must be a live handle and `out` a valid pointer.
 */
enum PdaStatus pda_trace_bound(const struct PdaTrace *trace,
                               size_t epoch,
                               struct PdaBoundTerms *out);

/**
 * # Safety
 * `trace` must come from this library and not be used afterwards. NULL is a
 * no-op.
 */
void pda_trace_free(struct PdaTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDALAB_H */
