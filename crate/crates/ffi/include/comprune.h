#ifndef COMPRUNE_H
#define COMPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bit flags selecting granularities.
 */
#define CPR_FILTER 1

#define CPR_LAYER 2

#define CPR_BRANCH 4

#define CPR_BLOCK 8

typedef enum CprStatus {
  CPR_STATUS_OK = 0,
  CPR_STATUS_NULL_POINTER = 1,
  CPR_STATUS_INVALID_UTF8 = 2,
  CPR_STATUS_INVALID_SPEC = 3,
  CPR_STATUS_SHAPE_MISMATCH = 4,
  CPR_STATUS_INVALID_ARGUMENT = 5,
  CPR_STATUS_SURGERY = 6,
  CPR_STATUS_DATA = 7,
  CPR_STATUS_CONFIG = 8,
  CPR_STATUS_NUMERICAL = 9,
  CPR_STATUS_CHECKPOINT = 10,
  CPR_STATUS_IO = 11,
  CPR_STATUS_JSON = 12,
  CPR_STATUS_PANIC = 13,
} CprStatus;

typedef enum CprPolicy {
  CPR_POLICY_SKIP = 0,
  CPR_POLICY_ADAPT = 1,
} CprPolicy;

/**
 * Opaque executable network with its gates.
 */
typedef struct CprNetwork CprNetwork;

/**
 * Opaque model spec.
 */
typedef struct CprSpec CprSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty when none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *cpr_last_error(void);

/**
 * Library version, statically allocated.
 */
const char *cpr_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void cpr_string_free(char *s);

/**
 * Parses a spec from JSON.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CprStatus cpr_spec_from_json(const char *json, struct CprSpec **out);

/**
 * A catalog spec at its default input shape.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum CprStatus cpr_spec_builtin(const char *name, struct CprSpec **out);

/**
 * # Safety
 * `spec` must come from this library and not have been freed.
 */
void cpr_spec_free(struct CprSpec *spec);

/**
 * Serializes a spec; release the string with [`cpr_string_free`].
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum CprStatus cpr_spec_to_json(const struct CprSpec *spec, char **out);

/**
 * # Safety
 * `spec` must be a live handle; `params` and `flops` must be writable.
 */
enum CprStatus cpr_spec_cost(const struct CprSpec *spec, uint64_t *params, uint64_t *flops);

/**
 * Copies `spec` with shortcuts added around every site of the structural
 * granularities in `mask`; filter bits are ignored.
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum CprStatus cpr_spec_insert_shortcuts(const struct CprSpec *spec,
                                         uint32_t mask,
                                         enum CprPolicy policy,
                                         struct CprSpec **out);

/**
 * Fresh weights and one gate per attachment point of the granularities in
 * `mask` (0 for none), all from `seed`.
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum CprStatus cpr_network_new(const struct CprSpec *spec,
                               uint32_t mask,
                               uint64_t seed,
                               struct CprNetwork **out);

/**
 * Loads a checkpoint written by the pipeline.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CprStatus cpr_network_load(const char *path, struct CprNetwork **out);

/**
 * # Safety
 * `net` must come from this library and not have been freed.
 */
void cpr_network_free(struct CprNetwork *net);

/**
 * Number of gates and of trainable parameters.
 *
 * # Safety
 * `net` must be a live handle; outputs must be writable.
 */
enum CprStatus cpr_network_sizes(const struct CprNetwork *net, size_t *gates, size_t *params);

/**
 * Eval-mode logits for `batch` samples laid out `[batch, C, H, W]`.
 * `input_len` must equal `batch * C * H * W` and `logits_len` must equal
 * `batch * classes`.
 *
 * # Safety
 * `net` must be a live handle; `input` must hold `input_len` readable values
 * and `logits` `logits_len` writable ones.
 */
enum CprStatus cpr_network_predict(struct CprNetwork *net,
                                   const double *input,
                                   size_t input_len,
                                   size_t batch,
                                   double *logits,
                                   size_t logits_len);

/**
 * Runs the full prune protocol from a config file and returns the report
 * as JSON; release it with [`cpr_string_free`].
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `report_json` must be writable.
 */
enum CprStatus cpr_prune(const char *config_path, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPRUNE_H */
