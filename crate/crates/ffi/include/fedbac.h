#ifndef FEDBAC_H
#define FEDBAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedbacStatus {
  FEDBAC_STATUS_OK = 0,
  FEDBAC_STATUS_NULL_POINTER = 1,
  FEDBAC_STATUS_INVALID_UTF8 = 2,
  FEDBAC_STATUS_CONFIG = 3,
  FEDBAC_STATUS_INPUT = 4,
  FEDBAC_STATUS_RUNTIME = 5,
  FEDBAC_STATUS_IO = 6,
  FEDBAC_STATUS_OUT_OF_RANGE = 7,
  FEDBAC_STATUS_PANIC = 8,
} FedbacStatus;

// A validated experiment configuration.
typedef struct FedbacConfig FedbacConfig;

// The per-round log and summary of one run.
typedef struct FedbacTrace FedbacTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next `fedbac_*` call on the same thread.
const char *fedbac_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fedbac_version(void);

// Parse and validate a TOML configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum FedbacStatus fedbac_config_from_toml(const char *toml, struct FedbacConfig **out);

// # Safety
// `config` must come from [`fedbac_config_from_toml`] or be null.
void fedbac_config_free(struct FedbacConfig *config);

// Number of seeds and first seed of a configuration.
//
// # Safety
// `config` must be a live handle; the out pointers must be writable.
enum FedbacStatus fedbac_config_seeds(const struct FedbacConfig *config,
                                      uint64_t *first_seed,
                                      size_t *num_seeds);

// Run one seed. `method` may be null to use the configured method, or one
// of `"fedbac"`, `"hierfavg"`, `"ifca"`; switching method drops explicit
// `k_max`/`participation` values so the method's defaults apply.
//
// # Safety
// `config` must be a live handle, `method` null or NUL-terminated, `out`
// writable.
enum FedbacStatus fedbac_run(const struct FedbacConfig *config,
                             const char *method,
                             uint64_t seed,
                             struct FedbacTrace **out);

// # Safety
// `trace` must come from [`fedbac_run`] or be null.
void fedbac_trace_free(struct FedbacTrace *trace);

// Number of recorded rounds.
//
// # Safety
// `trace` must be a live handle, `out` writable.
enum FedbacStatus fedbac_trace_len(const struct FedbacTrace *trace, size_t *out);

// Distributed accuracy (fraction in [0, 1]) after the round at 0-based
// position `index`.
//
// # Safety
// `trace` must be a live handle, `out` writable.
enum FedbacStatus fedbac_trace_distributed_accuracy(const struct FedbacTrace *trace,
                                                    size_t index,
                                                    double *out);

// Write the per-round metrics CSV to `path`.
//
// # Safety
// `trace` must be a live handle, `path` NUL-terminated.
enum FedbacStatus fedbac_trace_write_csv(const struct FedbacTrace *trace, const char *path);

// The run summary as a JSON string. Release it with [`fedbac_string_free`].
//
// # Safety
// `trace` must be a live handle, `out` writable.
enum FedbacStatus fedbac_trace_to_json(const struct FedbacTrace *trace, char **out);

// # Safety
// `s` must come from a `fedbac_*` call that documents this function, or be
// null.
void fedbac_string_free(char *s);

// Normalized loss-ratio reward `(alt - cur) / (alt + cur + eps)`.
double fedbac_compute_reward(double loss_current, double loss_best_alt, double epsilon);

// Client-to-edge bytes for one round; `OutOfRange` on overflow.
//
// # Safety
// `out` must be writable.
enum FedbacStatus fedbac_comm_cost_round(uint64_t selected_total,
                                         uint64_t d_g,
                                         uint64_t d_k,
                                         uint64_t bytes_per_param,
                                         uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDBAC_H */
