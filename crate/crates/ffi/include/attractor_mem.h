#ifndef ATTRACTOR_MEM_H
#define ATTRACTOR_MEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AmRule {
  AM_RULE_HEBB = 0,
  AM_RULE_STORKEY = 1,
  AM_RULE_PINV = 2,
} AmRule;

typedef enum AmStatus {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_POINTER = 1,
  AM_STATUS_INVALID_ARGUMENT = 2,
  AM_STATUS_IO = 3,
  AM_STATUS_FORMAT = 4,
  AM_STATUS_NUMERIC = 5,
  AM_STATUS_PANIC = 6,
} AmStatus;

/**
 * A classical Hopfield network.
 */
typedef struct AmHopfield AmHopfield;

/**
 * A trained energy model plus the parameters of its latest write.
 */
typedef struct AmMemory AmMemory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *am_last_error_message(void);

/**
 * Store `n` bipolar patterns of dimension `d` (row-major, ±1) with `rule`.
 *
 * # Safety
 * `patterns` must hold `n * d` values; `out` must be writable.
 */
enum AmStatus am_hopfield_new(enum AmRule rule,
                              const double *patterns,
                              size_t n,
                              size_t d,
                              struct AmHopfield **out);

/**
 * # Safety
 * `h` must be null or come from [`am_hopfield_new`] and not be freed twice.
 */
void am_hopfield_free(struct AmHopfield *h);

/**
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum AmStatus am_hopfield_dim(const struct AmHopfield *h, size_t *out);

/**
 * Asynchronous retrieval from a bipolar `query`. `clamp` may be null;
 * otherwise nonzero entries are held fixed. Writes `d` values to `out`.
 *
 * # Safety
 * `h` must be live; `query`, `out` and a non-null `clamp` must hold `d` values.
 */
enum AmStatus am_hopfield_read(const struct AmHopfield *h,
                               const double *query,
                               const uint8_t *clamp,
                               size_t max_sweeps,
                               uint64_t seed,
                               double *out);

/**
 * # Safety
 * `h` must be live; `state` must hold `d` values; `out` must be writable.
 */
enum AmStatus am_hopfield_energy(const struct AmHopfield *h, const double *state, double *out);

/**
 * Load a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AmStatus am_memory_load(const char *path, struct AmMemory **out);

/**
 * # Safety
 * `m` must be null or come from [`am_memory_load`] and not be freed twice.
 */
void am_memory_free(struct AmMemory *m);

/**
 * # Safety
 * `m` must be live; `out` must be writable.
 */
enum AmStatus am_memory_dim(const struct AmMemory *m, size_t *out);

/**
 * Store `n` unit-box patterns (row-major, values in [0, 1]), replacing
 * whatever was stored before.
 *
 * # Safety
 * `m` must be live; `patterns` must hold `n * d` values.
 */
enum AmStatus am_memory_write(struct AmMemory *m, const double *patterns, size_t n);

/**
 * Retrieve from a unit-box `query` with the learned read schedule. `clamp`
 * may be null; otherwise nonzero entries are held at the query. Writes
 * the final iterate (`d` values) to `out`.
 *
 * # Safety
 * `m` must be live; `query`, `out` and a non-null `clamp` must hold `d` values.
 */
enum AmStatus am_memory_read(struct AmMemory *m,
                             const double *query,
                             const uint8_t *clamp,
                             double *out);

/**
 * Energy of `x` under the currently stored parameters.
 *
 * # Safety
 * `m` must be live; `x` must hold `d` values; `out` must be writable.
 */
enum AmStatus am_memory_energy(const struct AmMemory *m, const double *x, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTRACTOR_MEM_H */
