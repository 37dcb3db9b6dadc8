#ifndef SELFCOMP_H
#define SELFCOMP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Random inputs compared before and after [`sc_network_prune`].
 */
#define SC_PRESERVATION_PROBES 32

typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_NULL_POINTER = 1,
  SC_STATUS_INVALID_ARGUMENT = 2,
  SC_STATUS_CONFIG = 3,
  SC_STATUS_DATA = 4,
  SC_STATUS_CHECKPOINT = 5,
  SC_STATUS_NETWORK = 6,
  SC_STATUS_DIVERGED = 7,
  SC_STATUS_PRESERVATION = 8,
  SC_STATUS_PANIC = 9,
} ScStatus;

typedef enum ScSizeMode {
  SC_SIZE_MODE_SIMPLE = 0,
  SC_SIZE_MODE_COUPLED = 1,
} ScSizeMode;

/**
 * Opaque network handle.
 */
typedef struct ScNetwork ScNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *sc_last_error_message(void);

/**
 * Quantize `n` values with one bit depth and exponent.
 *
 * # Safety
 * `x` and `out` must point to `n` readable and writable floats.
 */
enum ScStatus sc_quantize(const float *x, size_t n, float bits, float exponent, float *out);

/**
 * Straight-through gradients of [`sc_quantize`]. `dx` receives `n`
 * values; the bit-depth and exponent gradients are summed.
 *
 * # Safety
 * `upstream`, `x` and `dx` must point to `n` floats; `dbits` and
 * `dexponent` must be writable.
 */
enum ScStatus sc_quantize_backward(const float *upstream,
                                   const float *x,
                                   size_t n,
                                   float bits,
                                   float exponent,
                                   float *dx,
                                   float *dbits,
                                   float *dexponent);

/**
 * Build a freshly initialized CIFAR network with widths scaled by
 * `width_scale`.
 *
 * # Safety
 * `out` must be writable.
 */
enum ScStatus sc_network_build(double width_scale, uint64_t seed, struct ScNetwork **out);

/**
 * Load a checkpoint directory.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` writable.
 */
enum ScStatus sc_network_load(const char *dir, struct ScNetwork **out);

/**
 * Write a checkpoint directory.
 *
 * # Safety
 * `network` must come from this library; `dir` must be nul-terminated.
 */
enum ScStatus sc_network_save(const struct ScNetwork *network, const char *dir);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `network` must come from this library and not be used afterwards.
 */
void sc_network_free(struct ScNetwork *network);

/**
 * Input shape `[channels, height, width]` and number of classes.
 *
 * # Safety
 * `shape` must point to 3 writable values and `classes` be writable.
 */
enum ScStatus sc_network_shape(const struct ScNetwork *network, size_t *shape, size_t *classes);

/**
 * Evaluation-mode logits of `n` images laid out `[n, c, h, w]`, written
 * as `[n, classes]`.
 *
 * # Safety
 * `images` must hold `n*c*h*w` floats and `logits` `n*classes` floats.
 */
enum ScStatus sc_network_forward(const struct ScNetwork *network,
                                 const float *images,
                                 size_t n,
                                 float *out_logits);

/**
 * Size report as JSON; release with [`sc_string_free`].
 *
 * # Safety
 * `network` must come from this library and `out_json` be writable.
 */
enum ScStatus sc_network_size_report_json(const struct ScNetwork *network,
                                          enum ScSizeMode mode,
                                          char **out_json);

/**
 * Remove zero-bit channels whose zero-input response is below
 * `bias_tol`. The network is left unchanged if its logits on random
 * inputs would move. The prune report is returned as JSON when
 * `out_report_json` is not null.
 *
 * # Safety
 * `network` must come from this library.
 */
enum ScStatus sc_network_prune(struct ScNetwork *network,
                               float bias_tol,
                               uint64_t seed,
                               char **out_report_json);

/**
 * Release a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFCOMP_H */
