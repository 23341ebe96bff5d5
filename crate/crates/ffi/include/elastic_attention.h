#ifndef ELASTIC_ATTENTION_H
#define ELASTIC_ATTENTION_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EA_MODE_FULL 0

#define EA_MODE_SPARSE 1

typedef enum EaStatus {
  EA_STATUS_OK = 0,
  EA_STATUS_NULL_POINTER = 1,
  EA_STATUS_INVALID_INPUT = 2,
  EA_STATUS_CONFIG = 3,
  EA_STATUS_CHECKPOINT = 4,
  EA_STATUS_IO = 5,
  EA_STATUS_NUMERIC = 6,
  EA_STATUS_TRAINING = 7,
  EA_STATUS_VERIFICATION = 8,
  EA_STATUS_PANIC = 9,
} EaStatus;

typedef enum EaPatternKind {
  EA_PATTERN_KIND_FULL = 0,
  EA_PATTERN_KIND_STREAMING = 1,
  EA_PATTERN_KIND_BLOCK_SPARSE = 2,
} EaPatternKind;

/**
 * A loaded checkpoint.
 */
typedef struct EaModel EaModel;

typedef struct EaModelDims {
  size_t layers;
  size_t heads;
  size_t d_head;
  size_t vocab;
  size_t seq_len;
  bool has_router;
} EaModelDims;

/**
 * Sparse pattern parameters; fields unused by `kind` are ignored.
 */
typedef struct EaPattern {
  enum EaPatternKind kind;
  size_t sink;
  size_t window;
  size_t block_size;
  double mass_threshold;
} EaPattern;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *ea_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ea_version(void);

/**
 * Loads a checkpoint directory (or its manifest). On success `*out` owns a
 * model that must be released with [`ea_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EaStatus ea_model_load(const char *path, struct EaModel **out);

/**
 * Releases a model from [`ea_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from `ea_model_load` and not be used afterwards.
 */
void ea_model_free(struct EaModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EaStatus ea_model_dims(const struct EaModel *model, struct EaModelDims *out);

/**
 * Routes one token sequence. Writes `layers * heads` mode bytes, layer-major,
 * into `modes`, which must hold `modes_len` bytes.
 *
 * # Safety
 * `tokens` must hold `len` values and `modes` `modes_len` bytes.
 */
enum EaStatus ea_model_route(const struct EaModel *model,
                             const uint32_t *tokens,
                             size_t len,
                             uint8_t *modes,
                             size_t modes_len);

/**
 * Argmax next-token prediction at every position. With `use_router` false
 * every head runs full attention. Writes `len` tokens to `predictions`.
 *
 * # Safety
 * `tokens` and `predictions` must each hold `len` values.
 */
enum EaStatus ea_model_predict(const struct EaModel *model,
                               const uint32_t *tokens,
                               size_t len,
                               bool use_router,
                               uint32_t *predictions);

/**
 * One attention layer with per-head modes. `q`, `k`, `v` and `out` are
 * row-major `len x (heads * d_head)`.
 *
 * # Safety
 * Buffers must hold `len * heads * d_head` values; `modes` must hold `heads` bytes.
 */
enum EaStatus ea_hybrid_attention(const double *q,
                                  const double *k,
                                  const double *v,
                                  size_t len,
                                  size_t heads,
                                  size_t d_head,
                                  const uint8_t *modes,
                                  const struct EaPattern *pattern,
                                  double *out);

/**
 * Fraction of heads in sparse mode over a `layers x heads` mode grid.
 *
 * # Safety
 * `modes` must hold `layers * heads` bytes and `out` be writable.
 */
enum EaStatus ea_msr(const uint8_t *modes, size_t layers, size_t heads, double *out);

/**
 * Mean fraction of causal keys a streaming pattern drops at length `len`.
 */
double ea_streaming_rho(size_t len, size_t sink, size_t window);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ELASTIC_ATTENTION_H */
