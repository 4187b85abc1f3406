#ifndef SALPRUNE_H
#define SALPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SP_Q4_BLOCK_LEN 32

#define SP_Q4_BLOCK_BYTES 18

enum SpStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SP_OK = 0,
  SP_ERR_NULL = 1,
  SP_ERR_IO = 2,
  SP_ERR_FORMAT = 3,
  SP_ERR_INVALID = 4,
  SP_ERR_NUMERICAL = 5,
  SP_ERR_BUFFER_TOO_SMALL = 6,
  SP_ERR_PANIC = 7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SpStatus SpStatus;
#else
typedef int32_t SpStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct SpModel SpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads an SPT checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
SpStatus sp_model_load(const char *path, struct SpModel **out);

/**
 * Releases a handle from [`sp_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sp_model_load`] and not be used afterwards.
 */
void sp_model_free(struct SpModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
SpStatus sp_model_vocab_size(const struct SpModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
SpStatus sp_model_context_length(const struct SpModel *model, size_t *out);

/**
 * Writes `n · vocab_size` row-major logits to `logits`, which holds
 * `logits_len` floats. Masks stored in the checkpoint are applied.
 *
 * # Safety
 * `tokens` must hold `n` values and `logits` `logits_len` writable floats.
 */
SpStatus sp_model_forward(const struct SpModel *model,
                          const uint32_t *tokens,
                          size_t n,
                          float *logits,
                          size_t logits_len);

/**
 * Perplexity of `tokens` (at least two) under the model.
 *
 * # Safety
 * `tokens` must hold `n` values and `out` be writable.
 */
SpStatus sp_model_perplexity(const struct SpModel *model,
                             const uint32_t *tokens,
                             size_t n,
                             double *out);

/**
 * Encodes 32 floats into one 18-byte Q4_0 block.
 *
 * # Safety
 * `weights` must hold 32 floats and `out` 18 writable bytes.
 */
SpStatus sp_q4_quantize_block(const float *weights, uint8_t *out);

/**
 * Decodes one 18-byte Q4_0 block into 32 floats.
 *
 * # Safety
 * `block` must hold 18 bytes and `out` 32 writable floats.
 */
SpStatus sp_q4_dequantize_block(const uint8_t *block, float *out);

/**
 * Copies this thread's last error message, NUL-terminated and truncated to
 * `len` bytes, into `buf`. Returns the full message length plus one, so a
 * call with `len == 0` sizes the buffer.
 *
 * # Safety
 * `buf` must hold `len` writable bytes, or be null when `len` is 0.
 */
size_t sp_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SALPRUNE_H */
