#ifndef SVLA_H
#define SVLA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SVLA_STATUS_OK = 0,
  SVLA_STATUS_NULL_POINTER = 1,
  SVLA_STATUS_INVALID_UTF8 = 2,
  SVLA_STATUS_CONFIG = 3,
  SVLA_STATUS_SHAPE = 4,
  SVLA_STATUS_FORMAT = 5,
  SVLA_STATUS_IO = 6,
  SVLA_STATUS_BUFFER_TOO_SMALL = 7,
  SVLA_STATUS_INVALID_INPUT = 8,
  SVLA_STATUS_NON_FINITE = 9,
  SVLA_STATUS_PANIC = 10,
} SvlaStatus;

/**
 * Opaque model handle.
 */
typedef struct SvlaModel SvlaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialised model from flat config text; null text
 * means all defaults. On success `*out` owns a new handle.
 *
 * # Safety
 * `config_text` is null or a NUL-terminated string; `out` is writable.
 */
SvlaStatus svla_model_create(const char *config_text, SvlaModel **out);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
SvlaStatus svla_model_load_checkpoint(const char *path, SvlaModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void svla_model_free(SvlaModel *model);

/**
 * Rows and columns of one predicted chunk (`K` and `7·arms`).
 *
 * # Safety
 * `model` is a live handle; `rows` and `cols` are writable.
 */
SvlaStatus svla_model_chunk_shape(const SvlaModel *model, size_t *rows, size_t *cols);

/**
 * Visual tokens reaching the decoder and the decoder sequence length.
 *
 * # Safety
 * `model` is a live handle; both outputs are writable.
 */
SvlaStatus svla_model_token_budget(const SvlaModel *model,
                                   size_t *visual_tokens,
                                   size_t *sequence_len);

/**
 * Generates the episode for `seed` and writes the predicted chunk
 * row-major into `buf`. `*written` receives the element count, also when
 * the buffer is too small.
 *
 * # Safety
 * `model` is a live handle; `buf` holds `len` doubles; `written` is writable.
 */
SvlaStatus svla_model_predict_episode(const SvlaModel *model,
                                      uint64_t seed,
                                      double *buf,
                                      size_t len,
                                      size_t *written);

/**
 * Forward FLOPs of `layers` transformer layers at sequence length `s`,
 * width `d` and MLP ratio `r`, counting two FLOPs per multiply-add.
 */
uint64_t svla_transformer_flops(uint64_t s, uint64_t d, uint64_t layers, uint64_t r);

/**
 * Action placeholder count for `mode` 0 coupled, 1 lite, 2 conventional.
 *
 * # Safety
 * `out` is writable.
 */
SvlaStatus svla_coupler_token_count(uint32_t mode, size_t chunk_len, size_t arms, size_t *out);

/**
 * Message of the last failure on this thread, or null. The caller owns
 * the string and releases it with `svla_string_free`.
 */
char *svla_last_error_message(void);

/**
 * # Safety
 * `s` is null or came from `svla_last_error_message`.
 */
void svla_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVLA_H */
