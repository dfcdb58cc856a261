#ifndef SEQDIFF_H
#define SEQDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_POINTER = 1,
  SD_STATUS_INVALID_UTF8 = 2,
  SD_STATUS_IO = 3,
  SD_STATUS_CHECKPOINT = 4,
  SD_STATUS_VOCAB = 5,
  SD_STATUS_CONFIG = 6,
  SD_STATUS_DATA = 7,
  SD_STATUS_NUMERIC = 8,
  SD_STATUS_BUFFER_TOO_SMALL = 9,
  SD_STATUS_PANIC = 10,
} SdStatus;

/**
 * A loaded model: parameters, noise schedule and vocab.
 */
typedef struct SdModel SdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or NULL if none. Valid until the next
 * failing call on the same thread.
 */
const char *sd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sd_version(void);

/**
 * Loads a checkpoint. If `vocab_path` is non-NULL that vocab is used and checked against the
 * checkpoint; otherwise the vocab embedded in the checkpoint is used.
 *
 * # Safety
 * `ckpt_path` and `vocab_path` (when non-NULL) must be NUL-terminated strings; `out` must be a
 * valid pointer to writable storage for one handle.
 */
enum SdStatus sd_model_load(const char *ckpt_path, const char *vocab_path, struct SdModel **out);

/**
 * Releases a handle from [`sd_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void sd_model_free(struct SdModel *model);

/**
 * Number of diffusion steps the model was trained with (0 for NULL).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t sd_model_diffusion_steps(const struct SdModel *model);

/**
 * Vocab size of the model (0 for NULL).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t sd_model_vocab_size(const struct SdModel *model);

/**
 * Generates `candidates` outputs for `src` and writes the MBR choice into `out_buf` as a
 * NUL-terminated string. `steps` = 0 uses the trained step count. `out_len` (optional)
 * receives the byte length without the NUL; when the buffer is too small it still receives
 * the required length and [`SdStatus::BufferTooSmall`] is returned.
 *
 * # Safety
 * `model` must be a live handle, `src` a NUL-terminated string, and `out_buf` writable for
 * `buf_len` bytes (it may be NULL when `buf_len` is 0).
 */
enum SdStatus sd_model_generate(const struct SdModel *model,
                                const char *src,
                                uint32_t steps,
                                uint32_t candidates,
                                bool clamp,
                                uint64_t seed,
                                char *out_buf,
                                size_t buf_len,
                                size_t *out_len);

/**
 * Smoothed sentence BLEU of whitespace-tokenized `hyp` against one reference.
 *
 * # Safety
 * `hyp` and `reference` must be NUL-terminated strings and `out` writable.
 */
enum SdStatus sd_bleu(const char *hyp, const char *reference, double *out);

/**
 * LCS-based ROUGE-L F1 of whitespace-tokenized `hyp` against `reference`.
 *
 * # Safety
 * `hyp` and `reference` must be NUL-terminated strings and `out` writable.
 */
enum SdStatus sd_rouge_l(const char *hyp, const char *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQDIFF_H */
