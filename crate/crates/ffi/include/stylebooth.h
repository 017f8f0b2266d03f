#ifndef STYLEBOOTH_H
#define STYLEBOOTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_ARGUMENT = 1,
  SB_STATUS_INVALID_UTF8 = 2,
  /**
   * Caller input was rejected (parse, arity, configuration).
   */
  SB_STATUS_USAGE = 3,
  SB_STATUS_NOT_FOUND = 4,
  /**
   * Backend, I/O or numeric failure.
   */
  SB_STATUS_RUNTIME = 5,
  SB_STATUS_PANIC = 6,
} SbStatus;

/**
 * Filter verdicts.
 */
typedef enum {
  SB_VERDICT_PASS = 0,
  SB_VERDICT_TOO_SIMILAR = 1,
  SB_VERDICT_TOO_DIFFERENT = 2,
  SB_VERDICT_FAIL = 3,
} SbVerdict;

/**
 * RGB image, planar, values in `[0, 1]`.
 */
typedef struct SbImage SbImage;

/**
 * Editing model with its sampling settings.
 */
typedef struct SbModel SbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sb_version(void);

/**
 * Freshly initialised model on toy backends.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
SbStatus sb_model_new_toy(uint64_t seed, size_t steps, SbModel **out);

/**
 * Loads a checkpoint; backends follow `STYLEBOOTH_BACKEND` / `STYLEBOOTH_WEIGHTS`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SbStatus sb_model_load(const char *path, size_t steps, SbModel **out);

/**
 * Sets the image and text guidance scales used by [`sb_edit`].
 *
 * # Safety
 * `model` must come from this library.
 */
SbStatus sb_model_set_guidance(SbModel *model, double image_scale, double text_scale);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void sb_model_free(SbModel *model);

/**
 * Copies a planar `3 × height × width` float buffer into a new image.
 *
 * # Safety
 * `data` must hold `3 * width * height` floats.
 */
SbStatus sb_image_from_planar(size_t width, size_t height, const float *data, SbImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SbStatus sb_image_load(const char *path, SbImage **out);

/**
 * # Safety
 * `image` must come from this library; `path` must be NUL-terminated.
 */
SbStatus sb_image_save_png(const SbImage *image, const char *path);

/**
 * Width in pixels, 0 for null.
 *
 * # Safety
 * `image` must come from this library or be null.
 */
size_t sb_image_width(const SbImage *image);

/**
 * Height in pixels, 0 for null.
 *
 * # Safety
 * `image` must come from this library or be null.
 */
size_t sb_image_height(const SbImage *image);

/**
 * Copies planar pixel data into `buf` (`3 * width * height` floats).
 *
 * # Safety
 * `buf` must have room for `len` floats.
 */
SbStatus sb_image_read(const SbImage *image, float *buf, size_t len);

/**
 * # Safety
 * `image` must come from this library or be null.
 */
void sb_image_free(SbImage *image);

/**
 * Edits `image` following `instruction`. `styles` bind `<style>` slots,
 * `exemplar_paths` bind `<image>` slots and `alphas` (may be empty) weight
 * every slot in order.
 *
 * # Safety
 * Arrays must hold the stated number of elements; strings must be
 * NUL-terminated.
 */
SbStatus sb_edit(const SbModel *model,
                 const SbImage *image,
                 const char *instruction,
                 const char *const *styles,
                 size_t n_styles,
                 const char *const *exemplar_paths,
                 size_t n_exemplars,
                 const float *alphas,
                 size_t n_alphas,
                 uint64_t seed,
                 SbImage **out);

/**
 * Expands a style prompt format; free the result with [`sb_string_free`].
 *
 * # Safety
 * Inputs must be NUL-terminated; `out` a valid pointer.
 */
SbStatus sb_expand_prompt(const char *format, const char *prompt, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void sb_string_free(char *s);

/**
 * Filter verdict for one similarity; bounds are inclusive.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
SbStatus sb_filter_verdict(double similarity, double lower, double upper, SbVerdict *out);

/**
 * `100 · passed / total`, unrounded.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
SbStatus sb_usability_percent(size_t passed, size_t total, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEBOOTH_H */
