#ifndef PATCHSR_H
#define PATCHSR_H

/* Generated by cbindgen from patchsr-capi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible entry point.
 */
typedef enum PsrStatus {
  PSR_STATUS_OK = 0,
  PSR_STATUS_NULL_ARGUMENT = 1,
  PSR_STATUS_INVALID_UTF8 = 2,
  PSR_STATUS_IO = 3,
  PSR_STATUS_INVALID_ARGUMENT = 4,
  PSR_STATUS_GEOMETRY = 5,
  PSR_STATUS_NUMERIC = 6,
} PsrStatus;

/**
 * Opaque handle to a loaded generator.
 */
typedef struct PsrModel PsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *psr_version(void);

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *psr_last_error(void);

/**
 * Load a training checkpoint and build its generator.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer;
 * the returned handle must be released with [`psr_model_free`].
 */
enum PsrStatus psr_model_load(const char *path, struct PsrModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from [`psr_model_load`] and not be freed twice.
 */
void psr_model_free(struct PsrModel *model);

/**
 * Patch size the model was trained with; input sides must divide by
 * twice this value.
 *
 * # Safety
 * `model` must be a live handle from [`psr_model_load`].
 */
uint32_t psr_model_patch_size(const struct PsrModel *model);

/**
 * Super-resolve an RGB image by `scale` (2 or 4). `input` holds
 * `height * width * 3` values; `output` must have room for
 * `scale^2 * height * width * 3` values.
 *
 * # Safety
 * `model` must be live; `input`/`output` must point to buffers of the
 * stated sizes.
 */
enum PsrStatus psr_super_resolve(const struct PsrModel *model,
                                 const double *input,
                                 uint32_t width,
                                 uint32_t height,
                                 uint32_t scale,
                                 double *output);

/**
 * PSNR in dB between two same-sized RGB images (peak 1.0, identical
 * images report the 100 dB cap).
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` values; `out` must be valid.
 */
enum PsrStatus psr_psnr(const double *a,
                        const double *b,
                        uint32_t width,
                        uint32_t height,
                        double *out);

/**
 * Mean SSIM between two same-sized RGB images (11x11 Gaussian window);
 * sides must be at least 11 pixels.
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` values; `out` must be valid.
 */
enum PsrStatus psr_ssim(const double *a,
                        const double *b,
                        uint32_t width,
                        uint32_t height,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHSR_H */
