#ifndef VTG_H
#define VTG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VtgStatus {
  VTG_STATUS_OK = 0,
  VTG_STATUS_NULL_POINTER = 1,
  VTG_STATUS_INVALID_ARGUMENT = 2,
  VTG_STATUS_SHAPE_MISMATCH = 3,
  VTG_STATUS_CONFIG = 4,
  VTG_STATUS_IO = 5,
  VTG_STATUS_CHECKPOINT = 6,
  VTG_STATUS_RUNTIME = 7,
  VTG_STATUS_PANIC = 8,
} VtgStatus;

/**
 * Run configuration.
 */
typedef struct VtgConfig VtgConfig;

/**
 * Generated frames, 8-bit RGB.
 */
typedef struct VtgFrames VtgFrames;

/**
 * Loaded denoiser.
 */
typedef struct VtgModel VtgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *vtg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vtg_version(void);

/**
 * Spherical interpolation of two `len`-vectors into `out`.
 *
 * # Safety
 * `a`, `b` and `out` must point to `len` valid doubles.
 */
enum VtgStatus vtg_slerp(const double *a, const double *b, size_t len, double lambda, double *out);

/**
 * Gini coefficient of `len` non-negative values.
 *
 * # Safety
 * `values` must point to `len` doubles and `out` to one.
 */
enum VtgStatus vtg_gini(const double *values, size_t len, double *out);

/**
 * Smoothness score from `len` adjacent-frame distances.
 *
 * # Safety
 * `distances` must point to `len` doubles and `out` to one.
 */
enum VtgStatus vtg_smoothness(const double *distances, size_t len, double *out);

/**
 * Fréchet distance between two embedding sets stored row-major,
 * `na x dim` and `nb x dim`.
 *
 * # Safety
 * `a` and `b` must point to `na*dim` and `nb*dim` doubles, `out` to one.
 */
enum VtgStatus vtg_fid(const double *a,
                       size_t na,
                       const double *b,
                       size_t nb,
                       size_t dim,
                       double *out);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VtgStatus vtg_config_new(struct VtgConfig **out);

/**
 * Configuration parsed from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VtgStatus vtg_config_from_toml(const char *toml, struct VtgConfig **out);

/**
 * Apply one `section.key=value` override.
 *
 * # Safety
 * `cfg` must come from this library; `assignment` must be NUL-terminated.
 */
enum VtgStatus vtg_config_set(struct VtgConfig *cfg, const char *assignment);

/**
 * # Safety
 * `cfg` must come from this library or be null.
 */
void vtg_config_free(struct VtgConfig *cfg);

/**
 * Load a denoiser checkpoint directory.
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` a valid pointer.
 */
enum VtgStatus vtg_model_load(const char *dir, struct VtgModel **out);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * `model` must come from [`vtg_model_load`] and `out` be valid.
 */
enum VtgStatus vtg_model_num_params(const struct VtgModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void vtg_model_free(struct VtgModel *model);

/**
 * Generate a transition for the pair directory `pair_dir`. `lora_cache`
 * may be null when adapters are disabled in `cfg`.
 *
 * # Safety
 * Handles must come from this library; strings must be NUL-terminated.
 */
enum VtgStatus vtg_generate(const struct VtgModel *model,
                            const struct VtgConfig *cfg,
                            const char *pair_dir,
                            const char *lora_cache,
                            struct VtgFrames **out);

/**
 * Frame count, height and width.
 *
 * # Safety
 * `frames` must come from [`vtg_generate`]; output pointers must be valid.
 */
enum VtgStatus vtg_frames_shape(const struct VtgFrames *frames,
                                size_t *count,
                                size_t *height,
                                size_t *width);

/**
 * Copy frame `index` as packed RGB8 (`height*width*3` bytes) into `buf`.
 *
 * # Safety
 * `frames` must come from [`vtg_generate`]; `buf` must hold `len` bytes.
 */
enum VtgStatus vtg_frames_copy_rgb8(const struct VtgFrames *frames,
                                    size_t index,
                                    uint8_t *buf,
                                    size_t len);

/**
 * # Safety
 * `frames` must come from this library or be null.
 */
void vtg_frames_free(struct VtgFrames *frames);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTG_H */
