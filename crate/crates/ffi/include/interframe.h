/* C interface to the interframe frame-interpolation library. */

#ifndef INTERFRAME_H
#define INTERFRAME_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared with the CLI: 0 success, 1 usage (bad arguments),
 * 2 data/configuration error, 3 numerical failure.
 */
typedef enum IfStatus {
  IF_STATUS_OK = 0,
  IF_STATUS_USAGE = 1,
  IF_STATUS_DATA = 2,
  IF_STATUS_NUMERICAL = 3,
} IfStatus;

/**
 * Opaque model handle.
 */
typedef struct IfModel IfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the
 * next failing call; never NULL.
 */
const char *if_last_error(void);

/**
 * Library version as a static string.
 */
const char *if_version(void);

/**
 * Load a model from a checkpoint file. Returns NULL on failure (see
 * `if_last_error`).
 *
 * # Safety
 * `ckpt_path` must be a valid NUL-terminated string.
 */
struct IfModel *if_model_load(const char *ckpt_path);

/**
 * Create a freshly initialized model from a JSON config (`"{}"` for
 * defaults). Returns NULL on failure.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string.
 */
struct IfModel *if_model_create(const char *config_json, uint64_t seed);

/**
 * Release a model handle. NULL is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by this library, released at most once.
 */
void if_model_free(struct IfModel *model);

/**
 * Number of f32 values in one frame buffer for the given extents.
 */
uintptr_t if_frame_len(uintptr_t height, uintptr_t width);

/**
 * Interpolate between two frames at time `t` in (0,1).
 *
 * Frames are planar RGB (`3*height*width` f32 values in [0,1], channel
 * then row-major); extents must be multiples of 16. The result is written
 * to `out_frame`, which must hold `if_frame_len(height, width)` values.
 *
 * # Safety
 * `model` must be a live handle; the three frame pointers must reference
 * buffers of `if_frame_len(height, width)` f32 values.
 */
enum IfStatus if_interpolate(const struct IfModel *model,
                             const float *frame0,
                             const float *frame1,
                             uintptr_t height,
                             uintptr_t width,
                             double t,
                             float *out_frame);

/**
 * Peak signal-to-noise ratio between two equal-length buffers, in dB
 * (capped at 99).
 *
 * # Safety
 * `a` and `b` must reference `len` f32 values; `out_db` must be writable.
 */
enum IfStatus if_psnr(const float *a,
                      const float *b,
                      uintptr_t len,
                      double max_val,
                      double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERFRAME_H */
