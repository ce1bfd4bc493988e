/* C interface for the styleinv inversion/editing pipeline. */

#ifndef STYLEINV_H
#define STYLEINV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum StyleinvStatus {
  STYLEINV_STATUS_OK = 0,
  // A required pointer argument was null.
  STYLEINV_STATUS_NULL_ARGUMENT = 1,
  // File could not be read, or is corrupt / wrong version.
  STYLEINV_STATUS_IO = 2,
  // A buffer length or tensor shape did not match the model.
  STYLEINV_STATUS_SHAPE = 3,
  // Configuration rejected by validation.
  STYLEINV_STATUS_CONFIG = 4,
  // Numerical failure (non-finite values) during inference.
  STYLEINV_STATUS_NUMERICAL = 5,
  // Any other internal failure.
  STYLEINV_STATUS_INTERNAL = 6,
} StyleinvStatus;

// Opaque pipeline handle.
typedef struct StyleinvPipeline StyleinvPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent error on this thread. The pointer
// stays valid until the next failing call on the same thread.
const char *styleinv_last_error(void);

// Load a pipeline from a checkpoint file. On success writes a handle
// that must be released with `styleinv_free`.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid
// pointer to receive the handle.
enum StyleinvStatus styleinv_load(const char *path, struct StyleinvPipeline **out);

// Release a handle obtained from `styleinv_load`. Null is a no-op.
//
// # Safety
// `p` must be a handle returned by `styleinv_load` (or null) and must
// not be used afterwards.
void styleinv_free(struct StyleinvPipeline *p);

// Image side length R of the loaded model; buffers are 3*R*R floats.
//
// # Safety
// `p` and `side` must be valid pointers.
enum StyleinvStatus styleinv_image_side(const struct StyleinvPipeline *p, size_t *side);

// Latent dimensions: `rows` = generator depth L_g, `cols` = d_w.
// Direction buffers are rows*cols floats, row-major.
//
// # Safety
// All pointers must be valid.
enum StyleinvStatus styleinv_latent_dims(const struct StyleinvPipeline *p,
                                         size_t *rows,
                                         size_t *cols);

// Invert an image: reconstructs it through the encoder + generator.
// `image` and `out_image` are 3*R*R floats in [-1, 1], channel-major.
//
// # Safety
// `p` must be a live handle; buffers must match the stated lengths.
enum StyleinvStatus styleinv_invert(const struct StyleinvPipeline *p,
                                    const float *image,
                                    size_t image_len,
                                    float *out_image,
                                    size_t out_len);

// Edit an image along a direction (L_g*d_w floats, row-major) scaled
// by `scale`. Scale 0 is exactly equivalent to `styleinv_invert`.
//
// # Safety
// `p` must be a live handle; buffers must match the stated lengths.
enum StyleinvStatus styleinv_edit(const struct StyleinvPipeline *p,
                                  const float *image,
                                  size_t image_len,
                                  const float *direction,
                                  size_t direction_len,
                                  float scale,
                                  float *out_image,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEINV_H */
