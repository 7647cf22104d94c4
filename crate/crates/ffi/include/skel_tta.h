#ifndef SKEL_TTA_H
#define SKEL_TTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SkelStatus {
  SKEL_STATUS_OK = 0,
  SKEL_STATUS_NULL_POINTER = 1,
  SKEL_STATUS_INVALID_ARGUMENT = 2,
  SKEL_STATUS_FORMAT = 3,
  SKEL_STATUS_IO = 4,
  SKEL_STATUS_CONTRACT_VIOLATION = 5,
  SKEL_STATUS_TRAINING_DIVERGED = 6,
  // The output buffer is smaller than required.
  SKEL_STATUS_BUFFER_TOO_SMALL = 7,
  SKEL_STATUS_PANIC = 8,
} SkelStatus;

typedef enum SkelAdaptMode {
  SKEL_ADAPT_MODE_ONLINE_BN = 0,
  SKEL_ADAPT_MODE_ONLINE_BP = 1,
  SKEL_ADAPT_MODE_STANDARD = 2,
} SkelAdaptMode;

// A classifier with its skeletal heads.
typedef struct SkelModel SkelModel;

// An adaptation stream bound to a copy of a model.
typedef struct SkelSession SkelSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *skel_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// without the terminator, or 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t skel_last_error_message(char *buf, size_t len);

// Freshly initialized model with the default architecture.
//
// # Safety
// `out` must be a valid pointer.
enum SkelStatus skel_model_new(size_t classes, uint64_t seed, struct SkelModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SkelStatus skel_model_load(const char *path, struct SkelModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum SkelStatus skel_model_save(const struct SkelModel *model, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a live handle from this library.
void skel_model_free(struct SkelModel *model);

// Number of classes and number of skeletal spheres per cloud.
//
// # Safety
// All pointers must be valid.
enum SkelStatus skel_model_shape(const struct SkelModel *model, size_t *classes, size_t *spheres);

// Eval-mode class prediction for one cloud of `n_points` xyz triples.
//
// # Safety
// `points` must hold `3 * n_points` floats; other pointers must be valid.
enum SkelStatus skel_model_predict(const struct SkelModel *model,
                                   const float *points,
                                   size_t n_points,
                                   size_t *label);

// Predicted skeleton: `centers` receives `3 * spheres` floats and `radii`
// `spheres` floats, where `spheres` comes from [`skel_model_shape`].
//
// # Safety
// `points` must hold `3 * n_points` floats; `centers` and `radii` must be
// valid for `3 * capacity` and `capacity` floats.
enum SkelStatus skel_model_skeleton(const struct SkelModel *model,
                                    const float *points,
                                    size_t n_points,
                                    float *centers,
                                    float *radii,
                                    size_t capacity);

// Starts an adaptation session on a copy of `model`, with default settings
// apart from the mode, view count, BatchNorm momentum and seed.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SkelStatus skel_session_new(const struct SkelModel *model,
                                 enum SkelAdaptMode mode,
                                 size_t views,
                                 double momentum,
                                 uint64_t seed,
                                 struct SkelSession **out);

// Adapts on one stream sample and writes its prediction. Samples are
// numbered in arrival order; the number seeds the sample's views.
//
// # Safety
// `points` must hold `3 * n_points` floats; other pointers must be valid.
enum SkelStatus skel_session_step(struct SkelSession *session,
                                  const float *points,
                                  size_t n_points,
                                  size_t *label);

// Restores the source model and clears optimizer state.
//
// # Safety
// `session` must be a live handle.
enum SkelStatus skel_session_reset(struct SkelSession *session);

// Copies the session's current adapted model into a new handle.
//
// # Safety
// `session` must be a live handle and `out` a valid pointer.
enum SkelStatus skel_session_model(const struct SkelSession *session, struct SkelModel **out);

// Releases a session; null is ignored.
//
// # Safety
// `session` must be null or a live handle from this library.
void skel_session_free(struct SkelSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKEL_TTA_H */
