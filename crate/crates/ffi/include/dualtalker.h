#ifndef DUALTALKER_H
#define DUALTALKER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum DtStatus {
  DT_STATUS_OK = 0,
  DT_STATUS_NULL_POINTER = 1,
  DT_STATUS_INVALID_ARGUMENT = 2,
  DT_STATUS_IO = 3,
  DT_STATUS_NON_FINITE = 4,
  DT_STATUS_BUFFER_TOO_SMALL = 5,
  DT_STATUS_PANIC = 6,
} DtStatus;

// Opaque model handle.
typedef struct DtModel DtModel;

// Dimensions a caller needs to size buffers.
typedef struct DtModelInfo {
  size_t vertices;
  size_t bands;
  size_t speakers;
  size_t max_frames;
} DtModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *dt_version(void);

// Message for the last failed call on this thread, or null. Valid until the
// next call into the library on the same thread.
const char *dt_last_error(void);

// Loads a checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DtStatus dt_model_load(const char *path, struct DtModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`dt_model_load`] not yet freed.
void dt_model_free(struct DtModel *model);

// # Safety
// `model` must be a live handle and `info` a valid pointer.
enum DtStatus dt_model_info(const struct DtModel *model, struct DtModelInfo *info);

// Generates `frames x vertices x 3` displacements from `frames x bands`
// features.
//
// # Safety
// `features` must hold `frames * bands` values and `out` `out_len` values.
enum DtStatus dt_generate_motion(const struct DtModel *model,
                                 const double *features,
                                 size_t frames,
                                 size_t bands,
                                 size_t speaker,
                                 double *out,
                                 size_t out_len);

// Generates `frames x bands` features from `frames x vertices x 3` motion.
//
// # Safety
// `motion` must hold `frames * vertices * 3` values and `out` `out_len`.
enum DtStatus dt_generate_audio(const struct DtModel *model,
                                const double *motion,
                                size_t frames,
                                size_t vertices,
                                size_t speaker,
                                double *out,
                                size_t out_len);

// Lip vertex error between two motion buffers over the given lip vertices.
//
// # Safety
// `pred` and `gt` must hold `frames * vertices * 3` values, `lips`
// `n_lips` indices, and `out` must be valid.
enum DtStatus dt_lip_vertex_error(const double *pred,
                                  const double *gt,
                                  size_t frames,
                                  size_t vertices,
                                  const size_t *lips,
                                  size_t n_lips,
                                  double *out);

// Upper-face dynamics deviation (signed) between ground truth and prediction.
//
// # Safety
// As [`dt_lip_vertex_error`], with `upper` holding `n_upper` indices.
enum DtStatus dt_fdd(const double *gt,
                     const double *pred,
                     size_t frames,
                     size_t vertices,
                     const size_t *upper,
                     size_t n_upper,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALTALKER_H */
