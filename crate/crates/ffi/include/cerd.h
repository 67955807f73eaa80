#ifndef CERD_H
#define CERD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum CerdStatus {
  CERD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CERD_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument was out of range (index, buffer length, UTF-8 path).
   */
  CERD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Configuration or parameter error in the checkpoint.
   */
  CERD_STATUS_CONFIGURATION = 3,
  /**
   * File could not be read or parsed.
   */
  CERD_STATUS_IO = 4,
  /**
   * Checkpoint incompatible with this library or with the input.
   */
  CERD_STATUS_COMPATIBILITY = 5,
  /**
   * Input data violated a contract (for example, no observed modality).
   */
  CERD_STATUS_DATA = 6,
  /**
   * Internal consistency failure.
   */
  CERD_STATUS_INTERNAL = 7,
  /**
   * A panic was caught at the boundary.
   */
  CERD_STATUS_PANIC = 8,
} CerdStatus;

/**
 * Opaque model handle.
 */
typedef struct CerdModelHandle CerdModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cerd_version(void);

/**
 * Length in bytes of the calling thread's last error message, excluding the NUL.
 */
size_t cerd_last_error_length(void);

/**
 * Copies the last error message into `buf` (truncated, always NUL-terminated when
 * `len > 0`). Returns the full message length, excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cerd_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint. On success `*out` receives a handle to release with [`cerd_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CerdStatus cerd_model_load(const char *path, struct CerdModelHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cerd_model_load`] and not have been freed.
 */
void cerd_model_free(struct CerdModelHandle *model);

/**
 * Number of modalities the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum CerdStatus cerd_model_num_modalities(const struct CerdModelHandle *model, size_t *out);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum CerdStatus cerd_model_num_classes(const struct CerdModelHandle *model, size_t *out);

/**
 * Feature dimension of modality `index`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum CerdStatus cerd_model_modality_dim(const struct CerdModelHandle *model,
                                        size_t index,
                                        size_t *out);

/**
 * Name of modality `index`, valid while the handle lives. Null when out of range.
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *cerd_model_modality_name(const struct CerdModelHandle *model, size_t index);

/**
 * Name of class `index`, valid while the handle lives. Null when out of range.
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *cerd_model_class_name(const struct CerdModelHandle *model, size_t index);

/**
 * Class probabilities for one subject.
 *
 * `features` holds one pointer per modality (null when missing), each addressing
 * that modality's raw feature values. `probs` receives `num_classes` values.
 *
 * # Safety
 * Pointers must be valid for the sizes described above.
 */
enum CerdStatus cerd_model_predict(const struct CerdModelHandle *model,
                                   const double *const *features,
                                   double *probs,
                                   size_t probs_len);

/**
 * Additive evidence decomposition for one subject:
 * `logits[c] = shared[c] + Σ_m contributions[m * C + c]`.
 *
 * `logits` and `shared` receive `C` values, `contributions` `M × C` (row-major by
 * modality) and `weights` `M` values. Fails with `COMPATIBILITY` for models
 * trained with the plain head.
 *
 * # Safety
 * Pointers must be valid for the sizes described above.
 */
enum CerdStatus cerd_model_attribute(const struct CerdModelHandle *model,
                                     const double *const *features,
                                     double *logits,
                                     double *shared,
                                     double *contributions,
                                     double *weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CERD_H */
