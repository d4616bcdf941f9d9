#ifndef DATRANSUNET_H
#define DATRANSUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DTU_DTYPE_F32 0

#define DTU_DTYPE_F64 1

/**
 * Result of every fallible call.
 */
typedef enum DtuStatus {
  DTU_STATUS_OK = 0,
  DTU_STATUS_NULL_POINTER = 1,
  DTU_STATUS_INVALID_ARGUMENT = 2,
  DTU_STATUS_CONFIG = 3,
  DTU_STATUS_DATA = 4,
  DTU_STATUS_INCOMPATIBLE = 5,
  DTU_STATUS_NON_FINITE = 6,
  DTU_STATUS_IO = 7,
  DTU_STATUS_PANIC = 8,
} DtuStatus;

/**
 * Opaque model handle.
 */
typedef struct DtuModel DtuModel;

typedef struct DtuModelInfo {
  size_t in_channels;
  /**
   * Head channels; 1 means a binary (sigmoid) head.
   */
  size_t num_classes;
  size_t input_size;
  size_t parameters;
  /**
   * `DTU_DTYPE_F32` or `DTU_DTYPE_F64`.
   */
  uint32_t dtype;
} DtuModelInfo;

typedef struct DtuMaskMetrics {
  uint64_t true_pos;
  uint64_t false_pos;
  uint64_t false_neg;
  double iou;
  double dice;
  double hd;
  double hd95;
  /**
   * Exactly one mask was empty; `hd` and `hd95` hold the image diagonal.
   */
  bool hd_sentinel;
} DtuMaskMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialized model.
 *
 * `config_toml` holds model settings as flat TOML keys (for example
 * `input_size = 64`); missing keys take their defaults and null means all
 * defaults. `dtype` is `DTU_DTYPE_F32` or `DTU_DTYPE_F64`. On success `*out`
 * receives a handle to release with [`dtu_model_free`].
 *
 * # Safety
 *
 * `config_toml` must be null or a nul-terminated string; `out` must be a valid pointer.
 */
enum DtuStatus dtu_model_new(const char *config_toml, uint32_t dtype, struct DtuModel **out);

/**
 * Loads the model stored in a checkpoint directory, in the precision it was saved with.
 *
 * # Safety
 *
 * `checkpoint_dir` must be a nul-terminated string; `out` must be a valid pointer.
 */
enum DtuStatus dtu_model_load(const char *checkpoint_dir, struct DtuModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 *
 * `model` must be null or a handle from this library that has not been freed.
 */
void dtu_model_free(struct DtuModel *model);

/**
 * Input geometry, head width and parameter count of a model.
 *
 * # Safety
 *
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DtuStatus dtu_model_info(const struct DtuModel *model, struct DtuModelInfo *out);

/**
 * Eval-mode logits for `batch` images laid out `(batch, in_channels, size, size)`.
 * `logits` receives `(batch, num_classes, size, size)` values.
 *
 * # Safety
 *
 * `model` must be a live handle; `images` and `logits` must hold the stated lengths.
 */
enum DtuStatus dtu_model_forward(const struct DtuModel *model,
                                 const float *images,
                                 size_t images_len,
                                 size_t batch,
                                 float *logits,
                                 size_t logits_len);

/**
 * Eval-mode class labels, `(batch, size, size)` values.
 *
 * # Safety
 *
 * `model` must be a live handle; `images` and `labels` must hold the stated lengths.
 */
enum DtuStatus dtu_model_predict(const struct DtuModel *model,
                                 const float *images,
                                 size_t images_len,
                                 size_t batch,
                                 uint8_t *labels,
                                 size_t labels_len);

/**
 * Overlap and boundary-distance metrics of class `class_id` between two `height x width` label maps.
 *
 * # Safety
 *
 * `pred` and `truth` must each hold `height * width` bytes; `out` must be a valid pointer.
 */
enum DtuStatus dtu_mask_metrics(const uint8_t *pred,
                                const uint8_t *truth,
                                size_t height,
                                size_t width,
                                uint8_t class_id,
                                struct DtuMaskMetrics *out);

/**
 * Message for the most recent failure on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *dtu_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *dtu_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DATRANSUNET_H */
