#ifndef MVSC_H
#define MVSC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Label value standing for "ignored voxel" in label buffers.
 */
#define MVSC_IGNORE_LABEL UINT32_MAX

typedef enum {
  MVSC_STATUS_OK = 0,
  MVSC_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument outside the core error kinds (buffer too small, bad UTF-8).
   */
  MVSC_STATUS_INVALID_ARGUMENT = 2,
  MVSC_STATUS_DIMENSION = 3,
  MVSC_STATUS_PARAMETER = 4,
  MVSC_STATUS_NON_FINITE = 5,
  MVSC_STATUS_DEGENERATE = 6,
  MVSC_STATUS_TRAINING = 7,
  MVSC_STATUS_GENERATION = 8,
  MVSC_STATUS_CONFIG = 9,
  MVSC_STATUS_IO = 10,
  MVSC_STATUS_FORMAT = 11,
  MVSC_STATUS_DETERMINISM = 12,
  MVSC_STATUS_PANIC = 13,
} MvscStatus;

typedef struct MvscKernel MvscKernel;

typedef struct MvscModel MvscModel;

typedef struct MvscScene MvscScene;

typedef struct MvscTensor MvscTensor;

typedef struct {
  double precision;
  double recall;
  double iou;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
} MvscScMetrics;

/**
 * Metric summary for a scene. `per_class_iou` buffers passed alongside
 * hold NaN for classes left out of the mean.
 */
typedef struct {
  double sc_precision;
  double sc_recall;
  double sc_iou;
  double mean_iou;
} MvscMetricSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mvsc_version(void);

/**
 * Message of the last failing call on this thread (empty if none).
 */
const char *mvsc_last_error(void);

/**
 * Copies `data` (row-major, `prod(shape)` values) into a new tensor.
 *
 * # Safety
 * `shape` must point to `rank` values and `data` to `prod(shape)` values.
 */
MvscStatus mvsc_tensor_new(const size_t *shape, size_t rank, const double *data, MvscTensor **out);

/**
 * # Safety
 * `t` must be a live tensor handle or null.
 */
size_t mvsc_tensor_rank(const MvscTensor *t);

/**
 * # Safety
 * `t` must be a live tensor handle or null.
 */
size_t mvsc_tensor_len(const MvscTensor *t);

/**
 * Writes the shape into `out` (capacity `cap`, at least the rank).
 *
 * # Safety
 * `t` must be a live tensor handle; `out` must have room for `cap` values.
 */
MvscStatus mvsc_tensor_shape(const MvscTensor *t, size_t *out, size_t cap);

/**
 * Borrowed pointer to the row-major values; valid until the tensor is freed.
 *
 * # Safety
 * `t` must be a live tensor handle or null.
 */
const double *mvsc_tensor_data(const MvscTensor *t);

/**
 * Reads a CVST file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
MvscStatus mvsc_tensor_read(const char *path_, MvscTensor **out);

/**
 * Writes a CVST file.
 *
 * # Safety
 * `t` must be a live tensor handle; `path` a NUL-terminated string.
 */
MvscStatus mvsc_tensor_write(const MvscTensor *t, const char *path_);

/**
 * # Safety
 * `t` must be a handle from this library (or null) and not used afterwards.
 */
void mvsc_tensor_free(MvscTensor *t);

/**
 * Rotated copy of the `k×k×k` lattice for angles in degrees.
 *
 * # Safety
 * `out` must be writable.
 */
MvscStatus mvsc_kernel_rotate(size_t k,
                              double theta_x,
                              double theta_y,
                              double theta_z,
                              MvscKernel **out);

/**
 * Number of kernel points (`k³`).
 *
 * # Safety
 * `kernel` must be a live handle or null.
 */
size_t mvsc_kernel_len(const MvscKernel *kernel);

/**
 * Rotated points as `len × 3` row-major values; `cap` counts doubles.
 *
 * # Safety
 * `kernel` must be a live handle; `out` must have room for `cap` doubles.
 */
MvscStatus mvsc_kernel_points(const MvscKernel *kernel, double *out, size_t cap);

/**
 * Rotation matrix, row-major (points are rows: `P' = P·R`).
 *
 * # Safety
 * `kernel` must be a live handle; `out` must have room for 9 doubles.
 */
MvscStatus mvsc_kernel_matrix(const MvscKernel *kernel, double *out);

/**
 * # Safety
 * `kernel` must be a live handle or null.
 */
bool mvsc_kernel_lattice_exact(const MvscKernel *kernel);

/**
 * # Safety
 * `kernel` must be a handle from this library (or null) and not used afterwards.
 */
void mvsc_kernel_free(MvscKernel *kernel);

/**
 * Binary completion metrics over `n` voxels; masks are 0/1 bytes.
 *
 * # Safety
 * The three buffers must hold `n` bytes; `out` must be writable.
 */
MvscStatus mvsc_sc_metrics(const uint8_t *pred,
                           const uint8_t *gt,
                           const uint8_t *mask,
                           size_t n,
                           MvscScMetrics *out);

/**
 * Per-class IoU into `per_class` (`num_classes` doubles, NaN where a class
 * is left out, index 0 always NaN) and the mean into `mean_iou`.
 *
 * # Safety
 * `pred`, `gt` and `mask` must hold `n` values; `per_class` must hold
 * `num_classes` doubles or be null; `mean_iou` must be writable.
 */
MvscStatus mvsc_ssc_metrics(const uint32_t *pred,
                            const uint32_t *gt,
                            const uint8_t *mask,
                            size_t n,
                            size_t num_classes,
                            double *per_class,
                            double *mean_iou);

/**
 * Synthetic scene of extents `h×w×d`.
 *
 * # Safety
 * `out` must be writable.
 */
MvscStatus mvsc_scene_generate(uint64_t seed,
                               size_t h,
                               size_t w,
                               size_t d,
                               size_t num_classes,
                               size_t box_count,
                               MvscScene **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
MvscStatus mvsc_scene_load(const char *dir, MvscScene **out);

/**
 * Writes the scene directory (CVST volumes plus `scene.json`).
 *
 * # Safety
 * `scene` must be a live handle; `dir` a NUL-terminated string.
 */
MvscStatus mvsc_scene_save(const MvscScene *scene, const char *dir, uint64_t seed);

/**
 * # Safety
 * `scene` must be a live handle; `out` must hold 3 values.
 */
MvscStatus mvsc_scene_extents(const MvscScene *scene, size_t *out);

/**
 * Ground-truth labels, one per voxel; ignored voxels read `MVSC_IGNORE_LABEL`.
 *
 * # Safety
 * `scene` must be a live handle; `out` must hold `cap` values.
 */
MvscStatus mvsc_scene_labels(const MvscScene *scene, uint32_t *out, size_t cap);

/**
 * # Safety
 * `scene` must be a handle from this library (or null) and not used afterwards.
 */
void mvsc_scene_free(MvscScene *scene);

/**
 * Builds a model from a JSON model config, or from the named preset
 * (`toy`, `full`) when `config_json` is null.
 *
 * # Safety
 * `config_json` and `preset` must be NUL-terminated strings or null;
 * `out` must be writable.
 */
MvscStatus mvsc_model_new(const char *config_json, const char *preset, MvscModel **out);

/**
 * Logits of shape `H×W×D×classes` as a new tensor.
 *
 * # Safety
 * `model` and `scene` must be live handles; `out` must be writable.
 */
MvscStatus mvsc_model_forward(const MvscModel *model, const MvscScene *scene, MvscTensor **out);

/**
 * Arg-max class per voxel.
 *
 * # Safety
 * `model` and `scene` must be live handles; `out` must hold `cap` values.
 */
MvscStatus mvsc_model_predict(const MvscModel *model,
                              const MvscScene *scene,
                              uint32_t *out,
                              size_t cap);

/**
 * Runs `steps` SGD steps on the scene and stores the final loss.
 *
 * # Safety
 * `model` and `scene` must be live handles; `final_loss` writable or null.
 */
MvscStatus mvsc_model_train(MvscModel *model,
                            const MvscScene *scene,
                            size_t steps,
                            double lr,
                            double momentum,
                            double *final_loss);

/**
 * Scores the model's predictions on the scene.
 *
 * # Safety
 * `model` and `scene` must be live handles; `out` must be writable;
 * `per_class` must hold the model's class count or be null.
 */
MvscStatus mvsc_model_evaluate(const MvscModel *model,
                               const MvscScene *scene,
                               MvscMetricSummary *out,
                               double *per_class);

/**
 * # Safety
 * `model` must be a handle from this library (or null) and not used afterwards.
 */
void mvsc_model_free(MvscModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVSC_H */
