#ifndef CROPGAN_H
#define CROPGAN_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every call.
typedef enum CgStatus {
  CG_STATUS_OK = 0,
  CG_STATUS_NULL_POINTER = 1,
  CG_STATUS_INVALID_INPUT = 2,
  CG_STATUS_SHAPE = 3,
  CG_STATUS_NUMERICAL = 4,
  CG_STATUS_IO = 5,
  CG_STATUS_CONFIG = 6,
  CG_STATUS_DEPENDENCY = 7,
  CG_STATUS_PANIC = 8,
} CgStatus;

// An opened pipeline run.
typedef struct CgRun CgRun;

// Accumulates ground-truth and predicted instances, then scores them.
typedef struct CgSegEvaluator CgSegEvaluator;

// Summary of a classifier evaluation.
typedef struct CgClassMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  double log_loss;
} CgClassMetrics;

// Segmentation scores; AP values are averaged over the COCO thresholds.
typedef struct CgSegMetrics {
  double mask_ap;
  double mask_ap50;
  double mask_ap75;
  double bbox_ap;
  double bbox_ap50;
  double dice;
} CgSegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or NULL. The pointer
// stays valid until the next call on the same thread.
const char *cg_last_error(void);

// Library version as a static NUL-terminated string.
const char *cg_version(void);

// Fréchet distance between Gaussians fitted to two row-major feature
// matrices of shape `n_real x dim` and `n_gen x dim`.
//
// # Safety
// `real` and `gen` must point to that many doubles; `out` must be writable.
enum CgStatus cg_fid(const double *real,
                     size_t n_real,
                     const double *gen,
                     size_t n_gen,
                     size_t dim,
                     double *out_fid);

// Inception score of a row-major `n x classes` probability matrix.
//
// # Safety
// `probs` must point to `n * classes` doubles; outputs must be writable.
enum CgStatus cg_inception_score(const double *probs,
                                 size_t n,
                                 size_t classes,
                                 size_t splits,
                                 double *out_mean,
                                 double *out_std);

// Macro-averaged metrics of `probs` (row-major `n x classes`) against
// integer `labels`.
//
// # Safety
// Buffers must hold `n * classes` doubles and `n` labels.
enum CgStatus cg_classification_metrics(const double *probs,
                                        const uint32_t *labels,
                                        size_t n,
                                        size_t classes,
                                        struct CgClassMetrics *out_metrics);

// IoU and Dice of two row-major `height x width` masks (non-zero is set).
//
// # Safety
// Both masks must hold `height * width` bytes; outputs must be writable.
enum CgStatus cg_mask_overlap(const uint8_t *a,
                              const uint8_t *b,
                              size_t height,
                              size_t width,
                              double *out_iou,
                              double *out_dice);

struct CgSegEvaluator *cg_seg_evaluator_new(void);

// # Safety
// `h` must come from [`cg_seg_evaluator_new`] and not be used afterwards.
void cg_seg_evaluator_free(struct CgSegEvaluator *h);

// Adds a ground-truth instance. `class_id` is the COCO category id.
//
// # Safety
// `h` must be a live evaluator, `image_id` a NUL-terminated string and
// `mask` hold `height * width` bytes.
enum CgStatus cg_seg_evaluator_add_ground_truth(struct CgSegEvaluator *h,
                                                const char *image_id,
                                                uint32_t class_id,
                                                const uint8_t *mask,
                                                size_t height,
                                                size_t width);

// Adds a scored prediction.
//
// # Safety
// As for [`cg_seg_evaluator_add_ground_truth`].
enum CgStatus cg_seg_evaluator_add_prediction(struct CgSegEvaluator *h,
                                              const char *image_id,
                                              uint32_t class_id,
                                              const uint8_t *mask,
                                              size_t height,
                                              size_t width,
                                              double score);

// # Safety
// `h` must be a live evaluator and `out_metrics` writable.
enum CgStatus cg_seg_evaluator_compute(const struct CgSegEvaluator *h,
                                       struct CgSegMetrics *out_metrics);

// Opens the run described by a config file. On failure `*out_run` is set
// to NULL.
//
// # Safety
// `config_path` must be NUL-terminated; `out_run` must be writable.
enum CgStatus cg_run_open(const char *config_path, struct CgRun **out_run);

// # Safety
// `run` must come from [`cg_run_open`] and not be used afterwards.
void cg_run_free(struct CgRun *run);

// Runs one stage by name (`"preprocess"`, `"eval-seg"`, ...). Sets
// `*out_ran` to 1 if the stage executed and 0 if it was up to date.
//
// # Safety
// `run` must be live, `stage` NUL-terminated; `out_ran` may be NULL.
enum CgStatus cg_run_stage(const struct CgRun *run,
                           const char *stage,
                           bool force,
                           int32_t *out_ran);

// Copies the run directory path into `buf` (NUL-terminated) and stores
// the full length excluding the NUL in `*out_len`. Truncation is not an
// error; compare `*out_len` with `cap`.
//
// # Safety
// `buf` must hold `cap` bytes (or be NULL with `cap == 0`).
enum CgStatus cg_run_dir(const struct CgRun *run, char *buf, size_t cap, size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROPGAN_H */
