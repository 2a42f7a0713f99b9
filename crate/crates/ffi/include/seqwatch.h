#ifndef SEQWATCH_H
#define SEQWATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_NULL_POINTER = 1,
  SW_STATUS_INVALID_ARGUMENT = 2,
  SW_STATUS_DIMENSION = 3,
  SW_STATUS_TRAINING = 4,
  SW_STATUS_IO = 5,
  SW_STATUS_OUT_OF_ORDER = 6,
  SW_STATUS_PANIC = 7,
} SwStatus;

typedef enum SwEventKind {
  SW_EVENT_KIND_NONE = 0,
  SW_EVENT_KIND_OPENED = 1,
  SW_EVENT_KIND_CLOSED = 2,
} SwEventKind;

// A bare CUSUM detector fed with kNN distances or evidence values.
typedef struct SwDetector SwDetector;

// A trained nominal model. Sessions created from it share its reference set.
typedef struct SwModel SwModel;

// One stream bound to a model: kNN scoring, CUSUM and auto-insertion.
typedef struct SwSession SwSession;

typedef struct SwFlowStats {
  double mean;
  double variance;
  double skewness;
  double kurtosis;
} SwFlowStats;

typedef struct SwTrainConfig {
  size_t k;
  double alpha;
  // Fraction of the input assigned to the calibration split.
  double split_fraction;
  uint64_t rng_seed;
  // Reference set bound; 0 means unbounded.
  size_t max_reference_size;
  // Fit a per-dimension min-max scaler.
  bool normalize;
} SwTrainConfig;

typedef struct SwDetectorConfig {
  double h;
  uint32_t n_consec;
  // Evidence for object-free frames; NaN selects `-d_alpha^m`.
  double delta_floor;
  double evidence_cap;
  // Distance exponent; 0 selects the model dimensionality.
  uint32_t exponent;
  double single_shot_threshold;
  size_t history_len;
} SwDetectorConfig;

typedef struct SwUpdatePolicy {
  bool auto_insert_on_zero;
  uint64_t auto_insert_stride;
  double feedback_sample_fraction;
  uint64_t rng_seed;
} SwUpdatePolicy;

// Summary of a model, mirrored from the service's `/model/stats`.
typedef struct SwModelStats {
  size_t reference_size;
  size_t calibration_size;
  size_t dim;
  size_t k;
  double alpha;
  double d_alpha;
  uint64_t insert_count;
} SwModelStats;

// Result of one frame. Alarm fields are meaningful only when `event` is not
// `SW_EVENT_KIND_NONE`; `tau_end`, `peak_*` and `closed_at` only on close.
typedef struct SwStepResult {
  uint64_t t;
  double delta;
  double s;
  enum SwEventKind event;
  uint64_t tau_start;
  uint64_t detection_frame;
  uint64_t tau_end;
  uint64_t peak_frame;
  double peak_statistic;
  uint64_t closed_at;
  // Session alarms only; 0 for a bare detector.
  uint64_t alarm_id;
  // Vectors auto-inserted after this frame (sessions only).
  size_t inserted;
} SwStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on the calling thread, or NULL.
//
// The pointer stays valid until the next `sw_*` call on the same thread.
const char *sw_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *sw_version(void);

// Mean, population variance, skewness and (non-excess) kurtosis of `len` values.
//
// # Safety
// `values` must point to `len` readable doubles; `out` must be writable.
enum SwStatus sw_flow_stats(const double *values, size_t len, struct SwFlowStats *out);

// Clamped evidence `d^m - d_alpha^m` for one distance.
//
// # Safety
// `out` must be writable.
enum SwStatus sw_evidence(double distance,
                          double d_alpha,
                          uint32_t exponent,
                          double cap,
                          double *out);

struct SwTrainConfig sw_train_config_default(void);

struct SwDetectorConfig sw_detector_config_default(void);

struct SwUpdatePolicy sw_update_policy_default(void);

// Trains a model on `n_vectors` nominal vectors. `cfg` may be NULL for defaults.
//
// # Safety
// `data` must hold `n_vectors * dim` doubles, `cfg` must be NULL or valid,
// and `out` must be writable. On success `*out` owns a new handle.
enum SwStatus sw_model_train(const double *data,
                             size_t n_vectors,
                             size_t dim,
                             const struct SwTrainConfig *cfg,
                             struct SwModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum SwStatus sw_model_load(const char *path, struct SwModel **out);

// # Safety
// `model` must come from this library and `path` be NUL-terminated.
enum SwStatus sw_model_save(const struct SwModel *model, const char *path);

// Releases a model. Sessions created from it keep their own reference.
//
// # Safety
// `model` must be NULL or a live handle from this library, freed once.
void sw_model_free(struct SwModel *model);

// k-th nearest neighbour distance of `query` to the reference set.
//
// # Safety
// `query` must hold `dim` doubles and `out` must be writable.
enum SwStatus sw_model_knn_distance(const struct SwModel *model,
                                    const double *query,
                                    size_t dim,
                                    double *out);

// Appends nominal vectors to the reference set. `inserted` may be NULL.
//
// # Safety
// `data` must hold `n_vectors * dim` doubles.
enum SwStatus sw_model_insert(const struct SwModel *model,
                              const double *data,
                              size_t n_vectors,
                              size_t dim,
                              size_t *inserted);

// Recomputes `d_alpha` from a fresh calibration set. `d_alpha` may be NULL.
//
// # Safety
// `data` must hold `n_vectors * dim` doubles.
enum SwStatus sw_model_recalibrate(const struct SwModel *model,
                                   const double *data,
                                   size_t n_vectors,
                                   size_t dim,
                                   double alpha,
                                   double *d_alpha);

// # Safety
// `model` must be a live handle and `out` writable.
enum SwStatus sw_model_stats(const struct SwModel *model, struct SwModelStats *out);

// `cfg` may be NULL for defaults.
//
// # Safety
// `out` must be writable; on success it owns a new handle.
enum SwStatus sw_detector_new(const struct SwDetectorConfig *cfg,
                              double d_alpha,
                              size_t model_dim,
                              struct SwDetector **out);

// Feeds the kNN distances of one frame's objects (`n` may be 0).
//
// # Safety
// `distances` must hold `n` doubles and `out` must be writable.
enum SwStatus sw_detector_step(struct SwDetector *detector,
                               uint64_t t,
                               const double *distances,
                               size_t n,
                               struct SwStepResult *out);

// Feeds a precomputed evidence value.
//
// # Safety
// `out` must be writable.
enum SwStatus sw_detector_step_delta(struct SwDetector *detector,
                                     uint64_t t,
                                     double delta,
                                     struct SwStepResult *out);

// # Safety
// `detector` must be a live handle.
enum SwStatus sw_detector_reset(struct SwDetector *detector);

// # Safety
// `detector` must be NULL or a live handle, freed once.
void sw_detector_free(struct SwDetector *detector);

// Opens a stream on `model`. The session shares the model's reference set,
// so auto-inserted vectors are visible through the model handle. `cfg` and
// `policy` may be NULL for defaults.
//
// # Safety
// `model` must be live, `stream_id` NULL or NUL-terminated, `out` writable.
enum SwStatus sw_session_new(const struct SwModel *model,
                             const char *stream_id,
                             const struct SwDetectorConfig *cfg,
                             const struct SwUpdatePolicy *policy,
                             struct SwSession **out);

// Processes one frame of `n_objects` assembled feature vectors.
//
// # Safety
// `data` must hold `n_objects * dim` doubles and `out` must be writable.
enum SwStatus sw_session_process(struct SwSession *session,
                                 uint64_t t,
                                 const double *data,
                                 size_t n_objects,
                                 size_t dim,
                                 struct SwStepResult *out);

// # Safety
// `session` must be NULL or a live handle, freed once.
void sw_session_free(struct SwSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQWATCH_H */
