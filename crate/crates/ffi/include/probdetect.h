#ifndef PROBDETECT_H
#define PROBDETECT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_IO = 3,
  PD_STATUS_FORMAT = 4,
  PD_STATUS_SHAPE_MISMATCH = 5,
  PD_STATUS_DIMENSION_MISMATCH = 6,
  PD_STATUS_CONSTANT_VOLUME = 7,
  PD_STATUS_VOLUME_TOO_SMALL = 8,
  PD_STATUS_EMPTY_WINDOW = 9,
  PD_STATUS_NON_POSITIVE_ALEATORIC = 10,
  PD_STATUS_EMPTY_CELLS = 11,
  PD_STATUS_DOMAIN = 12,
  PD_STATUS_PANIC = 99,
} pd_status;

typedef enum {
  PD_COMPOUNDING_MAX = 0,
  PD_COMPOUNDING_SUM = 1,
} pd_compounding;

typedef struct pd_classifier pd_classifier;

typedef struct pd_coords pd_coords;

typedef struct pd_volume pd_volume;

/**
 * Detection counts and calibration scores of one prediction set.
 */
typedef struct {
  size_t n_tp;
  size_t n_fp;
  size_t n_fn;
  double precision;
  double recall;
  double f1;
  double brier;
  double nll;
} pd_score_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *pd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pd_version(void);

/**
 * Copy `nz*ny*nx` floats (C-order) into a new volume.
 *
 * # Safety
 * `shape` and `voxel_size_um` point to 3 values, `data` to the product of `shape`.
 */
pd_status pd_volume_new(const size_t *shape,
                        const double *voxel_size_um,
                        const float *data,
                        pd_volume **out_volume);

/**
 * Read a raw volume and its JSON sidecar.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out_volume` is writable.
 */
pd_status pd_volume_load(const char *path_, pd_volume **out_volume);

/**
 * # Safety
 * `volume` is a live handle; `path` is a NUL-terminated string.
 */
pd_status pd_volume_save(const pd_volume *volume, const char *path_);

/**
 * Write the shape into `out_shape[3]` and voxel size into `out_voxel_size_um[3]`.
 * Either output may be NULL.
 *
 * # Safety
 * `volume` is a live handle; non-null outputs hold 3 values.
 */
pd_status pd_volume_shape(const pd_volume *volume, size_t *out_shape, double *out_voxel_size_um);

/**
 * Borrowed pointer to the voxel data, valid while the handle lives.
 *
 * # Safety
 * `volume` is a live handle or NULL.
 */
const float *pd_volume_data(const pd_volume *volume);

/**
 * # Safety
 * `volume` was returned by this library and is not used afterwards.
 */
void pd_volume_free(pd_volume *volume);

/**
 * Copy `n` points (`points[3*i..3*i+3]` = z, y, x in um) and optional
 * probabilities into a new set.
 *
 * # Safety
 * `points` holds `3*n` values; `p` is NULL or holds `n` values.
 */
pd_status pd_coords_new(const double *points, const double *p, size_t n, pd_coords **out_coords);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out_coords` is writable.
 */
pd_status pd_coords_load(const char *path_, pd_coords **out_coords);

/**
 * # Safety
 * `coords` is a live handle; `path` is a NUL-terminated string.
 */
pd_status pd_coords_save(const pd_coords *coords, const char *path_);

/**
 * Number of points, 0 for NULL.
 *
 * # Safety
 * `coords` is a live handle or NULL.
 */
size_t pd_coords_len(const pd_coords *coords);

/**
 * Point `i` into `out_zyx[3]` and its probability (1 when absent) into `out_p`.
 * `out_p` may be NULL.
 *
 * # Safety
 * `coords` is a live handle; `out_zyx` holds 3 values.
 */
pd_status pd_coords_get(const pd_coords *coords, size_t i, double *out_zyx, double *out_p);

/**
 * # Safety
 * `coords` was returned by this library and is not used afterwards.
 */
void pd_coords_free(pd_coords *coords);

/**
 * Render a density map with the default kernel cutoff and unit-peak amplitude.
 *
 * # Safety
 * `coords` is a live handle; `shape` and `voxel_size_um` hold 3 values.
 */
pd_status pd_render_dm(const pd_coords *coords,
                       const size_t *shape,
                       const double *voxel_size_um,
                       double sigma_um,
                       pd_compounding compounding,
                       pd_volume **out_volume);

/**
 * Local maxima above `threshold` after greedy suppression within `min_distance_um`.
 *
 * # Safety
 * `volume` is a live handle; `out_coords` is writable.
 */
pd_status pd_detect_peaks(const pd_volume *volume,
                          double threshold,
                          double min_distance_um,
                          pd_coords **out_coords);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out_model` is writable.
 */
pd_status pd_classifier_load(const char *path_, pd_classifier **out_model);

/**
 * Attach a probability to each proposal. Maps the model was not trained on
 * may be NULL.
 *
 * # Safety
 * `model`, `dm` and `proposals` are live handles; the other maps are live or NULL.
 */
pd_status pd_classify(const pd_classifier *model,
                      const pd_volume *dm,
                      const pd_volume *aleatoric,
                      const pd_volume *epistemic,
                      const pd_coords *proposals,
                      pd_coords **out_coords);

/**
 * # Safety
 * `model` was returned by this library and is not used afterwards.
 */
void pd_classifier_free(pd_classifier *model);

/**
 * Match `pred` to `gt` within `t_match_um` and score counts and calibration.
 * Predictions without probabilities count as certain.
 *
 * # Safety
 * `gt` and `pred` are live handles; `out_score` is writable.
 */
pd_status pd_score(const pd_coords *gt,
                   const pd_coords *pred,
                   double t_match_um,
                   pd_score_t *out_score);

/**
 * Run the synthetic end-to-end pipeline and write its outputs to `out_dir`.
 * `config_json` may be NULL for the default configuration; otherwise it is
 * a complete or partial configuration whose fields override the defaults.
 *
 * # Safety
 * `config_json` is NULL or NUL-terminated; `out_dir` is NUL-terminated.
 */
pd_status pd_pipeline_run(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBDETECT_H */
