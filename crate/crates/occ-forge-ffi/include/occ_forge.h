#ifndef OCC_FORGE_H
#define OCC_FORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of fallible C-ABI calls.
 */
typedef enum {
  OCF_STATUS_OK = 0,
  OCF_STATUS_NULL_ARGUMENT = 1,
  OCF_STATUS_INVALID_ARGUMENT = 2,
  OCF_STATUS_RUNTIME_ERROR = 3,
} OcfStatus;

/**
 * Opaque pipeline-config handle.
 */
typedef struct OcfConfig OcfConfig;

/**
 * Opaque result of a fusion-path run.
 */
typedef struct OcfFusionResult OcfFusionResult;

/**
 * Opaque scene handle.
 */
typedef struct OcfScene OcfScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *ocf_version(void);

/**
 * Returns the calling thread's last error message, or null when none is
 * recorded. The caller owns the string.
 */
char *ocf_last_error(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by an occ-forge function that
 * documents caller ownership, and must not be freed twice.
 */
void ocf_string_free(char *s);

/**
 * Parses a scene from JSON; null on failure (see `ocf_last_error`).
 *
 * # Safety
 * `json` must be a valid NUL-terminated string or null.
 */
OcfScene *ocf_scene_from_json(const char *json);

/**
 * Builds the built-in desk-scale fixture scene.
 */
OcfScene *ocf_scene_toy_fixture(uint64_t seed);

/**
 * Serializes a scene to JSON; caller owns the string.
 *
 * # Safety
 * `scene` must be a live pointer from a scene constructor or null.
 */
char *ocf_scene_to_json(const OcfScene *scene);

/**
 * Number of cameras in the scene rig.
 *
 * # Safety
 * `scene` must be a live pointer from a scene constructor or null.
 */
size_t ocf_scene_camera_count(const OcfScene *scene);

/**
 * # Safety
 * `scene` must come from a scene constructor and not be freed twice.
 */
void ocf_scene_free(OcfScene *scene);

/**
 * Full-scale default configuration.
 */
OcfConfig *ocf_config_default(void);

/**
 * Desk-scale (20x20x8 grid) configuration.
 */
OcfConfig *ocf_config_toy(void);

/**
 * Parses a configuration from JSON; null on failure.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string or null.
 */
OcfConfig *ocf_config_from_json(const char *json);

/**
 * Serializes a configuration to JSON; caller owns the string.
 *
 * # Safety
 * `config` must be a live pointer from a config constructor or null.
 */
char *ocf_config_to_json(const OcfConfig *config);

/**
 * # Safety
 * `config` must come from a config constructor and not be freed twice.
 */
void ocf_config_free(OcfConfig *config);

/**
 * Runs the fusion pipeline; null on failure.
 *
 * # Safety
 * `config` and `scene` must be live pointers from their constructors.
 */
OcfFusionResult *ocf_run_fusion(const OcfConfig *config, const OcfScene *scene);

/**
 * Voxel grid dimensions (y, x, z) of the predicted occupancy.
 *
 * # Safety
 * `result` must be a live pointer from `ocf_run_fusion`; the out pointers
 * must be writable or null.
 */
OcfStatus ocf_fusion_result_dims(const OcfFusionResult *result, size_t *ny, size_t *nx, size_t *nz);

/**
 * Copies predicted voxel labels (y-major, z fastest) into `out`.
 *
 * # Safety
 * `result` must be a live pointer from `ocf_run_fusion`; `out` must point to
 * at least `len` writable u16 slots.
 */
OcfStatus ocf_fusion_result_labels(const OcfFusionResult *result, uint16_t *out, size_t len);

/**
 * Occupied-vs-empty IoU of the run; NaN when undefined.
 *
 * # Safety
 * `result` must be a live pointer from `ocf_run_fusion` or null.
 */
double ocf_fusion_result_binary_iou(const OcfFusionResult *result);

/**
 * Mean IoU of the run; NaN when undefined.
 *
 * # Safety
 * `result` must be a live pointer from `ocf_run_fusion` or null.
 */
double ocf_fusion_result_miou(const OcfFusionResult *result);

/**
 * Full metrics report as JSON; caller owns the string.
 *
 * # Safety
 * `result` must be a live pointer from `ocf_run_fusion` or null.
 */
char *ocf_fusion_result_report_json(const OcfFusionResult *result);

/**
 * # Safety
 * `result` must come from `ocf_run_fusion` and not be freed twice.
 */
void ocf_fusion_result_free(OcfFusionResult *result);

/**
 * Runs the distillation (KL) path and returns its report as JSON; null on
 * failure. Caller owns the string.
 *
 * # Safety
 * `config` and `scene` must be live pointers from their constructors.
 */
char *ocf_run_kl_report_json(const OcfConfig *config, const OcfScene *scene);

/**
 * Projects `n` sensor-frame points (x,y,z triples) through camera
 * `cam_index`. Writes (u, v, depth) triples to `out_uvd` and a validity flag
 * per point to `out_valid`; invalid projections leave their triple zeroed.
 *
 * # Safety
 * `scene` must be live; `xyz` must hold 3*n readable doubles; `out_uvd` must
 * hold 3*n writable doubles; `out_valid` must hold n writable bytes.
 */
OcfStatus ocf_project_points(const OcfScene *scene,
                             size_t cam_index,
                             const double *xyz,
                             size_t n,
                             double *out_uvd,
                             uint8_t *out_valid);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* OCC_FORGE_H */
