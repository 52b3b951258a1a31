#ifndef LAMINO_H
#define LAMINO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LaminoStatus {
  LAMINO_STATUS_OK = 0,
  LAMINO_STATUS_NULL_POINTER = 1,
  LAMINO_STATUS_INVALID_ARGUMENT = 2,
  LAMINO_STATUS_SHAPE = 3,
  LAMINO_STATUS_GEOMETRY = 4,
  LAMINO_STATUS_CONFIG = 5,
  LAMINO_STATUS_IO = 6,
  LAMINO_STATUS_FORMAT = 7,
  LAMINO_STATUS_DIVERGED = 8,
  LAMINO_STATUS_METRIC = 9,
  LAMINO_STATUS_PANIC = 10,
  LAMINO_STATUS_OTHER = 11,
} LaminoStatus;

/**
 * Run configuration.
 */
typedef struct LaminoConfig LaminoConfig;

/**
 * Projection stack together with its acquisition geometry.
 */
typedef struct LaminoStack LaminoStack;

/**
 * Real-valued volume.
 */
typedef struct LaminoVolume LaminoVolume;

/**
 * Metrics of a reconstruction against a reference.
 */
typedef struct LaminoMetrics {
  double ber_all;
  double ber_fine;
  double pcc;
  double pcc_fine;
  double cone_energy_ratio;
  double em_threshold;
} LaminoMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lamino_last_error(void);

/**
 * Library version, static storage.
 */
const char *lamino_version(void);

/**
 * Default configuration.
 */
struct LaminoConfig *lamino_config_new(void);

/**
 * Parses configuration text (key = value with [sections]).
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum LaminoStatus lamino_config_parse(const char *text, struct LaminoConfig **out);

/**
 * Sets one `section.key` to `value`. Cross-field checks run when the
 * configuration is used.
 *
 * # Safety
 * `cfg` must come from this library; strings must be NUL-terminated.
 */
enum LaminoStatus lamino_config_set(struct LaminoConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards; null is ignored.
 */
void lamino_config_free(struct LaminoConfig *cfg);

/**
 * Copies `nx * ny * nz` values (x fastest) into a new volume.
 *
 * # Safety
 * `values` must point to `nx * ny * nz` readable doubles; `out` must be writable.
 */
enum LaminoStatus lamino_volume_new(size_t nx,
                                    size_t ny,
                                    size_t nz,
                                    double voxel_nm,
                                    const double *values,
                                    struct LaminoVolume **out);

/**
 * # Safety
 * `vol` must be a live volume handle; the three outputs must be writable.
 */
enum LaminoStatus lamino_volume_dims(const struct LaminoVolume *vol,
                                     size_t *nx,
                                     size_t *ny,
                                     size_t *nz);

/**
 * Copies the values (x fastest) into `buf`, which must hold exactly
 * `nx * ny * nz` doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum LaminoStatus lamino_volume_copy_values(const struct LaminoVolume *vol,
                                            double *buf,
                                            size_t len);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum LaminoStatus lamino_volume_read(const char *path, struct LaminoVolume **out);

/**
 * Writes a contrast volume file stamped with the configuration hash.
 *
 * # Safety
 * Handles must be live; `path` must be NUL-terminated.
 */
enum LaminoStatus lamino_volume_write(const struct LaminoConfig *cfg,
                                      const struct LaminoVolume *vol,
                                      const char *path);

/**
 * # Safety
 * `vol` must come from this library and not be used afterwards; null is ignored.
 */
void lamino_volume_free(struct LaminoVolume *vol);

/**
 * Synthetic phantom from the `[phantom]` section.
 *
 * # Safety
 * `cfg` must be live; `out` must be writable.
 */
enum LaminoStatus lamino_phantom_generate(const struct LaminoConfig *cfg,
                                          struct LaminoVolume **out);

/**
 * Dense scan of `vol`, then jitter, alignment and decimation as configured.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum LaminoStatus lamino_project(const struct LaminoConfig *cfg,
                                 const struct LaminoVolume *vol,
                                 struct LaminoStack **out);

/**
 * # Safety
 * `stack` must be live.
 */
size_t lamino_stack_len(const struct LaminoStack *stack);

/**
 * # Safety
 * `stack` must come from this library and not be used afterwards; null is ignored.
 */
void lamino_stack_free(struct LaminoStack *stack);

/**
 * Filtered backprojection onto the configured phantom grid.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum LaminoStatus lamino_fbp(const struct LaminoConfig *cfg,
                             const struct LaminoStack *stack,
                             struct LaminoVolume **out);

/**
 * Generator-prior reconstruction with the `[solver]` and `[network]` settings.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum LaminoStatus lamino_reconstruct(const struct LaminoConfig *cfg,
                                     const struct LaminoStack *stack,
                                     struct LaminoVolume **out);

/**
 * BER on EM-binarized values, PCC on raw values, cone energy of the spectrum.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum LaminoStatus lamino_evaluate(const struct LaminoConfig *cfg,
                                  const struct LaminoVolume *recon,
                                  const struct LaminoVolume *reference,
                                  struct LaminoMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAMINO_H */
