#ifndef ADKD_H
#define ADKD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call; zero is success.
typedef enum AdkdStatus {
  ADKD_STATUS_OK = 0,
  ADKD_STATUS_NULL_POINTER = 1,
  ADKD_STATUS_INVALID_ARGUMENT = 2,
  ADKD_STATUS_IO = 3,
  ADKD_STATUS_PARSE = 4,
  ADKD_STATUS_DIMENSION = 5,
  ADKD_STATUS_CONFIG = 6,
  ADKD_STATUS_WEIGHTS = 7,
  ADKD_STATUS_DATASET = 8,
  ADKD_STATUS_UNDEFINED_METRIC = 9,
  ADKD_STATUS_INTERNAL = 10,
} AdkdStatus;

// Teacher and student backbones with the preprocessing of their run.
typedef struct AdkdDetector AdkdDetector;

// Anomaly map at the network input resolution plus its image score.
typedef struct AdkdMap AdkdMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *adkd_last_error(void);

// Library version as a static NUL-terminated string.
const char *adkd_version(void);

// Loads a training checkpoint; `*out` receives a new detector.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum AdkdStatus adkd_detector_load(const char *path, struct AdkdDetector **out);

// Releases a detector; null is ignored.
//
// # Safety
// `det` must be null or a detector from [`adkd_detector_load`] not yet freed.
void adkd_detector_free(struct AdkdDetector *det);

// Network input height and width; maps have this size.
//
// # Safety
// `det` must be a live detector; `height` and `width` writable pointers.
enum AdkdStatus adkd_detector_input_size(const struct AdkdDetector *det,
                                         uint32_t *height,
                                         uint32_t *width);

// Anomaly map of a PPM or PGM file.
//
// # Safety
// `det` must be a live detector, `path` NUL-terminated, `out` writable.
enum AdkdStatus adkd_detector_infer_file(const struct AdkdDetector *det,
                                         const char *path,
                                         struct AdkdMap **out);

// Anomaly map of an interleaved 8-bit image with 1 or 3 channels, rows
// tightly packed.
//
// # Safety
// `pixels` must point to `height * width * channels` readable bytes.
enum AdkdStatus adkd_detector_infer_pixels(const struct AdkdDetector *det,
                                           const uint8_t *pixels,
                                           uint32_t height,
                                           uint32_t width,
                                           uint32_t channels,
                                           struct AdkdMap **out);

// Releases a map; null is ignored.
//
// # Safety
// `map` must be null or a map from this library not yet freed.
void adkd_map_free(struct AdkdMap *map);

// Image-level score (maximum of the map).
//
// # Safety
// `map` must be a live map and `score` writable.
enum AdkdStatus adkd_map_score(const struct AdkdMap *map, float *score);

// Seconds spent computing the map.
//
// # Safety
// `map` must be a live map and `seconds` writable.
enum AdkdStatus adkd_map_seconds(const struct AdkdMap *map, double *seconds);

// Map height and width.
//
// # Safety
// `map` must be a live map; `height` and `width` writable.
enum AdkdStatus adkd_map_size(const struct AdkdMap *map, uint32_t *height, uint32_t *width);

// Copies the row-major map into `buffer`, which holds `len` floats.
//
// # Safety
// `buffer` must point to `len` writable floats.
enum AdkdStatus adkd_map_copy(const struct AdkdMap *map, float *buffer, size_t len);

// Writes the map as an `ADAM` grid file.
//
// # Safety
// `map` must be a live map and `path` NUL-terminated.
enum AdkdStatus adkd_map_save(const struct AdkdMap *map, const char *path);

// Rank-based AUROC of `n` scores; `labels[i]` nonzero marks anomalous.
//
// # Safety
// `scores` and `labels` must point to `n` readable values; `out` writable.
enum AdkdStatus adkd_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADKD_H */
