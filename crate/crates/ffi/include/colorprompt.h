#ifndef COLORPROMPT_H
#define COLORPROMPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_POINTER = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  CP_STATUS_IO = 3,
  CP_STATUS_FORMAT = 4,
  CP_STATUS_NOT_FOUND = 5,
  CP_STATUS_INTERNAL = 6,
  CP_STATUS_PANIC = 7,
};

// An RGB image with channels in [0, 1].
struct CpImage;

// A set of trained prompters keyed by task id.
struct CpPool;

// Per-channel lαβ mean and standard deviation.
struct CpStats {
  double mean[3];
  double std[3];
};

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty if none.
// The pointer stays valid until the next failing call on the same thread.
const char *cp_last_error(void);

// Build an image from `height * width * 3` interleaved RGB values.
//
// # Safety
// `rgb` must point to `height * width * 3` readable doubles and `out_img` must
// be writable.
enum CpStatus cp_image_new(size_t height,
                           size_t width,
                           const double *rgb,
                           struct CpImage **out_img);

// Decode a PNG or binary PPM file.
//
// # Safety
// `path` must be a NUL-terminated string and `out_img` writable.
enum CpStatus cp_image_read(const char *path, struct CpImage **out_img);

// Encode an image; the format follows the file extension.
//
// # Safety
// `img` must be a live handle and `path` a NUL-terminated string.
enum CpStatus cp_image_write(const struct CpImage *img, const char *path);

// # Safety
// `img` must be a live handle; `height` and `width` must be writable.
enum CpStatus cp_image_size(const struct CpImage *img, size_t *height, size_t *width);

// Copy interleaved RGB values into `dst`, which holds `len` doubles.
//
// # Safety
// `img` must be a live handle and `dst` valid for `len` writes.
enum CpStatus cp_image_pixels(const struct CpImage *img, double *dst, size_t len);

// Release an image. Null is ignored.
//
// # Safety
// `img` must be null or a handle not yet freed.
void cp_image_free(struct CpImage *img);

// Full-frame lαβ statistics.
//
// # Safety
// `img` must be a live handle and `stats` writable.
enum CpStatus cp_image_stats(const struct CpImage *img, struct CpStats *stats);

// Move an image's statistics onto `target`.
//
// # Safety
// `img` must be a live handle, `target` readable and `out_img` writable.
enum CpStatus cp_transfer(const struct CpImage *img,
                          const struct CpStats *target,
                          struct CpImage **out_img);

// Load a prompter pool file.
//
// # Safety
// `path` must be a NUL-terminated string and `out_pool` writable.
enum CpStatus cp_pool_load(const char *path, struct CpPool **out_pool);

// Number of prompters in the pool; 0 for null.
//
// # Safety
// `pool` must be null or a live handle.
size_t cp_pool_len(const struct CpPool *pool);

// Release a pool. Null is ignored.
//
// # Safety
// `pool` must be null or a handle not yet freed.
void cp_pool_free(struct CpPool *pool);

// Statistics the named task's prompter predicts for `img`.
//
// # Safety
// `pool` and `img` must be live handles, `task` a NUL-terminated string and
// `stats` writable.
enum CpStatus cp_pool_predict(const struct CpPool *pool,
                              const char *task,
                              const struct CpImage *img,
                              struct CpStats *stats);

// Transfer `img` to the statistics the named task's prompter predicts.
//
// # Safety
// `pool` and `img` must be live handles, `task` a NUL-terminated string and
// `out_img` writable.
enum CpStatus cp_recover(const struct CpPool *pool,
                         const char *task,
                         const struct CpImage *img,
                         struct CpImage **out_img);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLORPROMPT_H */
