#ifndef DRESSING_H
#define DRESSING_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Prompt rewriting used by [`dress_sample`].
 */
typedef enum DressEnrich {
  DRESS_ENRICH_TEMPLATE = 0,
  DRESS_ENRICH_OFF = 1,
  /**
   * Uses the `endpoint` argument; falls back to the template on failure.
   */
  DRESS_ENRICH_EXTERNAL = 2,
} DressEnrich;

/**
 * Trainability mode for parameter reports.
 */
typedef enum DressMode {
  DRESS_MODE_FINETUNING = 0,
  DRESS_MODE_ONLY_LORA = 1,
  DRESS_MODE_ONLY_ADAPTER = 2,
  DRESS_MODE_FULL = 3,
} DressMode;

/**
 * Result code of every call.
 */
typedef enum DressStatus {
  DRESS_STATUS_OK = 0,
  DRESS_STATUS_NULL_ARGUMENT = 1,
  DRESS_STATUS_INVALID_ARGUMENT = 2,
  DRESS_STATUS_FORMAT = 3,
  DRESS_STATUS_IO = 4,
  DRESS_STATUS_RUNTIME = 5,
  DRESS_STATUS_PANIC = 6,
} DressStatus;

/**
 * An RGB image, 8 bits per channel, interleaved rows.
 */
typedef struct DressImage DressImage;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct DressModel DressModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *dress_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dress_version(void);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a write.
 */
enum DressStatus dress_model_load(const char *path, struct DressModel **out);

/**
 * # Safety
 * `model` must be null or a pointer from [`dress_model_load`] not yet freed.
 */
void dress_model_free(struct DressModel *model);

/**
 * Copies `width * height * 3` bytes of interleaved RGB into a new image.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be valid for a write.
 */
enum DressStatus dress_image_new(size_t width,
                                 size_t height,
                                 const uint8_t *data,
                                 size_t len,
                                 struct DressImage **out);

/**
 * Reads a binary PPM file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a write.
 */
enum DressStatus dress_image_load_ppm(const char *path, struct DressImage **out);

/**
 * Writes a binary PPM file.
 *
 * # Safety
 * `image` must be a live image and `path` a NUL-terminated string.
 */
enum DressStatus dress_image_save_ppm(const struct DressImage *image, const char *path);

/**
 * # Safety
 * `image` must be null or a live image.
 */
size_t dress_image_width(const struct DressImage *image);

/**
 * # Safety
 * `image` must be null or a live image.
 */
size_t dress_image_height(const struct DressImage *image);

/**
 * Interleaved RGB bytes (`width * height * 3`), owned by the image.
 *
 * # Safety
 * `image` must be null or a live image.
 */
const uint8_t *dress_image_data(const struct DressImage *image);

/**
 * # Safety
 * `image` must be null or a pointer from this library not yet freed.
 */
void dress_image_free(struct DressImage *image);

/**
 * Renders a reference garment on the neutral ground. `pattern` is one of
 * `solid`, `stripes`, `checker`, `dots`; colors are palette names.
 *
 * # Safety
 * String arguments must be NUL-terminated and `out` valid for a write.
 */
enum DressStatus dress_render_reference(const char *pattern,
                                        const char *fg,
                                        const char *bg,
                                        size_t scale,
                                        struct DressImage **out);

/**
 * Generates one image. `endpoint` is read only with
 * [`DressEnrich::External`].
 *
 * # Safety
 * `model` and `reference` must be live objects, `prompt` a NUL-terminated
 * string, `endpoint` null or NUL-terminated, and `out` valid for a write.
 */
enum DressStatus dress_sample(const struct DressModel *model,
                              const struct DressImage *reference,
                              const char *prompt,
                              uint64_t seed,
                              size_t steps,
                              double guidance,
                              enum DressEnrich enrich,
                              const char *endpoint,
                              struct DressImage **out);

/**
 * Texture similarity of the garment region of two 32×32 images.
 *
 * # Safety
 * Both images must be live and `out` valid for a write.
 */
enum DressStatus dress_texture_sim(const struct DressImage *generated,
                                   const struct DressImage *reference,
                                   double *out);

/**
 * Writes a synthetic dataset directory.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum DressStatus dress_gen_data(size_t n, uint64_t seed, const char *out_dir);

/**
 * Parameter report for the default architecture as JSON. Release the
 * string with [`dress_string_free`].
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum DressStatus dress_param_report_json(enum DressMode mode, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void dress_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRESSING_H */
