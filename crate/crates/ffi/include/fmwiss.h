#ifndef FMWISS_H
#define FMWISS_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FMWISS_OK 0

/**
 * A required pointer argument was NULL.
 */
#define FMWISS_ERR_NULL 1

/**
 * A string argument was not valid UTF-8.
 */
#define FMWISS_ERR_UTF8 2

/**
 * The library panicked; the handle involved should be discarded.
 */
#define FMWISS_ERR_PANIC 3

#define FMWISS_ERR_DUPLICATE_CLASS 10

#define FMWISS_ERR_EMPTY_STEP 11

#define FMWISS_ERR_STEP_OUT_OF_RANGE 12

#define FMWISS_ERR_RESERVED_CLASS 13

#define FMWISS_ERR_ZERO_VECTOR 20

#define FMWISS_ERR_EMPTY_CLASS_SET 21

#define FMWISS_ERR_DIM_MISMATCH 22

#define FMWISS_ERR_BAD_PERCENTAGE 23

#define FMWISS_ERR_UNKNOWN_CLASS 24

#define FMWISS_ERR_EMPTY_FOREGROUND 25

#define FMWISS_ERR_SHAPE_MISMATCH 26

#define FMWISS_ERR_BACKEND_FAILURE 27

#define FMWISS_ERR_NO_FOREGROUND 30

#define FMWISS_ERR_BAD_TEMPERATURE 31

#define FMWISS_ERR_NOT_OLD_CLASS 40

#define FMWISS_ERR_EMPTY_BANK 41

#define FMWISS_ERR_NON_FINITE 50

#define FMWISS_ERR_MISSING_PSEUDO_LABELS 51

#define FMWISS_ERR_ID_OUT_OF_RANGE 60

#define FMWISS_ERR_MISSING_PREREQUISITE 70

#define FMWISS_ERR_CONFIG 71

#define FMWISS_ERR_FORMAT 80

#define FMWISS_ERR_IO 81

/**
 * Opaque memory bank.
 */
typedef struct FmwissBank FmwissBank;

/**
 * Opaque segmentation model.
 */
typedef struct FmwissModel FmwissModel;

/**
 * Opaque class schedule.
 */
typedef struct FmwissTaxonomy FmwissTaxonomy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *fmwiss_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fmwiss_version(void);

/**
 * Build a taxonomy from base classes and `n_steps` increments. Increment
 * `i` has `step_lens[i]` ids, stored back to back in `steps`.
 *
 * # Safety
 * Array arguments must point to at least the stated number of elements;
 * `out` must be a valid pointer.
 */
int32_t fmwiss_taxonomy_new(const uint16_t *base,
                            size_t n_base,
                            const uint16_t *steps,
                            const size_t *step_lens,
                            size_t n_steps,
                            struct FmwissTaxonomy **out);

/**
 * Number of steps including the base step; 0 for NULL.
 *
 * # Safety
 * `tax` must be NULL or a live handle.
 */
size_t fmwiss_taxonomy_num_steps(const struct FmwissTaxonomy *tax);

/**
 * # Safety
 * `tax` must be NULL or a handle not yet freed.
 */
void fmwiss_taxonomy_free(struct FmwissTaxonomy *tax);

/**
 * Load a student checkpoint trained up to `step` of `tax`, using the
 * default architecture.
 *
 * # Safety
 * `tax` must be a live handle, `path` a NUL-terminated string, and `out` a
 * valid pointer.
 */
int32_t fmwiss_model_load(const struct FmwissTaxonomy *tax,
                          size_t step,
                          const char *path,
                          struct FmwissModel **out);

/**
 * Output channels of the model (background included); 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fmwiss_model_num_classes(const struct FmwissModel *model);

/**
 * Predict a class-id map for an interleaved RGB image of `height x width`
 * pixels. Writes `height * width` ids to `labels`.
 *
 * # Safety
 * `rgb` must hold `3 * height * width` bytes and `labels` room for
 * `height * width` values.
 */
int32_t fmwiss_model_predict(const struct FmwissModel *model,
                             const uint8_t *rgb,
                             size_t height,
                             size_t width,
                             uint16_t *labels);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void fmwiss_model_free(struct FmwissModel *model);

/**
 * Read a memory-bank file. The capacity is taken from the file contents.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t fmwiss_bank_read(const char *path, struct FmwissBank **out);

/**
 * Crops stored for `class`, or 0 when the class has no archive.
 *
 * # Safety
 * `bank` must be NULL or a live handle.
 */
size_t fmwiss_bank_class_crops(const struct FmwissBank *bank, uint16_t class_id);

/**
 * Total crops across all classes; 0 for NULL.
 *
 * # Safety
 * `bank` must be NULL or a live handle.
 */
size_t fmwiss_bank_total_crops(const struct FmwissBank *bank);

/**
 * # Safety
 * `bank` must be NULL or a handle not yet freed.
 */
void fmwiss_bank_free(struct FmwissBank *bank);

/**
 * Keep the top `k_percent` of a row-major score map: writes 1 for kept
 * pixels and 0 elsewhere. Ties go to the earlier pixel.
 *
 * # Safety
 * `values` must hold `height * width` floats and `out` the same number of
 * bytes.
 */
int32_t fmwiss_binarize_topk(const float *values,
                             size_t height,
                             size_t width,
                             double k_percent,
                             uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FMWISS_H */
