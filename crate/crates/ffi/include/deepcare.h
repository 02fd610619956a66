#ifndef DEEPCARE_H
#define DEEPCARE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_UTF8 = 2,
  DC_STATUS_IO = 3,
  DC_STATUS_PARSE = 4,
  DC_STATUS_INVALID_RECORD = 5,
  DC_STATUS_INVALID_ARGUMENT = 6,
  DC_STATUS_SHAPE = 7,
  DC_STATUS_CHECKPOINT = 8,
  /**
   * Output buffer too small or index out of range.
   */
  DC_STATUS_OUT_OF_RANGE = 9,
  DC_STATUS_GRADCHECK_FAILED = 10,
  DC_STATUS_PANIC = 255,
} DcStatus;

/**
 * A loaded checkpoint: model parameters plus the code vocabulary.
 */
typedef struct DcModel DcModel;

/**
 * Patient records coded against one model's vocabulary.
 */
typedef struct DcRecords DcRecords;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. Valid until the next call into the library on this thread.
 */
const char *dc_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *dc_version(void);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
DcStatus dc_model_load(const char *path, DcModel **out);

/**
 * # Safety
 * `model` is null or came from [`dc_model_load`] and is not used again.
 */
void dc_model_free(DcModel *model);

/**
 * Size of the diagnosis vocabulary, 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t dc_model_n_diagnoses(const DcModel *model);

/**
 * Copies diagnosis code `index` as a NUL-terminated string into `buf`.
 * `*needed` (if non-null) receives the buffer size required, including
 * the terminator, even when `buf_len` is too small.
 *
 * # Safety
 * `model` is a live handle; `buf` has `buf_len` writable bytes or is null
 * with `buf_len == 0`.
 */
DcStatus dc_model_diagnosis_code(const DcModel *model,
                                 size_t index,
                                 char *buf,
                                 size_t buf_len,
                                 size_t *needed);

/**
 * Reads a JSONL patient file against the model's vocabulary.
 *
 * # Safety
 * `model` is a live handle, `path` a NUL-terminated string, `out` writable.
 */
DcStatus dc_records_load(const DcModel *model, const char *path, DcRecords **out);

/**
 * # Safety
 * `records` is null or came from [`dc_records_load`] and is not used again.
 */
void dc_records_free(DcRecords *records);

/**
 * Number of patients, 0 for a null handle.
 *
 * # Safety
 * `records` is null or a live handle.
 */
size_t dc_records_len(const DcRecords *records);

/**
 * Writes one risk probability per patient into `out[0..len]`; `len` must
 * equal [`dc_records_len`].
 *
 * # Safety
 * Handles are live; `out` has `len` writable doubles.
 */
DcStatus dc_predict_risk(const DcModel *model, const DcRecords *records, double *out, size_t len);

/**
 * Top `k` diagnosis indices for the admission after patient `index`'s
 * last one, most probable first, ties by ascending index.
 *
 * # Safety
 * Handles are live; `out` has `k` writable entries.
 */
DcStatus dc_next_diagnoses(const DcModel *model,
                           const DcRecords *records,
                           size_t index,
                           size_t *out,
                           size_t k);

/**
 * Runs the built-in gradient check. `*max_rel_error` (if non-null)
 * receives the worst error over all cases; the status is
 * `DC_STATUS_GRADCHECK_FAILED` when it reaches `tolerance`.
 *
 * # Safety
 * `max_rel_error` is null or writable.
 */
DcStatus dc_gradcheck(uint64_t seed, double h, double tolerance, double *max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPCARE_H */
