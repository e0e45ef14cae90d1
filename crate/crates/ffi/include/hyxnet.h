#ifndef HYXNET_H
#define HYXNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HyxnetAction {
  HYXNET_ACTION_NONE = 0,
  HYXNET_ACTION_ALERT = 1,
  HYXNET_ACTION_BLOCK_RECOMMEND = 2,
} HyxnetAction;

/**
 * Status codes. Values 2 to 4 match the command-line exit codes.
 */
typedef enum HyxnetStatus {
  HYXNET_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HYXNET_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or a string was not valid UTF-8.
   */
  HYXNET_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed input record or unreadable file.
   */
  HYXNET_STATUS_DATA = 3,
  /**
   * Checkpoint or dimension mismatch.
   */
  HYXNET_STATUS_MODEL = 4,
  /**
   * The output buffer is too small; the required size was written.
   */
  HYXNET_STATUS_BUFFER_TOO_SMALL = 5,
  HYXNET_STATUS_PANIC = 6,
} HyxnetStatus;

/**
 * Opaque detector handle.
 */
typedef struct HyxnetDetector HyxnetDetector;

/**
 * Outcome of classifying one record.
 */
typedef struct HyxnetResult {
  uint32_t class_index;
  float confidence;
  enum HyxnetAction action;
} HyxnetResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hyxnet_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *hyxnet_last_error_message(void);

/**
 * Loads a checkpoint file into a new detector written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HyxnetStatus hyxnet_detector_load(const char *path, struct HyxnetDetector **out);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `det` must come from [`hyxnet_detector_load`] and not be used afterwards.
 */
void hyxnet_detector_free(struct HyxnetDetector *det);

/**
 * Sets the alert confidence threshold, in (0, 1).
 *
 * # Safety
 * `det` must be a live handle not used concurrently from another thread.
 */
enum HyxnetStatus hyxnet_detector_set_threshold(struct HyxnetDetector *det, float threshold);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live handle.
 */
size_t hyxnet_detector_num_classes(const struct HyxnetDetector *det);

/**
 * Number of numeric features a record carries, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live handle.
 */
size_t hyxnet_detector_num_features(const struct HyxnetDetector *det);

/**
 * Copies the NUL-terminated name of class `index` into `buf`. `*len` receives
 * the name length without the terminator, also when the buffer is too small.
 *
 * # Safety
 * `buf` must hold `cap` bytes (it may be null when `cap` is 0).
 */
enum HyxnetStatus hyxnet_detector_class_name(const struct HyxnetDetector *det,
                                             size_t index,
                                             char *buf,
                                             size_t cap,
                                             size_t *len);

/**
 * Classifies one record given its query name and raw numeric features (in
 * schema order, `n` of them).
 *
 * # Safety
 * `qname` must be NUL-terminated, `numerics` must hold `n` values (it may be
 * null when `n` is 0) and `out` must be valid.
 */
enum HyxnetStatus hyxnet_detector_detect(const struct HyxnetDetector *det,
                                         const char *qname,
                                         const double *numerics,
                                         size_t n,
                                         struct HyxnetResult *out);

/**
 * Parses and classifies one delimited record laid out per the checkpoint
 * schema (the label column, if the schema has one, may be empty).
 *
 * # Safety
 * `line` must be NUL-terminated and `out` valid.
 */
enum HyxnetStatus hyxnet_detector_detect_line(const struct HyxnetDetector *det,
                                              const char *line,
                                              char delimiter,
                                              struct HyxnetResult *out);

/**
 * Hash bucket of one domain label with the default bucket count.
 *
 * # Safety
 * `label` must be NUL-terminated and `out` valid.
 */
enum HyxnetStatus hyxnet_bucketize(const char *label, uint32_t *out);

/**
 * Left-padded token ids of a query name with the default length and bucket
 * count. `*len` receives the sequence length, also when `cap` is too small.
 *
 * # Safety
 * `out` must hold `cap` values and `qname` be NUL-terminated.
 */
enum HyxnetStatus hyxnet_tokenize(const char *qname, uint32_t *out, size_t cap, size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYXNET_H */
