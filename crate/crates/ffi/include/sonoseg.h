#ifndef SONOSEG_H
#define SONOSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by all functions.
 */
typedef enum SonosegStatus {
  SONOSEG_STATUS_OK = 0,
  SONOSEG_STATUS_NULL_POINTER = 1,
  SONOSEG_STATUS_INVALID_ARGUMENT = 2,
  SONOSEG_STATUS_IO = 3,
  SONOSEG_STATUS_CHECKPOINT = 4,
  SONOSEG_STATUS_SHAPE = 5,
  SONOSEG_STATUS_NO_PROMPT = 6,
  SONOSEG_STATUS_INVALID_PROMPT = 7,
  SONOSEG_STATUS_INTERNAL = 8,
  SONOSEG_STATUS_BUFFER_TOO_SMALL = 9,
} SonosegStatus;

/**
 * Opaque model handle.
 */
typedef struct SonosegModel SonosegModel;

/**
 * Opaque per-image session holding the cached embedding and the prompts so far.
 */
typedef struct SonosegSession SonosegSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated, truncated
 * to fit). Returns the full message length excluding the terminator, or 0 if none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sonoseg_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by the toolkit.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SonosegStatus sonoseg_model_load(const char *path, struct SonosegModel **out);

/**
 * Releases a model. Sessions opened on it must be freed first.
 *
 * # Safety
 * `model` must be null or a handle from [`sonoseg_model_load`] not yet freed.
 */
void sonoseg_model_free(struct SonosegModel *model);

/**
 * Total parameter count of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sonoseg_model_parameter_count(const struct SonosegModel *model);

/**
 * Encodes a row-major 8-bit grayscale image and opens a session on it.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `height * width` bytes and
 * `out` must be a valid pointer. The session must not outlive the model.
 */
enum SonosegStatus sonoseg_session_new(const struct SonosegModel *model,
                                       const uint8_t *pixels,
                                       size_t height,
                                       size_t width,
                                       struct SonosegSession **out);

/**
 * # Safety
 * `session` must be null or a live session handle.
 */
void sonoseg_session_free(struct SonosegSession *session);

/**
 * Appends a click at column `x`, row `y`. `positive` is nonzero for foreground.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum SonosegStatus sonoseg_session_add_point(struct SonosegSession *session,
                                             size_t x,
                                             size_t y,
                                             int32_t positive);

/**
 * Sets the box prompt covering columns `x0..x1` and rows `y0..y1`, replacing any previous box.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum SonosegStatus sonoseg_session_set_box(struct SonosegSession *session,
                                           size_t x0,
                                           size_t y0,
                                           size_t x1,
                                           size_t y1);

/**
 * Drops every prompt of the session.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum SonosegStatus sonoseg_session_clear(struct SonosegSession *session);

/**
 * Writes the predicted mask (0 or 1 per pixel, row-major) into `mask`.
 *
 * # Safety
 * `session` must be a live session whose model is alive; `mask` must point to `len`
 * writable bytes.
 */
enum SonosegStatus sonoseg_session_predict(const struct SonosegSession *session,
                                           uint8_t *mask,
                                           size_t len);

/**
 * Dice similarity of two binary masks of `len` bytes (nonzero means foreground).
 *
 * # Safety
 * `a` and `b` must point to `len` readable bytes and `out` must be valid.
 */
enum SonosegStatus sonoseg_dsc(const uint8_t *a, const uint8_t *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SONOSEG_H */
