#ifndef BROOK_H
#define BROOK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI's exit codes.
 */
typedef enum BrookStatus {
  BrookOk = 0,
  BrookErr = 1,
  BrookErrConfig = 2,
  BrookErrData = 3,
  BrookErrNumerical = 4,
  BrookErrNullArg = 5,
} BrookStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct BrookModel BrookModel;

/**
 * Opaque handle to one streaming decode in progress.
 */
typedef struct BrookSession BrookSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL if none.
 * The pointer is invalidated by the next failing call on the same thread.
 */
const char *brook_last_error(void);

/**
 * Loads a model checkpoint. Returns NULL on failure (see `brook_last_error`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct BrookModel *brook_model_load(const char *path);

/**
 * # Safety
 * `model` must come from `brook_model_load` and not yet be freed; all
 * sessions created from it must already be freed.
 */
void brook_model_free(struct BrookModel *model);

/**
 * Pre-stacking feature dimension the model expects.
 *
 * # Safety
 * `model` must be a live handle from `brook_model_load`.
 */
uintptr_t brook_model_feat_dim(const struct BrookModel *model);

/**
 * Chunk size in post-stacking encoder frames (the maximum rows per push).
 *
 * # Safety
 * `model` must be a live handle from `brook_model_load`.
 */
uintptr_t brook_model_chunk_frames(const struct BrookModel *model);

/**
 * Starts a streaming decode. Returns NULL on failure.
 *
 * # Safety
 * `model` must be a live handle and must outlive the returned session.
 */
struct BrookSession *brook_session_new(const struct BrookModel *model, uintptr_t beam);

/**
 * # Safety
 * `session` must come from `brook_session_new` and not yet be freed.
 */
void brook_session_free(struct BrookSession *session);

/**
 * Pushes `rows` post-stacking frames (row-major, `rows` x stacked dim,
 * 1 <= rows <= chunk_frames). Tokens confirmed so far grow monotonically;
 * read them back with `brook_session_confirmed`.
 *
 * # Safety
 * `session` must be live; `frames` must point to `rows * stacked_dim`
 * readable floats (stacked dim = 4 x `brook_model_feat_dim`).
 */
enum BrookStatus brook_session_push(struct BrookSession *session,
                                    const float *frames,
                                    uintptr_t rows);

/**
 * Flushes buffered frames and fixes the final transcript.
 *
 * # Safety
 * `session` must be live.
 */
enum BrookStatus brook_session_finalize(struct BrookSession *session);

/**
 * Copies up to `cap` confirmed tokens into `out` and returns the total
 * number available (call with `out = NULL` to size the buffer).
 *
 * # Safety
 * `session` must be live; `out` must be NULL or point to `cap` writable u32s.
 */
uintptr_t brook_session_confirmed(const struct BrookSession *session, uint32_t *out, uintptr_t cap);

/**
 * Like `brook_session_confirmed` but for the current best hypothesis's
 * not-yet-confirmed tail (empty after finalize).
 *
 * # Safety
 * Same contract as `brook_session_confirmed`.
 */
uintptr_t brook_session_provisional(const struct BrookSession *session,
                                    uint32_t *out,
                                    uintptr_t cap);

/**
 * One-shot decode of a whole utterance given raw pre-stacking features
 * (row-major, `rows` x `brook_model_feat_dim`). Writes up to `cap` tokens
 * to `out` and stores the full count in `*out_len`.
 *
 * # Safety
 * `model` must be live; `frames` must point to `rows * feat_dim` readable
 * floats; `out` must be NULL or point to `cap` writable u32s; `out_len`
 * must be writable.
 */
enum BrookStatus brook_decode(const struct BrookModel *model,
                              const float *frames,
                              uintptr_t rows,
                              uintptr_t beam,
                              uint32_t *out,
                              uintptr_t cap,
                              uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BROOK_H */
