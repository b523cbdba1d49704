#ifndef BMIM_H
#define BMIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a library call.
 */
typedef enum BmimStatus {
  BMIM_STATUS_OK = 0,
  BMIM_STATUS_NULL_ARGUMENT = 1,
  BMIM_STATUS_INVALID_UTF8 = 2,
  BMIM_STATUS_CONFIG = 3,
  BMIM_STATUS_DATA = 4,
  BMIM_STATUS_CHECKPOINT = 5,
  BMIM_STATUS_IO = 6,
  BMIM_STATUS_NON_FINITE = 7,
  BMIM_STATUS_INTERNAL = 8,
} BmimStatus;

/**
 * Opaque model handle.
 */
typedef struct BmimModel BmimModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *bmim_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bmim_version(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
enum BmimStatus bmim_model_load(const char *dir, struct BmimModel **out);

/**
 * Trains a model. `config_json` is a flat dotted-key config object (null
 * for defaults); `dev_path` may be null to select on the training data.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum BmimStatus bmim_train(const char *config_json,
                           const char *train_path,
                           const char *dev_path,
                           struct BmimModel **out);

/**
 * Writes the model as a checkpoint directory.
 *
 * # Safety
 * `model` is a live handle; `dir` is NUL-terminated.
 */
enum BmimStatus bmim_model_save(const struct BmimModel *model, const char *dir);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void bmim_model_free(struct BmimModel *model);

/**
 * Predicts one dialog. Input: `{"utterances": [{"text": ...} | {"tokens": [...]} | "..."]}`.
 * Output: `{"sentiment": [...], "act": [...], "sentiment_probs": [[...]], "act_probs": [[...]]}`.
 *
 * # Safety
 * `model` is a live handle; `dialog_json` is NUL-terminated; `out_json` is writable.
 */
enum BmimStatus bmim_model_predict_json(const struct BmimModel *model,
                                        const char *dialog_json,
                                        char **out_json);

/**
 * Scores the model on a JSONL corpus. `protocol` is `"mastodon"`,
 * `"dailydialog"`, or null for the one the model was trained with.
 *
 * # Safety
 * `model` is a live handle; strings are null or NUL-terminated; `out_json` is writable.
 */
enum BmimStatus bmim_model_evaluate(const struct BmimModel *model,
                                    const char *data_path,
                                    const char *protocol,
                                    char **out_json);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` is null or a string from this library not yet freed.
 */
void bmim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BMIM_H */
