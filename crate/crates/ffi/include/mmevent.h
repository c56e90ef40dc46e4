#ifndef MMEVENT_H
#define MMEVENT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmeStatus {
  MME_STATUS_OK = 0,
  MME_STATUS_NULL_ARGUMENT = 1,
  MME_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration or input data.
   */
  MME_STATUS_CONFIG = 3,
  MME_STATUS_IO = 4,
  /**
   * Augmentation cache entries are missing; run augmentation first.
   */
  MME_STATUS_MISSING_CACHE = 5,
  /**
   * Gold and predictions are inconsistent.
   */
  MME_STATUS_EVALUATION = 6,
  MME_STATUS_RUNTIME = 7,
  MME_STATUS_PANIC = 8,
} MmeStatus;

/**
 * Trained mention and argument models.
 */
typedef struct MmeBundle MmeBundle;

/**
 * A validated run configuration.
 */
typedef struct MmeConfig MmeConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mme_last_error(void);

/**
 * Library version as a static string.
 */
const char *mme_version(void);

/**
 * Loads and validates a TOML run configuration. `overrides` holds
 * `n_overrides` strings of the form `key.path=value`; it may be null when
 * `n_overrides` is 0.
 *
 * # Safety
 * `path` and every override must be NUL-terminated; `out` must be writable.
 */
enum MmeStatus mme_config_load(const char *path,
                               const char *const *overrides,
                               uintptr_t n_overrides,
                               struct MmeConfig **out);

/**
 * # Safety
 * `cfg` must come from [`mme_config_load`] and not be used afterwards.
 */
void mme_config_free(struct MmeConfig *cfg);

/**
 * Loads a `bundle.json` written by training, or a single checkpoint used
 * for every task.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum MmeStatus mme_bundle_load(const char *path, struct MmeBundle **out);

/**
 * # Safety
 * `bundle` must come from [`mme_bundle_load`] and not be used afterwards.
 */
void mme_bundle_free(struct MmeBundle *bundle);

/**
 * Fills the augmentation cache (both directions). The JSON manifest is
 * returned through `out_json`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_json` must be writable.
 */
enum MmeStatus mme_augment(const struct MmeConfig *cfg, char **out_json);

/**
 * Trains under the configured schedule. `ablation` is null for the full
 * run, otherwise one of `combined`, `one-round`, `no-augmentation`,
 * `no-adapter`. The training manifest is returned as JSON.
 *
 * # Safety
 * `cfg` must be a live handle; `ablation` null or NUL-terminated;
 * `out_json` writable.
 */
enum MmeStatus mme_train(const struct MmeConfig *cfg, const char *ablation, char **out_json);

/**
 * Predicts every document of `input` (JSON lines) and writes unmerged
 * predictions to `output`.
 *
 * # Safety
 * Handles must be live and paths NUL-terminated.
 */
enum MmeStatus mme_predict(const struct MmeConfig *cfg,
                           const struct MmeBundle *bundle,
                           const char *input,
                           const char *output);

/**
 * Merges and scores `predictions` against `gold`. A NaN `threshold` uses
 * the configured merge threshold. The report is returned as JSON.
 *
 * # Safety
 * `cfg` must be live; paths NUL-terminated; `out_json` writable.
 */
enum MmeStatus mme_eval(const struct MmeConfig *cfg,
                        const char *gold,
                        const char *predictions,
                        double threshold,
                        char **out_json);

/**
 * Releases a string returned through an `out_json` parameter.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mme_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMEVENT_H */
