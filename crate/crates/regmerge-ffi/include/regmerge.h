#ifndef REGMERGE_H
#define REGMERGE_H

/* Generated by cbindgen from the regmerge-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible `rm_*` call.
 */
typedef enum RmStatus {
  /**
   * The call succeeded.
   */
  RM_STATUS_OK = 0,
  /**
   * Reading or writing a file failed.
   */
  RM_STATUS_IO = 1,
  /**
   * An argument, path, or file content was rejected.
   */
  RM_STATUS_VALIDATION = 2,
  /**
   * A numerical failure: singular Gram system or diverged training.
   */
  RM_STATUS_NUMERICAL = 3,
  /**
   * Checkpoints disagree on layer names, shapes, or kinds.
   */
  RM_STATUS_TOPOLOGY = 4,
  /**
   * An internal invariant was violated; the handle state is unspecified.
   */
  RM_STATUS_PANIC = 5,
} RmStatus;

/**
 * A model checkpoint: named layers plus optional low-rank adapters.
 */
typedef struct RmCheckpoint RmCheckpoint;

/**
 * Per-layer Gram matrices captured during training.
 */
typedef struct RmGrams RmGrams;

/**
 * Incremental merge state: Gram accumulators plus the running merged model.
 */
typedef struct RmMergeState RmMergeState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rm_version(void);

/**
 * Message of the last failure on this thread, empty if none yet. The pointer
 * stays valid until the next failing `rm_*` call on the same thread.
 */
const char *rm_last_error_message(void);

/**
 * Load a checkpoint from a JSON file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
enum RmStatus rm_checkpoint_load(const char *path, struct RmCheckpoint **out);

/**
 * Write a checkpoint to a JSON file, creating parent directories.
 *
 * # Safety
 * `ckpt` must be a live handle; `path` must be NUL-terminated.
 */
enum RmStatus rm_checkpoint_save(const struct RmCheckpoint *ckpt, const char *path);

/**
 * Produce an adapter-free copy with every adapter delta added onto its host.
 *
 * # Safety
 * `ckpt` must be a live handle; `out` must point to writable storage.
 */
enum RmStatus rm_checkpoint_fold(const struct RmCheckpoint *ckpt, struct RmCheckpoint **out);

/**
 * Release a checkpoint handle. Null is a no-op.
 *
 * # Safety
 * `ckpt` must be null or a pointer obtained from this library, not yet freed.
 */
void rm_checkpoint_free(struct RmCheckpoint *ckpt);

/**
 * Load per-layer Gram matrices from a JSON file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
enum RmStatus rm_grams_load(const char *path, struct RmGrams **out);

/**
 * Write per-layer Gram matrices to a JSON file.
 *
 * # Safety
 * `grams` must be a live handle; `path` must be NUL-terminated.
 */
enum RmStatus rm_grams_save(const struct RmGrams *grams, const char *path);

/**
 * Release a Gram-map handle. Null is a no-op.
 *
 * # Safety
 * `grams` must be null or a pointer obtained from this library, not yet freed.
 */
void rm_grams_free(struct RmGrams *grams);

/**
 * Create an empty merge state.
 *
 * `lora_strategy` selects how adapter-bearing checkpoints merge:
 * `"composite"` or `"factor_mean"`; null means `"composite"`.
 *
 * # Safety
 * `lora_strategy` must be null or NUL-terminated; `out` must be writable.
 */
enum RmStatus rm_state_new(double ridge_scale,
                           double offdiag_scale,
                           const char *lora_strategy,
                           struct RmMergeState **out);

/**
 * Load a merge state from a JSON file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
enum RmStatus rm_state_load(const char *path, struct RmMergeState **out);

/**
 * Write a merge state to a JSON file.
 *
 * # Safety
 * `state` must be a live handle; `path` must be NUL-terminated.
 */
enum RmStatus rm_state_save(const struct RmMergeState *state, const char *path);

/**
 * Absorb one task checkpoint into the state. The checkpoint must be
 * adapter-free (see `rm_checkpoint_fold`); on failure the state is unchanged.
 *
 * # Safety
 * All three arguments must be live handles; `state` must not alias them.
 */
enum RmStatus rm_state_step(struct RmMergeState *state,
                            const struct RmCheckpoint *ckpt,
                            const struct RmGrams *grams);

/**
 * Number of tasks absorbed so far; 0 for a null handle.
 *
 * # Safety
 * `state` must be null or a live handle.
 */
uint64_t rm_state_task_count(const struct RmMergeState *state);

/**
 * Copy the current merged checkpoint out of the state. Fails on a fresh
 * state that has absorbed no tasks.
 *
 * # Safety
 * `state` must be a live handle; `out` must point to writable storage.
 */
enum RmStatus rm_state_merged(const struct RmMergeState *state, struct RmCheckpoint **out);

/**
 * Release a merge-state handle. Null is a no-op.
 *
 * # Safety
 * `state` must be null or a pointer obtained from this library, not yet freed.
 */
void rm_state_free(struct RmMergeState *state);

/**
 * Merge `n` checkpoints in one shot with their Gram matrices. `ckpts[i]`
 * pairs with `grams[i]`; all checkpoints must share one topology.
 *
 * # Safety
 * `ckpts` and `grams` must point to `n` live handles each; `lora_strategy`
 * must be null or NUL-terminated; `out` must point to writable storage.
 */
enum RmStatus rm_regmean(const struct RmCheckpoint *const *ckpts,
                         const struct RmGrams *const *grams,
                         size_t n,
                         double ridge_scale,
                         double offdiag_scale,
                         const char *lora_strategy,
                         struct RmCheckpoint **out);

/**
 * Evaluate a checkpoint on a dataset file; writes mean IoU, mean F1, and
 * mean absolute error through the three out pointers (any may be null).
 *
 * # Safety
 * `ckpt` must be a live handle; `dataset_path` must be NUL-terminated;
 * non-null metric pointers must be writable.
 */
enum RmStatus rm_eval(const struct RmCheckpoint *ckpt,
                      const char *dataset_path,
                      double *miou,
                      double *mf1,
                      double *mmae);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGMERGE_H */
