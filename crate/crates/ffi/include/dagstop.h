#ifndef DAGSTOP_H
#define DAGSTOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DAGSTOP_STATUS_OK = 0,
  DAGSTOP_STATUS_NULL_POINTER = 1,
  DAGSTOP_STATUS_INVALID_UTF8 = 2,
  DAGSTOP_STATUS_INVALID_ARGUMENT = 3,
  DAGSTOP_STATUS_OUT_OF_RANGE = 4,
  DAGSTOP_STATUS_DIMENSION_MISMATCH = 5,
  DAGSTOP_STATUS_DUPLICATE_ID = 6,
  DAGSTOP_STATUS_IO = 7,
  DAGSTOP_STATUS_PARSE = 8,
  DAGSTOP_STATUS_PANIC = 9,
} DagstopStatus;

typedef enum {
  DAGSTOP_COMPLETION_STATUS_ACCOMPLISHED = 0,
  DAGSTOP_COMPLETION_STATUS_PARTIALLY_ACCOMPLISHED = 1,
  DAGSTOP_COMPLETION_STATUS_NOT_ACCOMPLISHED = 2,
} DagstopCompletionStatus;

/**
 * Parsed critic judgment.
 */
typedef struct DagstopJudgment DagstopJudgment;

/**
 * Allowed agent names.
 */
typedef struct DagstopRegistry DagstopRegistry;

/**
 * Result of validating one plan text.
 */
typedef struct DagstopReport DagstopReport;

/**
 * Embedded trajectory store.
 */
typedef struct DagstopStore DagstopStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dagstop_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed. NULL is ignored.
 */
void dagstop_string_free(char *s);

DagstopRegistry *dagstop_registry_new(void);

/**
 * Appends an agent name. Duplicates and blank names are rejected.
 *
 * # Safety
 * `registry` must be a live handle; `name` a NUL-terminated string.
 */
DagstopStatus dagstop_registry_add(DagstopRegistry *registry, const char *name);

/**
 * # Safety
 * `registry` must be a live handle or NULL.
 */
size_t dagstop_registry_len(const DagstopRegistry *registry);

/**
 * # Safety
 * `registry` must come from `dagstop_registry_new` and not have been freed.
 */
void dagstop_registry_free(DagstopRegistry *registry);

/**
 * Validates plan text. Invalid plans still return OK; inspect the report.
 *
 * # Safety
 * `plan_text` must be NUL-terminated, `registry` a live handle, `out` writable.
 */
DagstopStatus dagstop_validate(const char *plan_text,
                               const DagstopRegistry *registry,
                               DagstopReport **out);

/**
 * # Safety
 * `report` must be a live handle or NULL.
 */
bool dagstop_report_is_valid(const DagstopReport *report);

/**
 * # Safety
 * `report` must be a live handle or NULL.
 */
size_t dagstop_report_error_count(const DagstopReport *report);

/**
 * Writes the static code name of error `index` (not to be freed).
 *
 * # Safety
 * `report` must be a live handle; `out` writable.
 */
DagstopStatus dagstop_report_error_code(const DagstopReport *report,
                                        size_t index,
                                        const char **out);

/**
 * Writes a copy of the message of error `index`.
 *
 * # Safety
 * `report` must be a live handle; `out` writable.
 */
DagstopStatus dagstop_report_error_message(const DagstopReport *report, size_t index, char **out);

/**
 * # Safety
 * `report` must be a live handle; `out` writable.
 */
DagstopStatus dagstop_report_to_json(const DagstopReport *report, char **out);

/**
 * # Safety
 * `report` must come from `dagstop_validate` and not have been freed.
 */
void dagstop_report_free(DagstopReport *report);

/**
 * Re-serializes plan text in canonical form.
 *
 * # Safety
 * `plan_text` must be NUL-terminated; `out` writable.
 */
DagstopStatus dagstop_normalize_plan(const char *plan_text, char **out);

/**
 * Serializes the first `stop_index` steps (1..=N).
 *
 * # Safety
 * `plan_text` must be NUL-terminated; `out` writable.
 */
DagstopStatus dagstop_truncate_plan(const char *plan_text, size_t stop_index, char **out);

/**
 * Builds the planner repair prompt without evaluation feedback. `report`
 * may be NULL for an empty issue list.
 *
 * # Safety
 * String arguments must be NUL-terminated; `report` live or NULL; `out` writable.
 */
DagstopStatus dagstop_build_repair_prompt(const char *base_prompt,
                                          const char *original_plan,
                                          const DagstopReport *report,
                                          char **out);

/**
 * Parses raw critic output. Never fails on content; unparseable text yields
 * the safe default judgment.
 *
 * # Safety
 * `raw` must be NUL-terminated; `out` writable.
 */
DagstopStatus dagstop_parse_critic_output(const char *raw, DagstopJudgment **out);

/**
 * # Safety
 * `judgment` must be a live handle; `out` writable.
 */
DagstopStatus dagstop_judgment_status(const DagstopJudgment *judgment,
                                      DagstopCompletionStatus *out);

/**
 * # Safety
 * `judgment` must be a live handle or NULL.
 */
bool dagstop_judgment_can_answer_now(const DagstopJudgment *judgment);

/**
 * False when the safe default was substituted.
 *
 * # Safety
 * `judgment` must be a live handle or NULL.
 */
bool dagstop_judgment_parse_recovered(const DagstopJudgment *judgment);

/**
 * # Safety
 * `judgment` must be a live handle or NULL.
 */
bool dagstop_judgment_should_stop(const DagstopJudgment *judgment);

/**
 * # Safety
 * `judgment` must be a live handle; `out` writable.
 */
DagstopStatus dagstop_judgment_rationale(const DagstopJudgment *judgment, char **out);

/**
 * # Safety
 * `judgment` must come from `dagstop_parse_critic_output` and not have been freed.
 */
void dagstop_judgment_free(DagstopJudgment *judgment);

/**
 * Stop predicate on raw fields.
 */
bool dagstop_should_stop(DagstopCompletionStatus status, bool can_answer_now);

/**
 * # Safety
 * `out` must be writable.
 */
DagstopStatus dagstop_store_new(size_t dimension, DagstopStore **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
DagstopStatus dagstop_store_load(const char *path, size_t dimension, DagstopStore **out);

/**
 * # Safety
 * `store` must be a live handle; `path` NUL-terminated.
 */
DagstopStatus dagstop_store_save(const DagstopStore *store, const char *path);

/**
 * # Safety
 * `store` must be a live handle or NULL.
 */
size_t dagstop_store_len(const DagstopStore *store);

/**
 * # Safety
 * String arguments must be NUL-terminated; `embedding` must point to `len`
 * floats; `store` must be a live handle not used concurrently.
 */
DagstopStatus dagstop_store_insert(DagstopStore *store,
                                   const char *id,
                                   const char *agent_name,
                                   const char *task_text,
                                   DagstopCompletionStatus status,
                                   const char *summary,
                                   const float *embedding,
                                   size_t len);

/**
 * Nearest neighbors as a JSON array of `{id, distance, rank}`. `agent_name`
 * may be NULL; `status_filter` NULL disables the status filter.
 *
 * # Safety
 * `store` must be a live handle; `query` must point to `len` floats;
 * `agent_name` NUL-terminated or NULL; `status_filter` readable or NULL;
 * `out` writable.
 */
DagstopStatus dagstop_store_nearest(const DagstopStore *store,
                                    const float *query,
                                    size_t len,
                                    size_t k,
                                    const char *agent_name,
                                    const DagstopCompletionStatus *status_filter,
                                    char **out);

/**
 * # Safety
 * `store` must come from this library and not have been freed.
 */
void dagstop_store_free(DagstopStore *store);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAGSTOP_H */
