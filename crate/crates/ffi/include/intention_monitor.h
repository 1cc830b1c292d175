#ifndef INTENTION_MONITOR_H
#define INTENTION_MONITOR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum ImStatus {
  IM_STATUS_OK = 0,
  // A required pointer argument was null.
  IM_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  IM_STATUS_INVALID_UTF8 = 2,
  // Bad configuration or argument value.
  IM_STATUS_INVALID_ARGUMENT = 3,
  // File system error.
  IM_STATUS_IO = 4,
  // Input data could not be parsed or is inconsistent.
  IM_STATUS_DATA = 5,
  // Address, transaction or artifact not found.
  IM_STATUS_NOT_FOUND = 6,
  IM_STATUS_INTERNAL = 7,
  // A Rust panic was caught at the boundary.
  IM_STATUS_PANIC = 8,
} ImStatus;

// Stage runner bound to one output directory.
typedef struct ImPipeline ImPipeline;

// Parsed transaction store.
typedef struct ImStore ImStore;

// Hourly feature rows of one address in the full schema.
typedef struct ImTimeline ImTimeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call on this thread.
const char *im_last_error_message(void);

// Library version as a static string.
const char *im_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void im_string_free(char *s);

// Loads a `transactions.jsonl` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ImStatus im_store_open(const char *path, struct ImStore **out);

// Parses JSONL transaction records from memory.
//
// # Safety
// `data` must point to `len` readable bytes and `out` be a valid pointer.
enum ImStatus im_store_from_jsonl(const uint8_t *data, size_t len, struct ImStore **out);

// # Safety
// `store` must come from `im_store_open`/`im_store_from_jsonl` or be null.
void im_store_free(struct ImStore *store);

// Accepted transaction and distinct address counts.
//
// # Safety
// `store` must be a live handle; the out pointers may be null.
enum ImStatus im_store_counts(const struct ImStore *store, size_t *n_tx, size_t *n_addr);

// Full-schema column names as a JSON array of strings.
//
// # Safety
// `out` must be a valid pointer.
enum ImStatus im_feature_names_json(char **out);

// Hourly feature timeline of `address` over `hours` steps with default path settings.
//
// # Safety
// `store` must be a live handle, `address` NUL-terminated, `out` valid.
enum ImStatus im_timeline_new(const struct ImStore *store,
                              const char *address,
                              size_t hours,
                              struct ImTimeline **out);

// # Safety
// `tl` must come from `im_timeline_new` or be null.
void im_timeline_free(struct ImTimeline *tl);

// Row count and row width.
//
// # Safety
// `tl` must be a live handle; the out pointers may be null.
enum ImStatus im_timeline_shape(const struct ImTimeline *tl, size_t *rows, size_t *cols);

// Copies the rows, row-major, into `buf` of `len` doubles (at least rows x cols).
//
// # Safety
// `tl` must be a live handle and `buf` writable for `len` doubles.
enum ImStatus im_timeline_copy(const struct ImTimeline *tl, double *buf, size_t len);

// Evaluates `n_addr` traces of `n_steps` probabilities each (row-major) and
// writes the report as JSON.
//
// # Safety
// `p` must hold `n_addr * n_steps` doubles, `labels` `n_addr` bytes, `out` be valid.
enum ImStatus im_evaluate_json(const double *p,
                               const uint8_t *labels,
                               size_t n_addr,
                               size_t n_steps,
                               char **out);

// Opens a pipeline on `out_dir` with an optional JSON config file (null for defaults).
//
// # Safety
// `out_dir` must be NUL-terminated, `config` NUL-terminated or null, `out` valid.
enum ImStatus im_pipeline_open(const char *out_dir, const char *config, struct ImPipeline **out);

// # Safety
// `p` must come from `im_pipeline_open` or be null.
void im_pipeline_free(struct ImPipeline *p);

// Runs one stage by name (`synth`, `ingest`, ..., `eval`, or `run` for
// ingest through eval).
//
// # Safety
// `p` must be a live handle and `stage` NUL-terminated.
enum ImStatus im_pipeline_stage(const struct ImPipeline *p, const char *stage);

// `explain` for one address, as JSON.
//
// # Safety
// `p` must be a live handle, `address` NUL-terminated, `out` valid.
enum ImStatus im_pipeline_explain_json(const struct ImPipeline *p, const char *address, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTENTION_MONITOR_H */
