#ifndef ROBUSTNAS_H
#define ROBUSTNAS_H

/* Generated by cbindgen from robustnas-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a fallible call.
 */
typedef enum RnasStatus {
  RNAS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RNAS_STATUS_NULL_ARG = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  RNAS_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration failed to parse or validate.
   */
  RNAS_STATUS_BAD_CONFIG = 3,
  /**
   * The engine reported an error while running.
   */
  RNAS_STATUS_RUN_FAILED = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  RNAS_STATUS_PANICKED = 5,
} RnasStatus;

/**
 * A parsed and validated experiment configuration.
 */
typedef struct RnasExperiment RnasExperiment;

/**
 * The outcome of one completed run.
 */
typedef struct RnasResult RnasResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; the empty string when
 * nothing has failed. The pointer stays valid until the next failing call
 * on the same thread.
 */
const char *rnas_last_error(void);

/**
 * Library version as a static string.
 */
const char *rnas_version(void);

/**
 * Number of distinct genotypes in a named space preset (e.g. 81 for "T5").
 */
enum RnasStatus rnas_space_size(const char *name, size_t *out);

/**
 * Parse and validate a JSON experiment configuration (the same document a
 * run echoes to `config.json`). Returns `NULL` on error.
 */
struct RnasExperiment *rnas_experiment_from_json(const char *json);

void rnas_experiment_free(struct RnasExperiment *exp);

/**
 * Execute the experiment into `out_dir` (created if missing), writing the
 * usual run artifacts there. Returns `NULL` on error.
 */
struct RnasResult *rnas_experiment_run(const struct RnasExperiment *exp, const char *out_dir);

/**
 * The returned genotype as a string; reclaim with [`rnas_string_free`].
 */
char *rnas_result_genotype(const struct RnasResult *res);

/**
 * The full result document as pretty-printed JSON; reclaim with
 * [`rnas_string_free`].
 */
char *rnas_result_json(const struct RnasResult *res);

/**
 * Test regret against the configured oracle; NaN when no oracle was given.
 */
double rnas_result_test_regret(const struct RnasResult *res);

/**
 * Final dominant eigenvalue of the architecture Hessian; NaN when the
 * strategy does not track curvature.
 */
double rnas_result_final_lambda_max(const struct RnasResult *res);

/**
 * Epoch whose snapshot was returned when early stopping fired, else -1.
 */
int64_t rnas_result_stop_epoch(const struct RnasResult *res);

/**
 * Number of search epochs actually run.
 */
uint64_t rnas_result_epochs_run(const struct RnasResult *res);

void rnas_result_free(struct RnasResult *res);

/**
 * Run the built-in analytic self-checks; returns the number of failing
 * checks (0 means all pass), or -1 on an internal error.
 */
int32_t rnas_selfcheck(void);

/**
 * Reclaim a string returned by this library.
 */
void rnas_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ROBUSTNAS_H */
