#ifndef CLIPLAB_H
#define CLIPLAB_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClStatus {
  CL_STATUS_OK = 0,
  CL_STATUS_INVALID_INPUT = 1,
  CL_STATUS_NULL_POINTER = 2,
  CL_STATUS_CAPACITY = 3,
  CL_STATUS_NON_FINITE = 4,
  CL_STATUS_IO = 5,
  CL_STATUS_CONFIG = 6,
  CL_STATUS_PANIC = 7,
} ClStatus;

typedef enum ClStrategyKind {
  CL_STRATEGY_KIND_TRUE_PG = 0,
  CL_STRATEGY_KIND_GRPO = 1,
  CL_STRATEGY_KIND_CISPO = 2,
  CL_STRATEGY_KIND_GPPO = 3,
  CL_STRATEGY_KIND_CE_GPPO = 4,
  CL_STRATEGY_KIND_ASPO = 5,
  CL_STRATEGY_KIND_DGPO = 6,
} ClStrategyKind;

typedef enum ClRegion {
  CL_REGION_LOW_NEGATIVE = 0,
  CL_REGION_HIGH_POSITIVE = 1,
  CL_REGION_LOW_POSITIVE = 2,
  CL_REGION_HIGH_NEGATIVE = 3,
  CL_REGION_IN_BOUNDARY = 4,
} ClRegion;

typedef enum ClAnalyticStrategy {
  CL_ANALYTIC_STRATEGY_GRPO = 0,
  CL_ANALYTIC_STRATEGY_ASPO = 1,
  CL_ANALYTIC_STRATEGY_CISPO = 2,
  CL_ANALYTIC_STRATEGY_GPPO = 3,
  CL_ANALYTIC_STRATEGY_CE = 4,
  CL_ANALYTIC_STRATEGY_DGPO = 5,
} ClAnalyticStrategy;

/**
 * Opaque tabular softmax policy.
 */
typedef struct ClPolicy ClPolicy;

/**
 * Opaque synthetic task.
 */
typedef struct ClTask ClTask;

/**
 * Flat strategy description. Fields a kind does not use are ignored.
 */
typedef struct ClStrategy {
  enum ClStrategyKind kind;
  double eps_low;
  double eps_high;
  double beta1;
  double beta2;
  double eps_low_prime;
  double eps_high_prime;
  uint32_t n;
  uint32_t m;
} ClStrategy;

typedef struct ClCoefficient {
  double coefficient;
  double prob_weight;
  enum ClRegion region;
} ClCoefficient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread, or null. The pointer
 * stays valid until the next `cliplab_*` call on the same thread.
 */
const char *cliplab_last_error_message(void);

/**
 * Fills `out` with the default hyperparameters of `kind`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum ClStatus cliplab_strategy_default(enum ClStrategyKind kind, struct ClStrategy *out);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum ClStatus cliplab_classify(double ratio,
                               double advantage,
                               double eps_low,
                               double eps_high,
                               enum ClRegion *out);

/**
 * # Safety
 * `strategy` must be null or point to a valid [`ClStrategy`]; `out` must
 * be null or valid for writes.
 */
enum ClStatus cliplab_coefficient(const struct ClStrategy *strategy,
                                  double old_prob,
                                  double cur_prob,
                                  double advantage,
                                  struct ClCoefficient *out);

/**
 * Jump in `F` across the left (`right_side == false`) or right trust-region
 * boundary, using the strategy's own margins.
 *
 * # Safety
 * `strategy` must be null or valid; `out` must be null or valid for writes.
 */
enum ClStatus cliplab_continuity_gap(const struct ClStrategy *strategy,
                                     bool right_side,
                                     double old_prob,
                                     double *out);

/**
 * Group-normalized advantages of `len` rewards written to `out`.
 *
 * # Safety
 * `rewards` and `out` must be null or valid for `len` elements.
 */
enum ClStatus cliplab_normalize(const double *rewards,
                                size_t len,
                                double degenerate_eps,
                                double *out);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum ClStatus cliplab_scale_learning_rate(double eta_base,
                                          double n_base,
                                          double n_target,
                                          double *out);

/**
 * Closed-form LN-region bias for the power-law probability model.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum ClStatus cliplab_analytic_bias(enum ClAnalyticStrategy which,
                                    double k,
                                    double gamma,
                                    double delta,
                                    double r0,
                                    uint32_t n,
                                    double beta1,
                                    double *out);

/**
 * Builds a synthetic task with `answers_per_query` distinct correct
 * sequences per query.
 *
 * # Safety
 * `out` must be null or valid for writes. Free the handle with
 * [`cliplab_task_free`].
 */
enum ClStatus cliplab_task_new(size_t num_queries,
                               size_t vocab_size,
                               size_t horizon,
                               size_t answers_per_query,
                               uint64_t seed,
                               struct ClTask **out);

/**
 * # Safety
 * `task` must be null or a live handle; `tokens` valid for `len` elements.
 */
enum ClStatus cliplab_task_reward(const struct ClTask *task,
                                  size_t query,
                                  const size_t *tokens,
                                  size_t len,
                                  double *out);

/**
 * Exact probability that `policy` samples a correct response, averaged
 * over queries.
 *
 * # Safety
 * Handles must be null or live; `out` null or valid for writes.
 */
enum ClStatus cliplab_task_expected_accuracy(const struct ClTask *task,
                                             const struct ClPolicy *policy,
                                             double *out);

/**
 * # Safety
 * `task` must be null or a handle from [`cliplab_task_new`] not yet freed.
 */
void cliplab_task_free(struct ClTask *task);

/**
 * Uniform policy (all logits zero).
 *
 * # Safety
 * `out` must be null or valid for writes. Free with [`cliplab_policy_free`].
 */
enum ClStatus cliplab_policy_new(size_t num_queries,
                                 size_t horizon,
                                 size_t vocab_size,
                                 struct ClPolicy **out);

/**
 * Policy with logits drawn uniformly from `[-scale, scale]`.
 *
 * # Safety
 * `out` must be null or valid for writes. Free with [`cliplab_policy_free`].
 */
enum ClStatus cliplab_policy_random(size_t num_queries,
                                    size_t horizon,
                                    size_t vocab_size,
                                    double scale,
                                    uint64_t seed,
                                    struct ClPolicy **out);

/**
 * Next-token distribution at `(query, position)`; `out` holds `out_len`
 * slots, which must equal the vocabulary size.
 *
 * # Safety
 * `policy` must be null or live; `out` valid for `out_len` elements.
 */
enum ClStatus cliplab_policy_probs(const struct ClPolicy *policy,
                                   size_t query,
                                   size_t position,
                                   double *out,
                                   size_t out_len);

/**
 * Mean next-token entropy (nats) over every context.
 *
 * # Safety
 * `policy` must be null or live; `out` null or valid for writes.
 */
enum ClStatus cliplab_policy_entropy(const struct ClPolicy *policy, double *out);

/**
 * # Safety
 * `policy` must be null or a handle from this library not yet freed.
 */
void cliplab_policy_free(struct ClPolicy *policy);

/**
 * Trains from the uniform policy. `config_text` uses the `key = value`
 * config format (null means defaults; its `task.*` and `run.*` keys are
 * ignored). `strategy` overrides `strategy.kinds` when non-null, otherwise
 * the first listed kind is used.
 *
 * On success `out_policy` receives the final policy and `out_accuracy` its
 * exact expected accuracy. A run that hits a non-finite gradient returns
 * [`ClStatus::NonFinite`] and still hands back the last finite policy.
 *
 * # Safety
 * Pointers must be null or valid; `config_text` NUL-terminated UTF-8.
 */
enum ClStatus cliplab_train_run(const struct ClTask *task,
                                const char *config_text,
                                const struct ClStrategy *strategy,
                                uint64_t seed,
                                struct ClPolicy **out_policy,
                                double *out_accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIPLAB_H */
