#ifndef XPERT_H
#define XPERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum XpertStatus {
  XPERT_STATUS_OK = 0,
  XPERT_STATUS_NULL_POINTER = 1,
  XPERT_STATUS_INVALID_ARGUMENT = 2,
  XPERT_STATUS_CONFIG = 3,
  XPERT_STATUS_IO = 4,
  XPERT_STATUS_PARSE = 5,
  XPERT_STATUS_DIVERGED = 6,
  XPERT_STATUS_INTERNAL = 7,
} XpertStatus;

// A trained classifier with its mask parameters.
typedef struct XpertModel XpertModel;

// Parameters of the hard concrete distribution.
typedef struct XpertHardConcrete {
  double beta;
  double gamma;
  double zeta;
} XpertHardConcrete;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library on the same thread.
const char *xpert_last_error(void);

// Library version as a static string.
const char *xpert_version(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void xpert_string_free(char *s);

// Loads a checkpoint written by a training run.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum XpertStatus xpert_model_load(const char *path, struct XpertModel **out);

// # Safety
// `model` must be null or a handle from [`xpert_model_load`] or
// [`xpert_run_experiment`], not yet freed.
void xpert_model_free(struct XpertModel *model);

// Input features per example, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t xpert_model_num_inputs(const struct XpertModel *model);

// # Safety
// `model` must be null or a live handle.
size_t xpert_model_num_classes(const struct XpertModel *model);

// Class probabilities for `rows` row-major inputs, already normalized the way
// the model was trained. Writes `rows × num_classes` values.
//
// # Safety
// `x` must hold `rows × num_inputs` values and `out` `out_len` values.
enum XpertStatus xpert_model_predict_proba(const struct XpertModel *model,
                                           const double *x,
                                           size_t rows,
                                           double *out,
                                           size_t out_len);

// Deterministic evaluation mask of an inductive model for `rows` inputs.
// Writes `rows × num_inputs` values in `[0, 1]`.
//
// # Safety
// `x` must hold `rows × num_inputs` values and `out` `out_len` values.
enum XpertStatus xpert_model_mask(const struct XpertModel *model,
                                  const double *x,
                                  size_t rows,
                                  double *out,
                                  size_t out_len);

// The usual parameters: temperature 2/3, stretch interval (−0.1, 1.1).
struct XpertHardConcrete xpert_hard_concrete_default(void);

// Gate value for `log α` and a uniform draw `u ∈ (0, 1)`.
//
// # Safety
// `out` must be writable.
enum XpertStatus xpert_hard_concrete_gate(struct XpertHardConcrete params,
                                          double log_alpha,
                                          double u,
                                          double *out);

// Probability that the gate is nonzero.
//
// # Safety
// `out` must be writable.
enum XpertStatus xpert_hard_concrete_active_probability(struct XpertHardConcrete params,
                                                        double log_alpha,
                                                        double *out);

// Noise-free gate used at evaluation time.
//
// # Safety
// `out` must be writable.
enum XpertStatus xpert_hard_concrete_median_gate(struct XpertHardConcrete params,
                                                 double log_alpha,
                                                 double *out);

// Two-moons sample: `n × 2` coordinates into `points`, `n` labels into `labels`.
//
// # Safety
// `points` must hold `2n` values and `labels` `n` values.
enum XpertStatus xpert_make_moons(size_t n,
                                  double noise_sd,
                                  uint64_t seed,
                                  double *points,
                                  uint32_t *labels);

// Trains from a JSON config and writes its artifacts to the config's output
// directory. `final_accuracy` and `model` may be null when not wanted.
//
// # Safety
// `config_json` must be a NUL-terminated string; non-null out pointers must
// be writable.
enum XpertStatus xpert_run_experiment(const char *config_json,
                                      double *final_accuracy,
                                      struct XpertModel **model);

// Resolved copy of a JSON config with every default filled in. Free the
// result with [`xpert_string_free`].
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum XpertStatus xpert_resolve_config(const char *config_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XPERT_H */
