#ifndef ARITHRL_H
#define ARITHRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ArlStatus {
  ARL_STATUS_OK = 0,
  ARL_STATUS_NULL_POINTER = 1,
  ARL_STATUS_INVALID_UTF8 = 2,
  ARL_STATUS_INVALID_ARGUMENT = 3,
  ARL_STATUS_IO = 4,
  ARL_STATUS_CHECKPOINT = 5,
  ARL_STATUS_CONFIG = 6,
  ARL_STATUS_BUFFER_TOO_SMALL = 7,
  ARL_STATUS_INTERNAL = 8,
  ARL_STATUS_PANIC = 9,
} ArlStatus;

typedef enum ArlVerdict {
  ARL_VERDICT_CORRECT = 0,
  ARL_VERDICT_INCORRECT = 1,
  ARL_VERDICT_MALFORMED = 2,
} ArlVerdict;

typedef enum ArlEvalMode {
  ARL_EVAL_MODE_IDENTICAL = 0,
  ARL_EVAL_MODE_VARYING = 1,
} ArlEvalMode;

// Loaded model parameters.
typedef struct ArlModel ArlModel;

typedef struct ArlEvalResult {
  double accuracy;
  double ci_low;
  double ci_high;
  uintptr_t n_correct;
  uintptr_t n_examples;
} ArlEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length of the last error message on this thread, NUL included; 1 when
// there is none.
uintptr_t arl_last_error_length(void);

// Copies the last error message on this thread into `buf`.
//
// # Safety
// `buf` must be valid for `cap` bytes; `needed` may be null.
enum ArlStatus arl_last_error(char *buf, uintptr_t cap, uintptr_t *needed);

// Renders the full scratchpad document (prompt, body, answer, EOS) for
// `a + b`.
//
// # Safety
// `a` and `b` must be NUL-terminated strings; `buf` valid for `cap` bytes.
enum ArlStatus arl_render_scratchpad(const char *a,
                                     const char *b,
                                     char *buf,
                                     uintptr_t cap,
                                     uintptr_t *needed);

// Checks the answer line of a generated completion against `a + b`.
//
// # Safety
// All strings must be NUL-terminated; `out` must be writable.
enum ArlStatus arl_verify_answer(const char *a,
                                 const char *b,
                                 const char *text,
                                 enum ArlVerdict *out);

// Per-token weight of the certainty-weighted KL penalty.
double arl_certainty_weight(double certainty, double beta);

// Loads a checkpoint directory.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable. On success the
// handle must be released with [`arl_model_free`].
enum ArlStatus arl_model_load(const char *path, struct ArlModel **out);

// Releases a model. Null is accepted.
//
// # Safety
// `model` must come from [`arl_model_load`] and not be used afterwards.
void arl_model_free(struct ArlModel *model);

// Number of scalar parameters in the model.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum ArlStatus arl_model_num_params(const struct ArlModel *model, uintptr_t *out);

// Greedy completion of the prompt for `a + b`, without the prompt and
// without the EOS symbol.
//
// # Safety
// `model` must be a live handle; strings NUL-terminated; `buf` valid for
// `cap` bytes.
enum ArlStatus arl_model_complete(const struct ArlModel *model,
                                  const char *a,
                                  const char *b,
                                  char *buf,
                                  uintptr_t cap,
                                  uintptr_t *needed);

// Greedy accuracy on `n` fresh problems with a bootstrap interval.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum ArlStatus arl_model_evaluate(const struct ArlModel *model,
                                  enum ArlEvalMode mode,
                                  uintptr_t digits,
                                  uintptr_t n,
                                  uint64_t seed,
                                  struct ArlEvalResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARITHRL_H */
