#ifndef NIMA_H
#define NIMA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes; the nonzero values match the CLI exit codes.
 */
typedef enum NimaStatus {
  NIMA_STATUS_OK = 0,
  /*
   Bad argument or null pointer.
   */
  NIMA_STATUS_USAGE = 1,
  /*
   Malformed or inconsistent input data.
   */
  NIMA_STATUS_DATA = 2,
  /*
   Numerical failure (non-convergence, degenerate input).
   */
  NIMA_STATUS_NUMERICAL = 3,
  /*
   A Rust panic was caught at the boundary.
   */
  NIMA_STATUS_INTERNAL = 4,
} NimaStatus;

/*
 Opaque trained model.
 */
typedef struct NimaModel NimaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. The pointer is
 valid until the next call into this library on the same thread.
 */
const char *nima_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nima_version(void);

/*
 Loads a checkpoint. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum NimaStatus nima_model_load(const char *path, struct NimaModel **out);

/*
 Releases a handle from `nima_model_load`; NULL is ignored.

 # Safety
 `model` must come from `nima_model_load` and not be freed twice.
 */
void nima_model_free(struct NimaModel *model);

/*
 Number of score buckets the model predicts, 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t nima_model_num_buckets(const struct NimaModel *model);

/*
 Bucket values of the model's scale, written to `out_values[0..len]`.

 # Safety
 `out_values` must hold `len` doubles.
 */
enum NimaStatus nima_model_bucket_values(const struct NimaModel *model,
                                         double *out_values,
                                         size_t len);

/*
 Predicts the score distribution of an interleaved `height × width ×
 channels` image with values in [0, 1]. `out_probs` receives
 `num_buckets` probabilities; `out_mean` / `out_std` may be NULL.

 # Safety
 `pixels` must hold `height * width * channels` doubles and `out_probs`
 `num_buckets` doubles.
 */
enum NimaStatus nima_model_predict(const struct NimaModel *model,
                                   const double *pixels,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   double *out_probs,
                                   size_t num_buckets,
                                   double *out_mean,
                                   double *out_std);

/*
 Normalized EMD with exponent `r` between two `n`-bucket distributions.

 # Safety
 `p` and `q` must hold `n` doubles; `out` must be writable.
 */
enum NimaStatus nima_emd(const double *p, const double *q, size_t n, double r, double *out);

/*
 Squared-EMD (r = 2) loss of `softmax(logits)` against `target`.

 # Safety
 `target` and `logits` must hold `n` doubles; `out` must be writable.
 */
enum NimaStatus nima_squared_emd_loss(const double *target,
                                      const double *logits,
                                      size_t n,
                                      double *out);

/*
 Gradient of the squared-EMD loss with respect to the logits.

 # Safety
 `target`, `logits` and `out_grad` must hold `n` doubles.
 */
enum NimaStatus nima_squared_emd_grad(const double *target,
                                      const double *logits,
                                      size_t n,
                                      double *out_grad);

/*
 Maximum-entropy distribution on the scale `values[0..n]` with mean `mu`
 and standard deviation `sigma`.

 # Safety
 `values` and `out_probs` must hold `n` doubles.
 */
enum NimaStatus nima_fit_maxent(double mu,
                                double sigma,
                                const double *values,
                                size_t n,
                                double *out_probs);

/*
 Pearson correlation of `x[0..n]` and `y[0..n]`.

 # Safety
 `x` and `y` must hold `n` doubles; `out` must be writable.
 */
enum NimaStatus nima_lcc(const double *x, const double *y, size_t n, double *out);

/*
 Spearman correlation with average ranks for ties.

 # Safety
 `x` and `y` must hold `n` doubles; `out` must be writable.
 */
enum NimaStatus nima_srcc(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NIMA_H */
