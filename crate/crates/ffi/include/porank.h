#ifndef PORANK_H
#define PORANK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Pair labels of a batch, one byte per entry of the distance matrix.
#define PORANK_UNLABELED 0

#define PORANK_POSITIVE 1

#define PORANK_NEGATIVE 2

#define PORANK_PARTIAL 3

typedef enum PorankStatus {
  PORANK_STATUS_OK = 0,
  PORANK_STATUS_NULL_POINTER = 1,
  PORANK_STATUS_INVALID_ARGUMENT = 2,
  PORANK_STATUS_DIMENSION_MISMATCH = 3,
  PORANK_STATUS_NON_FINITE = 4,
  PORANK_STATUS_KERNEL_UNDERFLOW = 5,
  PORANK_STATUS_DEGENERATE_SAMPLE = 6,
  PORANK_STATUS_TOO_FEW_SAMPLES = 7,
  PORANK_STATUS_IO = 8,
  PORANK_STATUS_PARSE = 9,
  PORANK_STATUS_BUFFER_TOO_SMALL = 10,
  PORANK_STATUS_PANIC = 11,
} PorankStatus;

typedef enum PorankMetric {
  PORANK_METRIC_EUCLIDEAN = 0,
  PORANK_METRIC_COSINE = 1,
} PorankMetric;

typedef enum PorankLoss {
  PORANK_LOSS_CONTRASTIVE = 0,
  PORANK_LOSS_TRIPLET = 1,
  PORANK_LOSS_MAX_MARGIN = 2,
  PORANK_LOSS_TRANSPORT = 3,
  PORANK_LOSS_PARTIAL_ORDER = 4,
} PorankLoss;

// Opaque encoder handle.
typedef struct PorankEncoder PorankEncoder;

// Opaque experiment report handle.
typedef struct PorankReport PorankReport;

typedef struct PorankMargins {
  double eps;
  double m;
  double p;
  double m1;
  double m2;
  double n;
  double gamma;
  double lambda;
} PorankMargins;

typedef struct PorankWilcoxon {
  double statistic;
  double w_plus;
  double w_minus;
  size_t n;
  double p_two_sided;
  double p_less;
  double p_greater;
  bool exact;
} PorankWilcoxon;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message of the last failed call on this thread into `buf`
// (NUL-terminated, truncated to `len`). Returns the full message length
// without the terminator, or 0 when there is none.
size_t porank_last_error(char *buf, size_t len);

enum PorankStatus porank_margins_default(struct PorankMargins *out);

// Pairwise distances between the rows of `a` (`n x dim`) and `b`
// (`m x dim`), written to `out` (`n x m`).
enum PorankStatus porank_pairwise_distances(const double *a,
                                            size_t n,
                                            const double *b,
                                            size_t m,
                                            size_t dim,
                                            enum PorankMetric metric,
                                            double *out);

// Batch loss over an `n x n` distance matrix with one label byte per
// entry. The triplet loss uses every negative of each row; the transport
// loss solves its plan with default solver settings. `grad` may be null.
enum PorankStatus porank_loss(enum PorankLoss kind,
                              const double *d,
                              const uint8_t *labels,
                              size_t n,
                              const struct PorankMargins *margins,
                              double *value,
                              double *grad);

// Entropic transport plan for an `n x m` cost with marginals `r`, `c`.
// `iterations` and `converged` may be null.
enum PorankStatus porank_sinkhorn(const double *cost,
                                  size_t n,
                                  size_t m,
                                  const double *r,
                                  const double *c,
                                  double lambda,
                                  double tol,
                                  size_t max_iter,
                                  bool log_domain,
                                  double *plan,
                                  size_t *iterations,
                                  bool *converged);

// Rank of the closest relevant gallery item for each query row of
// `scores` (smaller is closer). `relevant` holds one byte per entry,
// non-zero for relevant items.
enum PorankStatus porank_rank_queries(const double *scores,
                                      size_t queries,
                                      size_t gallery,
                                      const uint8_t *relevant,
                                      size_t *ranks);

// Paired signed-rank test on `x - y`.
enum PorankStatus porank_wilcoxon(const double *x,
                                  const double *y,
                                  size_t n,
                                  struct PorankWilcoxon *out);

// New MLP encoder with layer widths `sizes[0..n_sizes]` (input first) and
// ReLU hidden layers when `relu` is set.
enum PorankStatus porank_encoder_new(const size_t *sizes,
                                     size_t n_sizes,
                                     bool relu,
                                     uint64_t seed,
                                     struct PorankEncoder **out);

void porank_encoder_free(struct PorankEncoder *enc);

// Input width, output width and parameter count of an encoder; any
// output pointer may be null.
enum PorankStatus porank_encoder_shape(const struct PorankEncoder *enc,
                                       size_t *input_dim,
                                       size_t *output_dim,
                                       size_t *num_params);

// Embeds `rows` inputs; `out` must hold `rows * output_dim` values.
enum PorankStatus porank_encoder_embed(const struct PorankEncoder *enc,
                                       const double *xs,
                                       size_t rows,
                                       double *out);

// Copies the flattened parameters into `out` of length `len`, which must
// equal the parameter count.
enum PorankStatus porank_encoder_get_params(const struct PorankEncoder *enc,
                                            double *out,
                                            size_t len);

enum PorankStatus porank_encoder_set_params(struct PorankEncoder *enc,
                                            const double *params,
                                            size_t len);

// Runs the experiment described by the config file at `config_path`.
enum PorankStatus porank_run_experiment(const char *config_path, struct PorankReport **out);

void porank_report_free(struct PorankReport *report);

// Writes the report JSON, NUL-terminated, into `buf`. `needed` receives the
// buffer size required including the terminator; call with a null `buf`
// to query it. Returns `BufferTooSmall` when `len` is insufficient.
enum PorankStatus porank_report_json(const struct PorankReport *report,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PORANK_H */
