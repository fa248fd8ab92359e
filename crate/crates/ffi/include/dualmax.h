#ifndef DUALMAX_H
#define DUALMAX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DmStatus {
  DM_STATUS_OK = 0,
  DM_STATUS_NULL_POINTER = 1,
  DM_STATUS_INVALID_ARGUMENT = 2,
  DM_STATUS_INFEASIBLE = 3,
  DM_STATUS_NOT_ADMISSIBLE = 4,
  DM_STATUS_NUMERIC = 5,
  DM_STATUS_PANIC = 6,
} DmStatus;

typedef enum DmSetKind {
  DM_SET_KIND_EMPTY = 0,
  DM_SET_KIND_ALL = 1,
  DM_SET_KIND_CONE = 2,
} DmSetKind;

typedef enum DmBranch {
  DM_BRANCH_EXPLOIT = 0,
  DM_BRANCH_EXPLORE = 1,
} DmBranch;

// Running data statistic `Z`.
typedef struct DmData DmData;

// Problem instance with its admissible-set parameters.
typedef struct DmProblem DmProblem;

// Controller decision. The action takes `support[i]` with probability
// `prob[i]` for `i < support_len`.
typedef struct DmDecision {
  enum DmBranch branch;
  double khat_x;
  double b_hat_ax;
  double ztilde_at_bhat;
  double mean;
  double second_moment;
  size_t support_len;
  double support[2];
  double prob[2];
} DmDecision;

typedef struct DmBellmanReport {
  double value_hat;
  double lhs_exploit_family;
  double lhs_bar;
  double margin;
  double tolerance;
  bool pass;
} DmBellmanReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the length needed including the NUL, or 0
// when no error has been recorded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dm_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *dm_version(void);

// Creates a problem from row-major `n x n` matrices `a` and `s`.
//
// # Safety
// `a` and `s` must point to `n * n` doubles; `out` must be writable.
enum DmStatus dm_problem_new(size_t n,
                             const double *a,
                             const double *s,
                             double r,
                             double beta,
                             double gamma,
                             struct DmProblem **out);

// # Safety
// `p` must be null or a handle from [`dm_problem_new`] not yet freed.
void dm_problem_free(struct DmProblem *p);

// # Safety
// Pointers must be valid.
enum DmStatus dm_problem_dim(const struct DmProblem *p, size_t *out);

// Whether gamma meets the admissibility threshold; the threshold itself is
// written to `threshold` when non-null.
//
// # Safety
// Pointers must be valid.
enum DmStatus dm_problem_validate_gamma(const struct DmProblem *p,
                                        bool *admissible,
                                        double *threshold);

// # Safety
// Pointers must be valid.
enum DmStatus dm_problem_tau(const struct DmProblem *p, double *out);

// # Safety
// Pointers must be valid.
enum DmStatus dm_problem_set_kind(const struct DmProblem *p, enum DmSetKind *out);

// Membership by the direct matrix inequality.
//
// # Safety
// `b` must point to `n` doubles.
enum DmStatus dm_member_direct(const struct DmProblem *p, const double *b, bool *out);

// Membership by the eigen (cone) form.
//
// # Safety
// `b` must point to `n` doubles.
enum DmStatus dm_member_cone(const struct DmProblem *p, const double *b, bool *out);

// Smallest `|B|^2` over the admissible set; `Infeasible` when it is empty.
//
// # Safety
// Pointers must be valid.
enum DmStatus dm_min_norm_sq(const struct DmProblem *p, double *out);

// # Safety
// `out` must be writable.
enum DmStatus dm_data_new(size_t n, struct DmData **out);

// # Safety
// `d` must be null or a handle from [`dm_data_new`] not yet freed.
void dm_data_free(struct DmData *d);

// Adds the transition `(x, u, x_next)` to the statistic.
//
// # Safety
// `x` and `x_next` must point to `n` doubles.
enum DmStatus dm_data_update(struct DmData *d, const double *x, double u, const double *x_next);

// # Safety
// Pointers must be valid.
enum DmStatus dm_data_count(const struct DmData *d, uint64_t *out);

// Misfit `z_B(Z)`.
//
// # Safety
// `b` must point to `n` doubles.
enum DmStatus dm_z_b(const struct DmProblem *p,
                     const struct DmData *d,
                     const double *b,
                     double *out);

// Odd part of the misfit.
//
// # Safety
// `b` must point to `n` doubles.
enum DmStatus dm_z_tilde(const struct DmProblem *p,
                         const struct DmData *d,
                         const double *b,
                         double *out);

// # Safety
// Pointers must be valid.
enum DmStatus dm_z_bar(const struct DmProblem *p, const struct DmData *d, double *out);

// Evaluates the controller at `(x, Z)`. The estimate `B_hat` is written to
// `b_hat` (`n` doubles) when non-null.
//
// # Safety
// `x` must point to `n` doubles; `b_hat` must be null or hold `n` doubles.
enum DmStatus dm_decide(const struct DmProblem *p,
                        const struct DmData *d,
                        const double *x,
                        struct DmDecision *out,
                        double *b_hat);

// Explicit value function at `(x, Z)`.
//
// # Safety
// `x` must point to `n` doubles.
enum DmStatus dm_value_hat(const struct DmProblem *p,
                           const struct DmData *d,
                           const double *x,
                           double *out);

// One-step Bellman inequality check with tolerance `coef (1 + |V_hat|)`.
//
// # Safety
// `x` must point to `n` doubles.
enum DmStatus dm_check_bellman(const struct DmProblem *p,
                               const struct DmData *d,
                               const double *x,
                               double coef,
                               struct DmBellmanReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALMAX_H */
