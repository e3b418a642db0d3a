#ifndef EBTREND_H
#define EBTREND_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EbtrendStatus {
  EBTREND_STATUS_OK = 0,
  // Bad argument, unparsable input or configuration.
  EBTREND_STATUS_INVALID_INPUT = 2,
  // Rank-deficient design or failed orthogonality check.
  EBTREND_STATUS_DESIGN = 3,
  // Method not applicable to this design or side information.
  EBTREND_STATUS_NOT_APPLICABLE = 4,
  EBTREND_STATUS_NUMERICAL = 5,
  EBTREND_STATUS_NULL_POINTER = 6,
  // A Rust panic was caught at the boundary.
  EBTREND_STATUS_PANIC = 7,
} EbtrendStatus;

// Method codes accepted by `ebtrend_analyze`.
typedef enum EbtrendMethod {
  EBTREND_METHOD_T_TEST = 0,
  EBTREND_METHOD_UNTRENDED_INV_CHISQ = 1,
  EBTREND_METHOD_UNTRENDED_NPMLE = 2,
  EBTREND_METHOD_REG_INV_CHISQ = 3,
  EBTREND_METHOD_REG_NPMLE = 4,
  EBTREND_METHOD_JOINT_NPMLE = 5,
  EBTREND_METHOD_DISCRETE_JOINT = 6,
  EBTREND_METHOD_MAP = 7,
  EBTREND_METHOD_MANORM2 = 8,
} EbtrendMethod;

// Side-information codes.
typedef enum EbtrendSide {
  EBTREND_SIDE_AVERAGE_INTENSITY = 0,
  // One caller-supplied value per unit.
  EBTREND_SIDE_EXTERNAL = 1,
  // Equal-weight average of the two group means.
  EBTREND_SIDE_MANORM_TILDE = 2,
} EbtrendSide;

// Opaque design matrix.
typedef struct EbtrendDesign EbtrendDesign;

// Opaque analysis result.
typedef struct EbtrendResult EbtrendResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *ebtrend_last_error(void);

// Library version as a static string.
const char *ebtrend_version(void);

// Static name of a method code, or NULL for an unknown code.
const char *ebtrend_method_name(int32_t method);

// Builds a design from the row-major `k` × `p` matrix `x`.
//
// # Safety
// `x` must be valid for `k * p` reads and `out` for one write.
enum EbtrendStatus ebtrend_design_new(const double *x,
                                      size_t k,
                                      size_t p,
                                      struct EbtrendDesign **out);

// # Safety
// `design` must be NULL or a handle from `ebtrend_design_new` not yet freed.
void ebtrend_design_free(struct EbtrendDesign *design);

// Residual degrees of freedom K − p, or 0 for NULL.
//
// # Safety
// `design` must be NULL or a live handle.
size_t ebtrend_design_df(const struct EbtrendDesign *design);

// c_θᵀ(XᵀX)⁻¹c_side for the average-intensity or MAnorm2 side value, and
// whether it passes along with 𝟏 lying in the column space.
//
// # Safety
// `contrast` must be valid for p reads; `out_value` and `out_ok` for one
// write each.
enum EbtrendStatus ebtrend_check_orthogonality(const struct EbtrendDesign *design,
                                               const double *contrast,
                                               int32_t side,
                                               double *out_value,
                                               bool *out_ok);

// Fits each row of the row-major `n` × `k` matrix `y` and computes p- and
// q-values for `methods` (codes from `EbtrendMethod`). `side_values` is
// read only for the external side and then needs `n` entries. Results are
// stored in canonical method order with duplicates removed.
//
// # Safety
// Pointers must be valid for the stated lengths; `contrast` holds one
// weight per design column; `out` must be valid for one write.
enum EbtrendStatus ebtrend_analyze(const double *y,
                                   size_t n,
                                   size_t k,
                                   const struct EbtrendDesign *design,
                                   const double *contrast,
                                   int32_t side,
                                   const double *side_values,
                                   const int32_t *methods,
                                   size_t n_methods,
                                   bool allow_nonorthogonal,
                                   struct EbtrendResult **out);

// # Safety
// `result` must be NULL or a live handle from `ebtrend_analyze`.
void ebtrend_result_free(struct EbtrendResult *result);

// # Safety
// `result` must be NULL or a live handle.
size_t ebtrend_result_n_units(const struct EbtrendResult *result);

// # Safety
// `result` must be NULL or a live handle.
size_t ebtrend_result_n_methods(const struct EbtrendResult *result);

// Method code of column `i`, or −1 when out of range.
//
// # Safety
// `result` must be NULL or a live handle.
int32_t ebtrend_result_method(const struct EbtrendResult *result, size_t i);

// P-values of column `i` (n entries, owned by `result`), or NULL.
//
// # Safety
// `result` must be NULL or a live handle.
const double *ebtrend_result_p(const struct EbtrendResult *result, size_t i);

// BH-adjusted q-values of column `i` (n entries, owned by `result`), or
// NULL.
//
// # Safety
// `result` must be NULL or a live handle.
const double *ebtrend_result_q(const struct EbtrendResult *result, size_t i);

// Benjamini–Hochberg adjusted p-values of `p` into `out`.
//
// # Safety
// `p` and `out` must be valid for `n` reads and writes respectively.
enum EbtrendStatus ebtrend_bh_adjust(const double *p, size_t n, double *out);

// Runs a named simulation preset and returns the summary table as a
// NUL-terminated TSV string, to be released with `ebtrend_string_free`.
// Zero `n` or `reps` keeps the preset's value; `n` scales the null count.
//
// # Safety
// `preset` must be a NUL-terminated string; `out_tsv` valid for one write.
enum EbtrendStatus ebtrend_simulate(const char *preset,
                                    size_t n,
                                    size_t reps,
                                    uint64_t seed,
                                    char **out_tsv);

// # Safety
// `s` must be NULL or a string returned by this library not yet freed.
void ebtrend_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EBTREND_H */
