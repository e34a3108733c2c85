#ifndef SOBOTRIM_H
#define SOBOTRIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes shared by every entry point.
 */
typedef enum {
  SBT_STATUS_OK = 0,
  SBT_STATUS_NULL_POINTER = 1,
  SBT_STATUS_INVALID_INPUT = 2,
  SBT_STATUS_NUMERICAL_FAILURE = 3,
  SBT_STATUS_TRIMMING_FAILED = 4,
  SBT_STATUS_NOT_CONVERGED = 5,
  SBT_STATUS_PANIC = 6,
} SbtStatus;

/*
 Opaque sampled map on a cube grid.
 */
typedef struct SbtGridMap SbtGridMap;

/*
 Opaque target manifold.
 */
typedef struct SbtManifold SbtManifold;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copy the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length in bytes.
 */
uintptr_t sbt_last_error_message(char *buf, uintptr_t len);

/*
 Round sphere S^n ⊂ R^{n+1}.
 */
SbtStatus sbt_manifold_sphere(uintptr_t n, SbtManifold **out);

/*
 R^n with the identity projection.
 */
SbtStatus sbt_manifold_euclidean(uintptr_t n, SbtManifold **out);

/*
 Funnel sphere with growth exponent α ∈ [0, (n−1)/n).
 */
SbtStatus sbt_manifold_funnel_sphere(uintptr_t n, double alpha, SbtManifold **out);

void sbt_manifold_free(SbtManifold *m);

/*
 Ambient dimension ν of the embedding.
 */
SbtStatus sbt_manifold_ambient_dim(const SbtManifold *m, uintptr_t *nu);

/*
 Nearest-point projection of `y` (length ν) into `out` (length ν).
 */
SbtStatus sbt_manifold_project(const SbtManifold *m, const double *y, double *out, uintptr_t nu);

/*
 Map on the grid of `res`^m nodes covering the cube of the given inradius
 around 0, from `len = res^m·nu` row-major values (last axis fastest).
 */
SbtStatus sbt_gridmap_new(uintptr_t m,
                          uintptr_t res,
                          double inradius,
                          uintptr_t nu,
                          const double *values,
                          uintptr_t len,
                          SbtGridMap **out);

/*
 Sample a named map given as JSON, e.g. `{"kind":"angular"}`.
 */
SbtStatus sbt_gridmap_builtin(const char *spec_json,
                              uintptr_t m,
                              uintptr_t res,
                              double inradius,
                              SbtGridMap **out);

void sbt_gridmap_free(SbtGridMap *u);

/*
 Node count and value dimension.
 */
SbtStatus sbt_gridmap_shape(const SbtGridMap *u, uintptr_t *n_nodes, uintptr_t *nu);

/*
 Copy all values (n_nodes·nu doubles) into `out`.
 */
SbtStatus sbt_gridmap_values(const SbtGridMap *u, double *out, uintptr_t len);

/*
 ∫|Du|^p over the whole grid.
 */
SbtStatus sbt_energy(const SbtGridMap *u, double p, double *out);

/*
 Brouwer degree of an R^m-valued map on the centred cube of radius `r`
 about the probe `y` (length m). `method` 0 is the winding number (m = 2),
 1 signed simplex counting.
 */
SbtStatus sbt_brouwer_degree(const SbtGridMap *u,
                             double r,
                             const double *y,
                             int32_t method,
                             int64_t *out);

/*
 Π∘(φ_ε * u) with a constant kernel scale ε.
 */
SbtStatus sbt_mollify_project(const SbtGridMap *u,
                              const SbtManifold *m,
                              double eps,
                              SbtGridMap **out);

/*
 Run the bounded-approximation schedule described by `law_json` (a
 schedule law; `"{}"` for the defaults) with default claim constants.
 On success or non-convergence, `out` receives the last juxtaposed map and
 `final_rel` its relative W^{1,p} error. Returns `NotConverged` when the
 tolerance is missed, `TrimmingFailed` when a bad cube cannot be trimmed.
 */
SbtStatus sbt_approximate(const SbtGridMap *u,
                          const SbtManifold *m,
                          double p,
                          const char *law_json,
                          double tolerance,
                          SbtGridMap **out,
                          double *final_rel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOBOTRIM_H */
