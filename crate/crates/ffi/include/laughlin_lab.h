#ifndef LAUGHLIN_LAB_H
#define LAUGHLIN_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LlStatus {
  LL_STATUS_OK = 0,
  LL_STATUS_INVALID_INPUT = 1,
  LL_STATUS_NULL_POINTER = 2,
  LL_STATUS_SINGULAR = 3,
  LL_STATUS_NON_CONVERGENCE = 4,
  LL_STATUS_DIAGNOSTICS = 5,
  LL_STATUS_GRID = 6,
  LL_STATUS_DIMENSION_OVERFLOW = 7,
  LL_STATUS_IO = 8,
  LL_STATUS_BUFFER_TOO_SMALL = 9,
  LL_STATUS_PANIC = 10,
} LlStatus;

/**
 * Spectral gap scan of the pseudo-potential Hamiltonian.
 */
typedef struct LlGapReport LlGapReport;

/**
 * Screening region of a set of unit point charges.
 */
typedef struct LlScreening LlScreening;

/**
 * One momentum sector of a gap scan.
 */
typedef struct LlSectorGap {
  size_t l;
  size_t dim;
  size_t zero_modes;
  /**
   * NaN when the sector has no nonzero eigenvalue.
   */
  double lowest_nonzero;
} LlSectorGap;

/**
 * Cell-centered grid: cell `(ix, iy)` has center
 * `(x0 + (ix + 1/2) h, y0 + (iy + 1/2) h)` and index `iy * nx + ix`.
 */
typedef struct LlGrid {
  double x0;
  double y0;
  double spacing;
  size_t nx;
  size_t ny;
} LlGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ll_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the length the message
 * needs including the terminator; 1 means no error.
 *
 * # Safety
 * `buf` must be null or writable for `len` bytes.
 */
size_t ll_last_error(char *buf, size_t len);

/**
 * Cleaned Coulomb energy of `n` points `xy = [x0, y0, x1, y1, ...]`
 * without quasi-holes; `+inf` at coincident points.
 *
 * # Safety
 * `xy` must hold `2 * n` doubles and `energy` must be writable.
 */
enum LlStatus ll_cleaned_hamiltonian(const double *xy, size_t n, double *energy);

/**
 * Fills `mass` into the cells of an `nx` by `ny` grid of cell size
 * `spacing`, lowest `potential` first, at density at most `cap`. Writes
 * the density into `rho` (length `nx * ny`, cell `(ix, iy)` at
 * `iy * nx + ix`) and the energy `sum V rho h^2` into `energy`.
 *
 * # Safety
 * `potential` must hold and `rho` must have room for `nx * ny` doubles;
 * `energy` must be writable.
 */
enum LlStatus ll_bathtub_fill(const double *potential,
                              size_t nx,
                              size_t ny,
                              double spacing,
                              double cap,
                              double mass,
                              double *rho,
                              double *energy);

/**
 * Scans the sectors `L_min..=l_max` for `n` particles with exponent `ell`
 * (`l_max = 0` selects the Laughlin momentum), computing at least `k`
 * eigenvalues per sector.
 *
 * # Safety
 * `report` must be writable; on success it receives a handle to free
 * with [`ll_gap_free`].
 */
enum LlStatus ll_gap_compute(size_t n,
                             uint32_t ell,
                             size_t k,
                             size_t l_max,
                             struct LlGapReport **report);

/**
 * Smallest nonzero eigenvalue over sectors up to the Laughlin momentum,
 * or NaN if none was found.
 *
 * # Safety
 * `report` must be a live handle and `sigma` writable.
 */
enum LlStatus ll_gap_sigma(const struct LlGapReport *report, double *sigma);

/**
 * Number of sectors in a report; 0 for a null handle.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t ll_gap_sector_count(const struct LlGapReport *report);

/**
 * # Safety
 * `report` must be a live handle and `sector` writable.
 */
enum LlStatus ll_gap_sector(const struct LlGapReport *report,
                            size_t index,
                            struct LlSectorGap *sector);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void ll_gap_free(struct LlGapReport *report);

/**
 * Computes the screening region of the `k` sources `xy` on a grid of cell
 * size `spacing` (0 for the default).
 *
 * # Safety
 * `xy` must hold `2 * k` doubles and `region` must be writable; on success
 * it receives a handle to free with [`ll_screening_free`].
 */
enum LlStatus ll_screening_compute(const double *xy,
                                   size_t k,
                                   double spacing,
                                   struct LlScreening **region);

/**
 * # Safety
 * `region` must be a live handle and `area` writable.
 */
enum LlStatus ll_screening_area(const struct LlScreening *region, double *area);

/**
 * # Safety
 * `region` must be a live handle and `grid` writable.
 */
enum LlStatus ll_screening_grid(const struct LlScreening *region, struct LlGrid *grid);

/**
 * Copies the per-cell occupancy (in `[0, 1]`) into `buf`. Fails with
 * `BufferTooSmall` if `len < nx * ny`.
 *
 * # Safety
 * `region` must be a live handle and `buf` writable for `len` doubles.
 */
enum LlStatus ll_screening_occupancy(const struct LlScreening *region, double *buf, size_t len);

/**
 * # Safety
 * `region` must be null or a handle not yet freed.
 */
void ll_screening_free(struct LlScreening *region);

/**
 * Runs a JSON run configuration (the `run` object of a manifest, e.g.
 * `{"subcommand": "gap", "config": {"n": 3}}`) into `out_dir`, exactly
 * as the command line tool would, manifest included.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum LlStatus ll_run_json(const char *config, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAUGHLIN_LAB_H */
