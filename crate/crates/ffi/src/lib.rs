//! C interface to `laughlin-lab`.
//!
//! Every fallible function returns an [`LlStatus`]; on failure the message
//! is kept per thread and can be fetched with [`ll_last_error`]. Results
//! that own memory are returned as opaque handles freed by the matching
//! `*_free` function. Passing a null handle to a `*_free` function is a
//! no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use laughlin_lab::cli::{self, RunConfig};
use laughlin_lab::ed::{self, GapOptions, GapReport};
use laughlin_lab::model::{cleaned_hamiltonian, CorrelationFactor, Point, PointConfiguration};
use laughlin_lab::screening::{self, ScreeningOptions, ScreeningRegion};
use laughlin_lab::{bathtub, Grid, LabError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    InvalidInput = 1,
    NullPointer = 2,
    Singular = 3,
    NonConvergence = 4,
    Diagnostics = 5,
    Grid = 6,
    DimensionOverflow = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&LabError> for LlStatus {
    fn from(e: &LabError) -> Self {
        match e {
            LabError::InvalidInput(_) | LabError::Json(_) => LlStatus::InvalidInput,
            LabError::Singular(_) => LlStatus::Singular,
            LabError::NonConvergence { .. } => LlStatus::NonConvergence,
            LabError::Diagnostics(_) => LlStatus::Diagnostics,
            LabError::Grid(_) => LlStatus::Grid,
            LabError::DimensionOverflow { .. } => LlStatus::DimensionOverflow,
            LabError::Io(_) => LlStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(LlStatus, String);

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure(LlStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and the
/// thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LlStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LlStatus::Panic
        }
    }
}

/// # Safety
/// `xy` must be null or point to `2 * n` readable doubles.
unsafe fn points<'a>(xy: *const f64, n: usize) -> Result<Vec<Point>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if xy.is_null() {
        return Err(null("xy"));
    }
    let s: &'a [f64] = std::slice::from_raw_parts(xy, 2 * n);
    Ok(s.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
}

/// # Safety
/// `s` must be null or a NUL-terminated string.
unsafe fn utf8<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| Failure(LlStatus::InvalidInput, format!("{what} is not UTF-8")))
}

fn out<T>(p: *mut T, what: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(p)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ll_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the length the message
/// needs including the terminator; 1 means no error.
///
/// # Safety
/// `buf` must be null or writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ll_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Cleaned Coulomb energy of `n` points `xy = [x0, y0, x1, y1, ...]`
/// without quasi-holes; `+inf` at coincident points.
///
/// # Safety
/// `xy` must hold `2 * n` doubles and `energy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ll_cleaned_hamiltonian(xy: *const f64, n: usize, energy: *mut f64) -> LlStatus {
    guard(|| {
        let energy = out(energy, "energy")?;
        let config = PointConfiguration::new(points(xy, n)?)?;
        *energy = cleaned_hamiltonian(&config, &CorrelationFactor::None)?;
        Ok(())
    })
}

/// Fills `mass` into the cells of an `nx` by `ny` grid of cell size
/// `spacing`, lowest `potential` first, at density at most `cap`. Writes
/// the density into `rho` (length `nx * ny`, cell `(ix, iy)` at
/// `iy * nx + ix`) and the energy `sum V rho h^2` into `energy`.
///
/// # Safety
/// `potential` must hold and `rho` must have room for `nx * ny` doubles;
/// `energy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ll_bathtub_fill(
    potential: *const f64,
    nx: usize,
    ny: usize,
    spacing: f64,
    cap: f64,
    mass: f64,
    rho: *mut f64,
    energy: *mut f64,
) -> LlStatus {
    guard(|| {
        let energy = out(energy, "energy")?;
        let rho = out(rho, "rho")?;
        if potential.is_null() {
            return Err(null("potential"));
        }
        let grid = Grid::new(Point::ORIGIN, spacing, nx, ny)?;
        let v = std::slice::from_raw_parts(potential, grid.len());
        let fill = bathtub::bathtub_fill(&grid, v, cap, mass)?;
        ptr::copy_nonoverlapping(fill.profile.values.as_ptr(), rho, grid.len());
        *energy = fill.energy;
        Ok(())
    })
}

/// Spectral gap scan of the pseudo-potential Hamiltonian.
pub struct LlGapReport(GapReport);

/// One momentum sector of a gap scan.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlSectorGap {
    pub l: usize,
    pub dim: usize,
    pub zero_modes: usize,
    /// NaN when the sector has no nonzero eigenvalue.
    pub lowest_nonzero: f64,
}

/// Scans the sectors `L_min..=l_max` for `n` particles with exponent `ell`
/// (`l_max = 0` selects the Laughlin momentum), computing at least `k`
/// eigenvalues per sector.
///
/// # Safety
/// `report` must be writable; on success it receives a handle to free
/// with [`ll_gap_free`].
#[no_mangle]
pub unsafe extern "C" fn ll_gap_compute(
    n: usize,
    ell: u32,
    k: usize,
    l_max: usize,
    report: *mut *mut LlGapReport,
) -> LlStatus {
    guard(|| {
        let report = out(report, "report")?;
        *report = ptr::null_mut();
        let mut o = GapOptions::new(n, k);
        o.l_max = (l_max > 0).then_some(l_max);
        let g = ed::spectral_gap(n, ell, &o)?;
        *report = Box::into_raw(Box::new(LlGapReport(g)));
        Ok(())
    })
}

/// Smallest nonzero eigenvalue over sectors up to the Laughlin momentum,
/// or NaN if none was found.
///
/// # Safety
/// `report` must be a live handle and `sigma` writable.
#[no_mangle]
pub unsafe extern "C" fn ll_gap_sigma(report: *const LlGapReport, sigma: *mut f64) -> LlStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        *out(sigma, "sigma")? = r.0.sigma.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Number of sectors in a report; 0 for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ll_gap_sector_count(report: *const LlGapReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.sectors.len())
}

/// # Safety
/// `report` must be a live handle and `sector` writable.
#[no_mangle]
pub unsafe extern "C" fn ll_gap_sector(report: *const LlGapReport, index: usize, sector: *mut LlSectorGap) -> LlStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let s = r.0.sectors.get(index).ok_or_else(|| {
            Failure(LlStatus::InvalidInput, format!("sector index {index} out of range ({})", r.0.sectors.len()))
        })?;
        *out(sector, "sector")? = LlSectorGap {
            l: s.l,
            dim: s.dim,
            zero_modes: s.zero_modes,
            lowest_nonzero: s.lowest_nonzero.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ll_gap_free(report: *mut LlGapReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Screening region of a set of unit point charges.
pub struct LlScreening(ScreeningRegion);

/// Cell-centered grid: cell `(ix, iy)` has center
/// `(x0 + (ix + 1/2) h, y0 + (iy + 1/2) h)` and index `iy * nx + ix`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlGrid {
    pub x0: f64,
    pub y0: f64,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Computes the screening region of the `k` sources `xy` on a grid of cell
/// size `spacing` (0 for the default).
///
/// # Safety
/// `xy` must hold `2 * k` doubles and `region` must be writable; on success
/// it receives a handle to free with [`ll_screening_free`].
#[no_mangle]
pub unsafe extern "C" fn ll_screening_compute(
    xy: *const f64,
    k: usize,
    spacing: f64,
    region: *mut *mut LlScreening,
) -> LlStatus {
    guard(|| {
        let region = out(region, "region")?;
        *region = ptr::null_mut();
        let opts = if spacing == 0.0 { ScreeningOptions::default() } else { ScreeningOptions::with_spacing(spacing) };
        let r = screening::screening_region(&points(xy, k)?, &opts)?;
        *region = Box::into_raw(Box::new(LlScreening(r)));
        Ok(())
    })
}

/// # Safety
/// `region` must be a live handle and `area` writable.
#[no_mangle]
pub unsafe extern "C" fn ll_screening_area(region: *const LlScreening, area: *mut f64) -> LlStatus {
    guard(|| {
        let r = region.as_ref().ok_or_else(|| null("region"))?;
        *out(area, "area")? = r.0.area;
        Ok(())
    })
}

/// # Safety
/// `region` must be a live handle and `grid` writable.
#[no_mangle]
pub unsafe extern "C" fn ll_screening_grid(region: *const LlScreening, grid: *mut LlGrid) -> LlStatus {
    guard(|| {
        let g = region.as_ref().ok_or_else(|| null("region"))?.0.grid;
        *out(grid, "grid")? = LlGrid { x0: g.origin.x, y0: g.origin.y, spacing: g.spacing, nx: g.nx, ny: g.ny };
        Ok(())
    })
}

/// Copies the per-cell occupancy (in `[0, 1]`) into `buf`. Fails with
/// `BufferTooSmall` if `len < nx * ny`.
///
/// # Safety
/// `region` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ll_screening_occupancy(region: *const LlScreening, buf: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let r = region.as_ref().ok_or_else(|| null("region"))?;
        let buf = out(buf, "buf")?;
        let occ = &r.0.occupancy;
        if len < occ.len() {
            return Err(Failure(LlStatus::BufferTooSmall, format!("need {} doubles, got {len}", occ.len())));
        }
        ptr::copy_nonoverlapping(occ.as_ptr(), buf, occ.len());
        Ok(())
    })
}

/// # Safety
/// `region` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ll_screening_free(region: *mut LlScreening) {
    if !region.is_null() {
        drop(Box::from_raw(region));
    }
}

/// Runs a JSON run configuration (the `run` object of a manifest, e.g.
/// `{"subcommand": "gap", "config": {"n": 3}}`) into `out_dir`, exactly
/// as the command line tool would, manifest included.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ll_run_json(config: *const c_char, out_dir: *const c_char) -> LlStatus {
    guard(|| {
        let run: RunConfig = serde_json::from_str(utf8(config, "config")?).map_err(LabError::from)?;
        cli::execute(&run, Path::new(utf8(out_dir, "out_dir")?))?;
        Ok(())
    })
}
