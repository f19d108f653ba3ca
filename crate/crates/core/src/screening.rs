//! Screening regions: the unit-density patch whose potential cancels `K`
//! point charges outside itself.
//!
//! The region is computed as a divisible sandpile. In odometer form the
//! final occupancy is `nu = mu + (1/4) sum_nbr u - u` with `u >= 0`,
//! `nu <= 1` and `u (1 - nu) = 0`, which is a discrete obstacle problem
//! solved here by projected over-relaxation. The potential of the
//! neutral charge distribution is then `(pi h^2 / 2) u`, which gives a
//! second route to the directly convolved field.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::Grid;
use crate::model::Point;

/// Support constant used by [`support_bound_check`] unless overridden.
/// Frozen from [`calibrate_support_constant`] with `instances = 100`,
/// `seed = 0`, default options: the largest estimate was 0.50, padded by half.
pub const DEFAULT_SUPPORT_CONSTANT: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOptions {
    /// Grid spacing `h`.
    pub spacing: f64,
    /// Extra room beyond `sqrt(K/pi)` around the bounding box of the sources.
    pub margin: f64,
    /// Stop once the fixed-point residual (in occupancy units) is below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Over-relaxation factor; `None` picks `2 / (1 + sin(pi / n))` with `n`
    /// the expected region diameter in cells.
    pub omega: Option<f64>,
}

impl Default for ScreeningOptions {
    fn default() -> Self {
        ScreeningOptions { spacing: 0.05, margin: 1.0, tol: 1e-10, max_sweeps: 200_000, omega: None }
    }
}

impl ScreeningOptions {
    pub fn with_spacing(spacing: f64) -> Self {
        ScreeningOptions { spacing, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(LabError::invalid("screening spacing must be > 0"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(LabError::invalid("screening margin must be >= 0"));
        }
        if !(self.tol > 0.0) || self.max_sweeps == 0 {
            return Err(LabError::invalid("screening tolerance and sweep budget must be positive"));
        }
        if let Some(w) = self.omega {
            if !(w > 0.0 && w < 2.0) {
                return Err(LabError::invalid("over-relaxation factor must lie in (0, 2)"));
            }
        }
        Ok(())
    }

    /// Grid around `points` with room for the region and a five-cell frame.
    pub fn grid_for(&self, points: &[Point]) -> Result<Grid> {
        self.validate()?;
        if points.is_empty() {
            return Err(LabError::invalid("screening region needs at least one source"));
        }
        let (lo, hi) = bounding_box(points);
        let pad = (points.len() as f64 / PI).sqrt() + self.margin + 5.0 * self.spacing;
        let (lo, hi) = (lo - Point::new(pad, pad), hi + Point::new(pad, pad));
        let nx = ((hi.x - lo.x) / self.spacing).ceil() as usize + 1;
        let ny = ((hi.y - lo.y) / self.spacing).ceil() as usize + 1;
        Grid::new(lo, self.spacing, nx, ny)
    }
}

fn bounding_box(points: &[Point]) -> (Point, Point) {
    points.iter().fold(
        (Point::new(f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Point::new(lo.x.min(p.x), lo.y.min(p.y)), Point::new(hi.x.max(p.x), hi.y.max(p.y))),
    )
}

/// Tolerance for potential checks: `10 h (1 + ln(1/h)) K`.
pub fn potential_tolerance(spacing: f64, k: usize) -> f64 {
    10.0 * spacing * (1.0 + (1.0 / spacing).ln().max(0.0)) * k as f64
}

#[derive(Clone, Debug)]
pub struct ScreeningRegion {
    pub grid: Grid,
    /// Per-cell occupancy in `[0, 1]`.
    pub occupancy: Vec<f64>,
    /// `h^2 * sum(occupancy)`.
    pub area: f64,
    pub sources: Vec<Point>,
    /// Sandpile odometer in occupancy units.
    pub odometer: Vec<f64>,
    pub sweeps: usize,
}

/// Computes the screening region of `points` on a grid chosen by `opts`.
pub fn screening_region(points: &[Point], opts: &ScreeningOptions) -> Result<ScreeningRegion> {
    let grid = opts.grid_for(points)?;
    screening_region_on(points, grid, opts)
}

/// Spreads unit mass from each source by bilinear weights onto cell centers.
/// Returns the initial occupancy `mu` (mass per cell area).
fn deposit(points: &[Point], grid: &Grid) -> Result<Vec<f64>> {
    let h = grid.spacing;
    let mut mu = vec![0.0; grid.len()];
    for p in points {
        let fx = (p.x - grid.origin.x) / h - 0.5;
        let fy = (p.y - grid.origin.y) / h - 0.5;
        let (ix, iy) = (fx.floor(), fy.floor());
        if !(ix >= 5.0 && iy >= 5.0 && ix + 6.0 < grid.nx as f64 && iy + 6.0 < grid.ny as f64) {
            return Err(LabError::Grid(format!(
                "source ({}, {}) is within five cells of the grid frame",
                p.x, p.y
            )));
        }
        let (tx, ty) = (fx - ix, fy - iy);
        let (ix, iy) = (ix as usize, iy as usize);
        let w = 1.0 / (h * h);
        mu[grid.index(ix, iy)] += w * (1.0 - tx) * (1.0 - ty);
        mu[grid.index(ix + 1, iy)] += w * tx * (1.0 - ty);
        mu[grid.index(ix, iy + 1)] += w * (1.0 - tx) * ty;
        mu[grid.index(ix + 1, iy + 1)] += w * tx * ty;
    }
    Ok(mu)
}

/// Computes the screening region on a caller-supplied grid. The outermost
/// ring of cells absorbs mass; any mass reaching it is a [`LabError::Grid`].
pub fn screening_region_on(points: &[Point], grid: Grid, opts: &ScreeningOptions) -> Result<ScreeningRegion> {
    opts.validate()?;
    grid.validate()?;
    if points.is_empty() {
        return Err(LabError::invalid("screening region needs at least one source"));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(LabError::invalid("screening sources must be finite"));
    }
    let mu = deposit(points, &grid)?;
    let (nx, ny) = (grid.nx, grid.ny);
    // the relaxation factor is tuned to the expected diameter of the region,
    // not to the grid, which may be much larger
    let diameter = (2.0 * (points.len() as f64 / PI).sqrt() / grid.spacing).ceil() as usize + 2;
    let n_eff = diameter.min(nx.max(ny)).max(4);
    let omega = opts.omega.unwrap_or_else(|| 2.0 / (1.0 + (PI / n_eff as f64).sin()));
    let mut u = vec![0.0; grid.len()];

    // Sweeps are restricted to the bounding box of the sources and the cells
    // with a positive odometer, grown by one cell.
    let mut bx = (nx, 0usize, ny, 0usize);
    for (i, &m) in mu.iter().enumerate() {
        if m > 0.0 {
            let (x, y) = grid.coords(i);
            bx = (bx.0.min(x), bx.1.max(x), bx.2.min(y), bx.3.max(y));
        }
    }
    let grow = |b: (usize, usize, usize, usize)| (b.0.max(2) - 1, (b.1 + 1).min(nx - 2), b.2.max(2) - 1, (b.3 + 1).min(ny - 2));
    let mut active = grow(bx);
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        let (x0, x1, y0, y1) = active;
        let mut on = bx;
        for iy in y0..=y1 {
            let row = iy * nx;
            for ix in x0..=x1 {
                let i = row + ix;
                let nb = u[i - 1] + u[i + 1] + u[i - nx] + u[i + nx];
                let target = mu[i] + 0.25 * nb - 1.0;
                let v = ((1.0 - omega) * u[i] + omega * target).max(0.0);
                u[i] = v;
                if v > 0.0 {
                    on = (on.0.min(ix), on.1.max(ix), on.2.min(iy), on.3.max(iy));
                }
            }
        }
        sweeps += 1;
        let next = grow(on);
        let grew = next != active;
        active = next;
        if grew || sweeps % 16 != 0 {
            continue;
        }
        let (max_u, res) = fixed_point_residual(&u, &mu, &grid, active);
        // The residual cannot be resolved below the rounding level of `u`.
        residual = res;
        if res <= opts.tol.max(64.0 * f64::EPSILON * max_u) {
            break;
        }
    }
    if sweeps >= opts.max_sweeps {
        let (max_u, res) = fixed_point_residual(&u, &mu, &grid, active);
        if res > opts.tol.max(64.0 * f64::EPSILON * max_u) {
            return Err(LabError::NonConvergence {
                what: "screening sandpile",
                detail: format!("residual {residual:.3e} after {sweeps} sweeps"),
            });
        }
    }

    let mut occupancy = vec![0.0; grid.len()];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let i = grid.index(ix, iy);
            let nu = mu[i] + 0.25 * (u[i - 1] + u[i + 1] + u[i - nx] + u[i + nx]) - u[i];
            occupancy[i] = if u[i] > 0.0 { 1.0 } else { nu.clamp(0.0, 1.0) };
        }
    }
    if touches_frame(&occupancy, &grid) {
        return Err(LabError::Grid("screening region reaches the grid frame; enlarge the margin".into()));
    }
    let area = occupancy.iter().sum::<f64>() * grid.cell_area();
    Ok(ScreeningRegion { grid, occupancy, area, sources: points.to_vec(), odometer: u, sweeps })
}

/// Whether any cell in the second-outermost ring is nonzero. The outermost
/// ring is pinned at zero and never updated.
fn touches_frame(v: &[f64], g: &Grid) -> bool {
    let (nx, ny) = (g.nx, g.ny);
    if nx < 3 || ny < 3 {
        return true;
    }
    (1..nx - 1).any(|x| v[g.index(x, 1)] > 0.0 || v[g.index(x, ny - 2)] > 0.0)
        || (1..ny - 1).any(|y| v[g.index(1, y)] > 0.0 || v[g.index(nx - 2, y)] > 0.0)
}

fn fixed_point_residual(u: &[f64], mu: &[f64], g: &Grid, (x0, x1, y0, y1): (usize, usize, usize, usize)) -> (f64, f64) {
    let nx = g.nx;
    let (mut max_u, mut res) = (0.0f64, 0.0f64);
    for iy in y0..=y1 {
        for ix in x0..=x1 {
            let i = iy * nx + ix;
            let target = (mu[i] + 0.25 * (u[i - 1] + u[i + 1] + u[i - nx] + u[i + nx]) - 1.0).max(0.0);
            res = res.max((u[i] - target).abs());
            max_u = max_u.max(u[i]);
        }
    }
    (max_u, res)
}

impl ScreeningRegion {
    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn occupancy_at(&self, p: Point) -> f64 {
        self.grid.locate(p).map_or(0.0, |(x, y)| self.occupancy[self.grid.index(x, y)])
    }

    /// Membership by the half-occupancy rule.
    pub fn contains(&self, p: Point) -> bool {
        self.occupancy_at(p) >= 0.5
    }

    /// Cells of `{occupancy >= 1/2}` with a 4-neighbour outside that set.
    pub fn boundary_cells(&self) -> Vec<usize> {
        let g = &self.grid;
        let inside = |x: usize, y: usize| self.occupancy[g.index(x, y)] >= 0.5;
        let mut out = Vec::new();
        for iy in 1..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                if inside(ix, iy)
                    && !(inside(ix - 1, iy) && inside(ix + 1, iy) && inside(ix, iy - 1) && inside(ix, iy + 1))
                {
                    out.push(g.index(ix, iy));
                }
            }
        }
        out
    }

    /// Cells that are partially filled or border the other phase.
    pub fn boundary_band(&self) -> Vec<bool> {
        let g = &self.grid;
        let mut band = vec![false; g.len()];
        let inside = |i: usize| self.occupancy[i] >= 0.5;
        for iy in 1..g.ny - 1 {
            for ix in 1..g.nx - 1 {
                let i = g.index(ix, iy);
                let o = self.occupancy[i];
                let mixed = [i - 1, i + 1, i - g.nx, i + g.nx].iter().any(|&j| inside(j) != inside(i));
                band[i] = (o > 0.0 && o < 1.0) || mixed;
            }
        }
        band
    }

    /// Largest distance from `a` to a cell center with positive occupancy.
    pub fn support_radius(&self, a: Point) -> f64 {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &o)| o > 0.0)
            .map(|(i, _)| self.grid.center_of(i).dist(a))
            .fold(0.0, f64::max)
    }

    /// Connected components of `{occupancy >= 1/2}` under 4-adjacency.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let g = &self.grid;
        let mut label = vec![usize::MAX; g.len()];
        let mut comps = Vec::new();
        for start in 0..g.len() {
            if self.occupancy[start] < 0.5 || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut cells = Vec::new();
            label[start] = id;
            while let Some(i) = stack.pop() {
                cells.push(i);
                let (x, y) = g.coords(i);
                let mut nb = Vec::with_capacity(4);
                if x > 0 {
                    nb.push(i - 1);
                }
                if x + 1 < g.nx {
                    nb.push(i + 1);
                }
                if y > 0 {
                    nb.push(i - g.nx);
                }
                if y + 1 < g.ny {
                    nb.push(i + g.nx);
                }
                for j in nb {
                    if self.occupancy[j] >= 0.5 && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
            comps.push(cells);
        }
        comps
    }

    /// Potential from the odometer, `(pi h^2 / 2) u`.
    pub fn odometer_potential(&self) -> PotentialField {
        let s = PI * self.grid.cell_area() / 2.0;
        PotentialField {
            grid: self.grid,
            values: self.odometer.iter().map(|&u| s * u).collect(),
            singular: singular_cells(&self.grid, &self.sources),
        }
    }

    pub fn record(&self) -> RegionRecord {
        let mut rle: Vec<(f64, usize)> = Vec::new();
        for &o in &self.occupancy {
            match rle.last_mut() {
                Some((v, n)) if *v == o => *n += 1,
                _ => rle.push((o, 1)),
            }
        }
        RegionRecord { grid: self.grid, sources: self.sources.clone(), area: self.area, sweeps: self.sweeps, occupancy_rle: rle }
    }
}

/// Serialized form of a region: metadata plus run-length-encoded occupancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub grid: Grid,
    pub sources: Vec<Point>,
    pub area: f64,
    pub sweeps: usize,
    /// `(value, run length)` pairs in row-major order.
    pub occupancy_rle: Vec<(f64, usize)>,
}

impl RegionRecord {
    pub fn occupancy(&self) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.occupancy_rle.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect();
        if v.len() != self.grid.len() {
            return Err(LabError::invalid(format!("run lengths cover {} cells, grid has {}", v.len(), self.grid.len())));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug)]
pub struct PotentialField {
    pub grid: Grid,
    pub values: Vec<f64>,
    /// Cells within one spacing of a source, where the point charge
    /// dominates and values are only indicative.
    pub singular: Vec<usize>,
}

impl PotentialField {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.grid.write_csv(out, "phi", &self.values)
    }

    pub fn max_abs_on_frame(&self) -> f64 {
        let g = &self.grid;
        (0..g.len())
            .filter(|&i| {
                let (x, y) = g.coords(i);
                x == 0 || y == 0 || x + 1 == g.nx || y + 1 == g.ny
            })
            .map(|i| self.values[i].abs())
            .fold(0.0, f64::max)
    }
}

fn singular_cells(g: &Grid, sources: &[Point]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let c = g.center_of(i);
            sources.iter().any(|s| s.dist(c) < g.spacing)
        })
        .collect();
    out.dedup();
    out
}

/// Mean of `-log|x|` over a square cell of side `h` centered at 0.
pub fn cell_average_log_kernel(h: f64) -> f64 {
    -0.5 * ((h * h / 2.0).ln() - 3.0 + PI / 2.0)
}

/// Source term `sum_k -log|p - x_k|`, with distances below half a cell
/// replaced by the cell average.
fn source_potential(sources: &[Point], p: Point, h: f64) -> f64 {
    sources
        .iter()
        .map(|s| {
            let d = s.dist(p);
            if d < 0.5 * h {
                cell_average_log_kernel(h)
            } else {
                -d.ln()
            }
        })
        .sum()
}

/// Occupied cells as `(ix, iy, occupancy)`.
fn support(region: &ScreeningRegion) -> Vec<(usize, usize, f64)> {
    region
        .occupancy
        .iter()
        .enumerate()
        .filter(|(_, &o)| o > 0.0)
        .map(|(i, &o)| {
            let (x, y) = region.grid.coords(i);
            (x, y, o)
        })
        .collect()
}

/// `Phi = -log|.| * (sum_k delta_{x_k} - 1_Sigma)` by direct convolution at
/// every cell center.
pub fn potential_field(region: &ScreeningRegion) -> PotentialField {
    let g = region.grid;
    let h = g.spacing;
    let h2 = g.cell_area();
    // kernel[dy * nx + dx] = -log(h |(dx, dy)|), cell average at the origin
    let mut kernel = vec![0.0; g.len()];
    for dy in 0..g.ny {
        for dx in 0..g.nx {
            kernel[dy * g.nx + dx] = if dx == 0 && dy == 0 {
                cell_average_log_kernel(h)
            } else {
                -(h * ((dx * dx + dy * dy) as f64).sqrt()).ln()
            };
        }
    }
    let supp = support(region);
    let mut values = vec![0.0; g.len()];
    values.par_chunks_mut(g.nx).enumerate().for_each(|(iy, row)| {
        for (ix, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(sx, sy, o) in &supp {
                acc += o * kernel[sy.abs_diff(iy) * g.nx + sx.abs_diff(ix)];
            }
            *out = source_potential(&region.sources, g.center(ix, iy), h) - h2 * acc;
        }
    });
    PotentialField { grid: g, values, singular: singular_cells(&g, &region.sources) }
}

/// The convolved potential at an arbitrary point.
pub fn potential_at(region: &ScreeningRegion, p: Point) -> f64 {
    let g = &region.grid;
    let h = g.spacing;
    let mut acc = 0.0;
    for (i, &o) in region.occupancy.iter().enumerate() {
        if o > 0.0 {
            let d = g.center_of(i).dist(p);
            acc += o * if d < 0.5 * h { cell_average_log_kernel(h) } else { -d.ln() };
        }
    }
    source_potential(&region.sources, p, h) - g.cell_area() * acc
}

#[derive(Clone, Debug, Serialize)]
pub struct DichotomyReport {
    pub tol: f64,
    pub cells_checked: usize,
    /// Cells in `Sigma` with `Phi <= -tol` or outside with `|Phi| >= tol`.
    pub violations: usize,
    /// Violations not in the boundary band.
    pub violations_off_band: usize,
    pub band_cells: usize,
}

impl DichotomyReport {
    pub fn violation_fraction(&self) -> f64 {
        self.violations as f64 / self.cells_checked.max(1) as f64
    }

    pub fn band_fraction(&self) -> f64 {
        self.band_cells as f64 / self.cells_checked.max(1) as f64
    }
}

/// Checks `Phi > -tol` on the region and `|Phi| < tol` off it, skipping
/// singular cells.
pub fn sign_dichotomy(region: &ScreeningRegion, field: &PotentialField, tol: f64) -> DichotomyReport {
    let band = region.boundary_band();
    let mut skip = vec![false; field.grid.len()];
    for &i in &field.singular {
        skip[i] = true;
    }
    let mut rep = DichotomyReport { tol, cells_checked: 0, violations: 0, violations_off_band: 0, band_cells: 0 };
    for i in 0..field.grid.len() {
        if skip[i] {
            continue;
        }
        rep.cells_checked += 1;
        if band[i] {
            rep.band_cells += 1;
        }
        let phi = field.values[i];
        let bad = if region.occupancy[i] >= 0.5 { phi <= -tol } else { phi.abs() >= tol };
        if bad {
            rep.violations += 1;
            if !band[i] {
                rep.violations_off_band += 1;
            }
        }
    }
    rep
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportBound {
    pub center: Point,
    pub radius: f64,
    /// `max |Phi|` on the circle `|x - a| = r`.
    pub max_phi: f64,
    pub constant: f64,
    /// `r + C sqrt(M)`.
    pub predicted_radius: f64,
    /// Largest distance from `a` to an occupied cell center.
    pub support_radius: f64,
    pub contained: bool,
    /// Smallest `C` for which containment holds, `(d_max - r)^+ / sqrt(M)`.
    pub c_est: f64,
}

/// Compares the support of the region with `D(a, r + C sqrt(M))`. Points
/// on the circle are evaluated by direct convolution. Containment allows
/// one cell of slack for the discretized boundary.
pub fn support_bound_check(region: &ScreeningRegion, a: Point, r: f64, constant: f64) -> Result<SupportBound> {
    let g = &region.grid;
    let h = g.spacing;
    if !(r > 0.0 && r.is_finite()) || !a.is_finite() {
        return Err(LabError::invalid("support check needs a finite center and r > 0"));
    }
    if !g.contains_disk(a, r) {
        return Err(LabError::invalid("support check circle leaves the grid"));
    }
    if region.sources.iter().any(|s| (s.dist(a) - r).abs() < h) {
        return Err(LabError::invalid("support check circle passes through a source"));
    }
    let samples = ((2.0 * PI * r / h).ceil() as usize).max(64);
    let supp = support(region);
    let max_phi = (0..samples)
        .into_par_iter()
        .map(|j| {
            let t = 2.0 * PI * j as f64 / samples as f64;
            let p = a + Point::new(r * t.cos(), r * t.sin());
            let mut acc = 0.0;
            for &(sx, sy, o) in &supp {
                let d = g.center(sx, sy).dist(p);
                acc += o * if d < 0.5 * h { cell_average_log_kernel(h) } else { -d.ln() };
            }
            (source_potential(&region.sources, p, h) - g.cell_area() * acc).abs()
        })
        .reduce(|| 0.0, f64::max);
    let support_radius = region.support_radius(a);
    let predicted_radius = r + constant * max_phi.sqrt();
    let excess = (support_radius - h - r).max(0.0);
    let c_est = if excess == 0.0 {
        0.0
    } else if max_phi > 0.0 {
        excess / max_phi.sqrt()
    } else {
        f64::INFINITY
    };
    Ok(SupportBound {
        center: a,
        radius: r,
        max_phi,
        constant,
        predicted_radius,
        support_radius,
        contained: support_radius <= predicted_radius + h,
        c_est,
    })
}

/// `n` points uniform in the disk of area `n` around the origin.
pub fn random_cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rad = (n as f64 / PI).sqrt();
    (0..n)
        .map(|_| {
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            let r = rad * s.sqrt();
            Point::new(r * (2.0 * PI * t).cos(), r * (2.0 * PI * t).sin())
        })
        .collect()
}

/// Test circle for a cloud: centered at the centroid, half a unit beyond the
/// farthest source.
pub fn cloud_test_circle(points: &[Point]) -> (Point, f64) {
    let a = points.iter().fold(Point::ORIGIN, |acc, &p| acc + p) * (1.0 / points.len() as f64);
    let r = points.iter().map(|p| p.dist(a)).fold(0.0, f64::max) + 0.5;
    (a, r)
}

#[derive(Clone, Debug, Serialize)]
pub struct Calibration {
    pub c_est: Vec<f64>,
    /// Smallest constant giving containment on every instance.
    pub max: f64,
    pub quantile_95: f64,
}

/// Runs the support check on `instances` random 20-point clouds and
/// collects the smallest sufficient constants.
pub fn calibrate_support_constant(instances: usize, seed: u64, opts: &ScreeningOptions) -> Result<Calibration> {
    let c_est: Vec<f64> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let pts = random_cloud(20, seed.wrapping_add(i));
            let region = screening_region(&pts, opts)?;
            let (a, r) = cloud_test_circle(&pts);
            Ok(support_bound_check(&region, a, r, 0.0)?.c_est)
        })
        .collect::<Result<_>>()?;
    let mut sorted = c_est.clone();
    sorted.sort_by(f64::total_cmp);
    let max = sorted.last().copied().unwrap_or(0.0);
    let q = sorted.get(((sorted.len() as f64 * 0.95).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
    Ok(Calibration { c_est, max, quantile_95: q })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(h: f64) -> ScreeningOptions {
        ScreeningOptions { spacing: h, margin: 0.4, ..Default::default() }
    }

    /// Literal toppling: repeatedly push the excess of any cell above 1 to
    /// its neighbours, in the given cell order.
    fn naive_toppling(points: &[Point], grid: Grid, reverse: bool) -> Vec<f64> {
        let mut nu = deposit(points, &grid).unwrap();
        let nx = grid.nx;
        let mut cells: Vec<usize> = (1..grid.ny - 1).flat_map(|y| (1..nx - 1).map(move |x| y * nx + x)).collect();
        if reverse {
            cells.reverse();
        }
        loop {
            let mut excess = 0.0f64;
            for &i in &cells {
                let e = nu[i] - 1.0;
                if e > 0.0 {
                    excess = excess.max(e);
                    nu[i] = 1.0;
                    for j in [i - 1, i + 1, i - nx, i + nx] {
                        nu[j] += e / 4.0;
                    }
                }
            }
            if excess < 1e-10 {
                return nu;
            }
        }
    }

    #[test]
    fn single_source_is_unit_disk() {
        let r = screening_region(&[Point::new(0.013, -0.021)], &opts(0.02)).unwrap();
        assert_close!(r.area, 1.0, 1e-9);
        let r0 = PI.powf(-0.5);
        for i in r.boundary_cells() {
            let d = r.grid.center_of(i).dist(Point::new(0.013, -0.021));
            assert!((d - r0).abs() <= 2.0 * r.grid.spacing, "boundary cell at {d}");
        }
        assert!(r.occupancy.iter().all(|&o| (0.0..=1.0).contains(&o)));
    }

    #[test]
    fn coincident_sources_make_a_bigger_disk() {
        let a = Point::new(0.3, 0.1);
        let r = screening_region(&[a; 4], &opts(0.02)).unwrap();
        assert_close!(r.area, 4.0, 1e-9);
        assert_close!(r.support_radius(a), (4.0 / PI).sqrt(), 2.0 * 0.02);
    }

    #[test]
    fn odometer_and_convolution_agree() {
        let pts = [Point::new(0.0, 0.0), Point::new(0.7, 0.2), Point::new(-0.3, 0.9)];
        let r = screening_region(&pts, &opts(0.025)).unwrap();
        let direct = potential_field(&r);
        let odo = r.odometer_potential();
        let tol = potential_tolerance(0.025, pts.len());
        let sing: std::collections::HashSet<usize> = direct.singular.iter().copied().collect();
        let worst = (0..r.grid.len())
            .filter(|i| !sing.contains(i))
            .map(|i| (direct.values[i] - odo.values[i]).abs())
            .fold(0.0, f64::max);
        assert!(worst < tol, "max difference {worst}, tol {tol}");
        assert!(direct.max_abs_on_frame() < tol);
        let rep = sign_dichotomy(&r, &direct, tol);
        assert_eq!(rep.violations_off_band, 0, "{rep:?}");
    }

    #[test]
    fn matches_literal_toppling_in_any_order() {
        let pts = [Point::new(0.05, 0.0), Point::new(0.5, 0.3)];
        let o = ScreeningOptions { spacing: 0.1, margin: 0.3, ..Default::default() };
        let r = screening_region(&pts, &o).unwrap();
        for reverse in [false, true] {
            let nu = naive_toppling(&pts, r.grid, reverse);
            let worst = nu.iter().zip(&r.occupancy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "reverse={reverse}: {worst}");
        }
    }

    #[test]
    fn small_grid_is_reported() {
        let pts = [Point::ORIGIN; 3];
        let g = Grid::centered(Point::ORIGIN, 0.8, 0.05).unwrap();
        match screening_region_on(&pts, g, &opts(0.05)) {
            Err(LabError::Grid(_)) => {}
            other => panic!("expected a grid error, got {other:?}"),
        }
    }

    #[test]
    fn record_roundtrip() {
        let r = screening_region(&[Point::ORIGIN, Point::new(1.0, 0.0)], &opts(0.05)).unwrap();
        let rec = r.record();
        let back: RegionRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back.occupancy().unwrap(), r.occupancy);
    }

    #[test]
    fn support_check_single_source() {
        let r = screening_region(&[Point::ORIGIN], &opts(0.02)).unwrap();
        let s = support_bound_check(&r, Point::ORIGIN, 1.0, DEFAULT_SUPPORT_CONSTANT).unwrap();
        assert!(s.contained);
        assert_eq!(s.c_est, 0.0);
        assert!(s.max_phi < potential_tolerance(0.02, 1));
        assert!(support_bound_check(&r, Point::new(0.5, 0.0), 0.5, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_options() {
        assert!(screening_region(&[], &ScreeningOptions::default()).is_err());
        let bad = ScreeningOptions { omega: Some(2.5), ..Default::default() };
        assert!(screening_region(&[Point::ORIGIN], &bad).is_err());
    }
}
