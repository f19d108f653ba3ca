//! Capped-density energies: the bathtub fill for a pure external potential,
//! the flocking energy with a pair interaction, and the comparison of the
//! flocking energy with quasi-hole trial energies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::Grid;
use crate::model::{Point, RadialPair, ScaledPotentials};

mod harness;

pub use harness::{theorem2_harness, HarnessBudget, HoleFamily, Theorem2Options, Theorem2Report, TrialEvaluation};

/// Cell densities `0 <= rho <= cap` on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub cap: f64,
}

impl DensityProfile {
    /// `h^2 * sum(rho)`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// `h^2 * sum(V rho)`.
    pub fn linear_energy(&self, potential: &[f64]) -> f64 {
        self.values.iter().zip(potential).filter(|(r, _)| **r != 0.0).map(|(r, v)| r * v).sum::<f64>()
            * self.grid.cell_area()
    }

    /// Checks the cap and, if given, the mass to `1e-6` relative.
    pub fn check(&self, mass: Option<f64>) -> Result<()> {
        if let Some(i) = self.values.iter().position(|&r| !(0.0..=self.cap).contains(&r)) {
            return Err(LabError::invalid(format!("density {} at cell {i} outside [0, {}]", self.values[i], self.cap)));
        }
        if let Some(n) = mass {
            let m = self.mass();
            if (m - n).abs() > 1e-6 * n.abs().max(1.0) {
                return Err(LabError::invalid(format!("profile mass {m} differs from {n}")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.grid.write_csv(out, "rho", &self.values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathtubFill {
    pub profile: DensityProfile,
    /// Fill level: the potential value of the last (possibly partial) cell.
    pub level: f64,
    pub energy: f64,
}

fn check_fill_input(grid: &Grid, potential: &[f64], cap: f64, mass: f64) -> Result<()> {
    grid.validate()?;
    if potential.len() != grid.len() {
        return Err(LabError::invalid(format!("{} potential values for {} cells", potential.len(), grid.len())));
    }
    if !(cap.is_finite() && cap > 0.0) {
        return Err(LabError::invalid("density cap must be > 0"));
    }
    if !(mass.is_finite() && mass >= 0.0) {
        return Err(LabError::invalid("mass must be >= 0"));
    }
    if cap * grid.cell_area() * (grid.len() as f64) < mass {
        return Err(LabError::invalid(format!(
            "grid capacity {} is below the mass {mass}",
            cap * grid.cell_area() * grid.len() as f64
        )));
    }
    if potential.iter().any(|v| !v.is_finite()) {
        return Err(LabError::invalid("potential must be finite on the grid"));
    }
    Ok(())
}

/// Fills cells at the cap in increasing order of `potential` (ties in
/// row-major order) until `mass` is placed; the last cell may be partial.
pub fn bathtub_fill(grid: &Grid, potential: &[f64], cap: f64, mass: f64) -> Result<BathtubFill> {
    check_fill_input(grid, potential, cap, mass)?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_unstable_by(|&a, &b| potential[a].total_cmp(&potential[b]).then(a.cmp(&b)));
    let (values, last) = fill_in_order(grid, &order, cap, mass);
    let level = last.map_or(f64::NEG_INFINITY, |i| potential[i]);
    let profile = DensityProfile { grid: *grid, values, cap };
    let energy = profile.linear_energy(potential);
    Ok(BathtubFill { profile, level, energy })
}

/// Places `mass` at the cap along `order`. Returns the densities and the
/// last cell touched.
fn fill_in_order(grid: &Grid, order: &[usize], cap: f64, mass: f64) -> (Vec<f64>, Option<usize>) {
    let cell_mass = cap * grid.cell_area();
    let full = ((mass / cell_mass).floor() as usize).min(order.len());
    let mut values = vec![0.0; grid.len()];
    for &i in &order[..full] {
        values[i] = cap;
    }
    let rest = mass - full as f64 * cell_mass;
    let mut last = full.checked_sub(1).map(|k| order[k]);
    if rest > 0.0 && full < order.len() {
        values[order[full]] = (rest / grid.cell_area()).min(cap);
        last = Some(order[full]);
    }
    (values, last)
}

/// The convolution `(W * rho)_i = h^2 sum_j W(c_i - c_j) rho_j`.
#[derive(Clone, Debug)]
pub enum PairKernel {
    Zero,
    Constant(f64),
    /// `amplitude * exp(-|x|^2 / width^2)`, applied as two 1D passes.
    Gaussian { amplitude: f64, kx: Vec<f64>, ky: Vec<f64> },
    /// Values by offset, `table[|dy| * nx + |dx|]`.
    Table(Vec<f64>),
}

impl PairKernel {
    /// Kernel of the scaled pair potential `W(x) = w(x / sqrt(N)) / N`.
    pub fn for_potentials(grid: &Grid, pot: &ScaledPotentials) -> Self {
        let n = pot.n as f64;
        match &pot.spec.w {
            RadialPair::Zero => PairKernel::Zero,
            RadialPair::Constant { value } => PairKernel::Constant(value / n),
            RadialPair::Gaussian { amplitude, width } => PairKernel::gaussian(grid, amplitude / n, width * n.sqrt()),
            RadialPair::Custom(_) => PairKernel::radial(grid, |r| pot.pair_radius(r)),
        }
    }

    pub fn gaussian(grid: &Grid, amplitude: f64, width: f64) -> Self {
        let h = grid.spacing;
        let k = |n: usize| (0..n).map(|d| (-((d as f64 * h) / width).powi(2)).exp()).collect();
        PairKernel::Gaussian { amplitude, kx: k(grid.nx), ky: k(grid.ny) }
    }

    /// Direct-sum kernel for any radial `w`.
    pub fn radial(grid: &Grid, w: impl Fn(f64) -> f64) -> Self {
        let h = grid.spacing;
        let mut t = vec![0.0; grid.len()];
        for dy in 0..grid.ny {
            for dx in 0..grid.nx {
                t[dy * grid.nx + dx] = w(h * ((dx * dx + dy * dy) as f64).sqrt());
            }
        }
        PairKernel::Table(t)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PairKernel::Zero)
    }

    pub fn apply(&self, grid: &Grid, rho: &[f64]) -> Vec<f64> {
        let h2 = grid.cell_area();
        let (nx, ny) = (grid.nx, grid.ny);
        match self {
            PairKernel::Zero => vec![0.0; rho.len()],
            PairKernel::Constant(c) => vec![c * h2 * rho.iter().sum::<f64>(); rho.len()],
            PairKernel::Gaussian { amplitude, kx, ky } => {
                // along x, then along y
                let mut tmp = vec![0.0; rho.len()];
                tmp.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
                    let src = &rho[iy * nx..(iy + 1) * nx];
                    let nz: Vec<(usize, f64)> = src.iter().copied().enumerate().filter(|(_, r)| *r != 0.0).collect();
                    for (ix, out) in row.iter_mut().enumerate() {
                        *out = nz.iter().map(|&(jx, r)| kx[ix.abs_diff(jx)] * r).sum();
                    }
                });
                let mut out = vec![0.0; rho.len()];
                out.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
                    for jy in 0..ny {
                        let k = ky[iy.abs_diff(jy)] * amplitude * h2;
                        if k == 0.0 {
                            continue;
                        }
                        for (o, t) in row.iter_mut().zip(&tmp[jy * nx..(jy + 1) * nx]) {
                            *o += k * t;
                        }
                    }
                });
                out
            }
            PairKernel::Table(t) => {
                let nz: Vec<(usize, usize, f64)> = rho
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| **r != 0.0)
                    .map(|(i, &r)| (i % nx, i / nx, r))
                    .collect();
                let mut out = vec![0.0; rho.len()];
                out.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
                    for (ix, o) in row.iter_mut().enumerate() {
                        *o = h2 * nz.iter().map(|&(jx, jy, r)| t[iy.abs_diff(jy) * nx + ix.abs_diff(jx)] * r).sum::<f64>();
                    }
                });
                out
            }
        }
    }
}

/// `h^2 sum V rho + (lambda / 2) h^2 sum rho (W * rho)`.
pub fn flocking_energy(grid: &Grid, potential: &[f64], kernel: &PairKernel, lambda: f64, rho: &[f64]) -> f64 {
    let h2 = grid.cell_area();
    let lin: f64 = potential.iter().zip(rho).filter(|(_, r)| **r != 0.0).map(|(v, r)| v * r).sum();
    if lambda == 0.0 || kernel.is_zero() {
        return h2 * lin;
    }
    let c = kernel.apply(grid, rho);
    h2 * (lin + 0.5 * lambda * dot(rho, &c))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlockingOptions {
    /// Stop once the duality gap is below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FlockingOptions {
    fn default() -> Self {
        FlockingOptions { tol: 1e-8, max_iters: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlockingResult {
    pub density: DensityProfile,
    pub energy: f64,
    /// Fill level of the last linear subproblem.
    pub multiplier: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final duality gap.
    pub gap: f64,
    /// Whether the energy never rose between iterates (to rounding).
    pub monotone: bool,
}

/// Flocking energy with `V = pot.external`, `W = pot.pair` and `lambda`
/// sampled at the cell centers of `grid`.
pub fn flocking_solve(
    grid: &Grid,
    pot: &ScaledPotentials,
    cap: f64,
    mass: f64,
    opts: &FlockingOptions,
) -> Result<FlockingResult> {
    let v: Vec<f64> = (0..grid.len()).map(|i| pot.external(grid.center_of(i))).collect();
    let kernel = PairKernel::for_potentials(grid, pot);
    flocking_solve_values(grid, &v, &kernel, pot.lambda(), cap, mass, opts)
}

/// Frank-Wolfe on the capped-mass polytope. The forward vertex is the
/// bathtub fill of the gradient `V + lambda W * rho`. A pairwise step
/// against the worst vertex of the face holding the iterate is taken
/// when it decreases the energy more; both use exact line search.
pub fn flocking_solve_values(
    grid: &Grid,
    potential: &[f64],
    kernel: &PairKernel,
    lambda: f64,
    cap: f64,
    mass: f64,
    opts: &FlockingOptions,
) -> Result<FlockingResult> {
    check_fill_input(grid, potential, cap, mass)?;
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(LabError::invalid("flocking tolerance and iteration budget must be positive"));
    }
    if !lambda.is_finite() {
        return Err(LabError::invalid("lambda must be finite"));
    }
    let h2 = grid.cell_area();
    let first = bathtub_fill(grid, potential, cap, mass)?;
    if lambda == 0.0 || kernel.is_zero() {
        return Ok(FlockingResult {
            energy: first.energy,
            multiplier: first.level,
            density: first.profile,
            iterations: 0,
            converged: true,
            gap: 0.0,
            monotone: true,
        });
    }
    let mut rho = first.profile.values;
    let mut conv = kernel.apply(grid, &rho);
    let energy_of = |rho: &[f64], conv: &[f64]| h2 * (dot(potential, rho) + 0.5 * lambda * dot(rho, conv));
    let mut energy = energy_of(&rho, &conv);
    let mut monotone = true;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    let (mut gap, mut level, mut it) = (f64::INFINITY, first.level, 0);
    while it < opts.max_iters {
        let g: Vec<f64> = potential.iter().zip(&conv).map(|(v, c)| v + lambda * c).collect();
        order.sort_unstable_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
        let (s, last) = fill_in_order(grid, &order, cap, mass);
        level = last.map_or(level, |i| g[i]);
        gap = h2 * (dot(&g, &rho) - dot(&g, &s));
        if gap < opts.tol {
            break;
        }
        it += 1;
        let away = face_away_vertex(&rho, &order, cap, mass, h2);
        let fw: Vec<f64> = s.iter().zip(&rho).map(|(a, b)| a - b).collect();
        let pw: Vec<f64> = s.iter().zip(&away).map(|(a, b)| a - b).collect();
        let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
        for (dir, gmax) in [(fw, 1.0), (pw.clone(), max_feasible_step(&rho, &pw, cap))] {
            if gmax <= 0.0 {
                continue;
            }
            let slope = h2 * dot(&g, &dir);
            if !(slope < 0.0) {
                continue;
            }
            let wd = kernel.apply(grid, &dir);
            let curv = lambda * h2 * dot(&dir, &wd);
            let step = if curv > 0.0 { (-slope / curv).min(gmax) } else { gmax };
            let gain = -(slope * step + 0.5 * curv * step * step);
            if best.as_ref().is_none_or(|b| gain > b.0) {
                best = Some((gain, step, dir, wd));
            }
        }
        let Some((_, step, dir, wd)) = best else { break };
        for ((r, d), (c, w)) in rho.iter_mut().zip(&dir).zip(conv.iter_mut().zip(&wd)) {
            *r = (*r + step * d).clamp(0.0, cap);
            *c += step * w;
        }
        snap(&mut rho, cap);
        if it % 200 == 0 {
            conv = kernel.apply(grid, &rho);
        }
        let e = energy_of(&rho, &conv);
        if e > energy + 1e-12 * energy.abs().max(1.0) {
            monotone = false;
        }
        energy = e;
    }
    // the clamps and snaps move mass by rounding amounts only
    let scale = mass / (rho.iter().sum::<f64>() * h2);
    if scale.is_finite() && (scale - 1.0).abs() < 1e-9 && rho.iter().all(|&r| r * scale <= cap) {
        rho.iter_mut().for_each(|r| *r *= scale);
    }
    let conv = kernel.apply(grid, &rho);
    let energy = energy_of(&rho, &conv);
    Ok(FlockingResult {
        density: DensityProfile { grid: *grid, values: rho, cap },
        energy,
        multiplier: level,
        iterations: it,
        converged: gap < opts.tol,
        gap,
        monotone,
    })
}

/// Values within rounding of 0 or the cap are set to it, so the face of
/// the iterate is well defined.
fn snap(rho: &mut [f64], cap: f64) {
    let eps = 1e-13 * cap;
    for r in rho.iter_mut() {
        if *r < eps {
            *r = 0.0;
        } else if cap - *r < eps {
            *r = cap;
        }
    }
}

/// Vertex maximizing `<g, v>` over the smallest face containing `rho`:
/// empty cells stay empty, full cells stay full, and the remaining mass
/// goes to the partially filled cells in decreasing order of `g`.
/// `order` sorts all cells by increasing `g`.
fn face_away_vertex(rho: &[f64], order: &[usize], cap: f64, mass: f64, h2: f64) -> Vec<f64> {
    let mut v: Vec<f64> = rho.iter().map(|&r| if r >= cap { cap } else { 0.0 }).collect();
    let mut rest = mass / h2 - v.iter().sum::<f64>();
    for &i in order.iter().rev() {
        if rest <= 0.0 {
            break;
        }
        if rho[i] > 0.0 && rho[i] < cap {
            let add = rest.min(cap);
            v[i] = add;
            rest -= add;
        }
    }
    v
}

fn max_feasible_step(rho: &[f64], d: &[f64], cap: f64) -> f64 {
    let mut t = f64::INFINITY;
    for (&r, &di) in rho.iter().zip(d) {
        if di > 0.0 {
            t = t.min((cap - r) / di);
        } else if di < 0.0 {
            t = t.min(r / -di);
        }
    }
    if t.is_finite() {
        t.max(0.0)
    } else {
        0.0
    }
}

/// Grid of half width `extent * sqrt(N / (pi cap))` centered at the origin.
pub fn flocking_grid(mass: f64, cap: f64, extent: f64, spacing: f64) -> Result<Grid> {
    if !(mass > 0.0 && cap > 0.0) {
        return Err(LabError::invalid("mass and cap must be > 0"));
    }
    Grid::centered(Point::ORIGIN, extent * (mass / (std::f64::consts::PI * cap)).sqrt(), spacing)
}
