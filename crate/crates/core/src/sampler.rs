//! Metropolis sampling of the plasma measure `exp(-H_F)` and the observables
//! built on it: one-body densities, coarse-grained density maxima,
//! quasi-hole charge deficits and trial energies.
//!
//! One sweep is `N` single-particle proposals with isotropic Gaussian
//! displacements. Acceptance is `min(1, exp(delta log-weight))`; the
//! proposal is symmetric so this is exact detailed balance. The temperature
//! is fixed to 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::Grid;
use crate::model::{
    log_plasma_weight, log_weight_change, CorrelationFactor, PlasmaParams, Point, PointConfiguration,
    ScaledPotentials,
};

/// Minimum number of proposals inspected before a window with no accepted
/// move is reported as a diagnostics failure.
const ZERO_ACCEPTANCE_WINDOW: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Total sweeps per chain, burn-in included.
    pub steps: usize,
    pub burn_in: usize,
    /// Gaussian step width; `None` selects the magnetic length `sqrt(2/B)`.
    #[serde(default)]
    pub proposal_scale: Option<f64>,
    pub seed: u64,
    #[serde(default = "one")]
    pub chains: usize,
}

fn one() -> usize {
    1
}

impl ChainConfig {
    pub fn new(steps: usize, burn_in: usize, seed: u64) -> Self {
        ChainConfig { steps, burn_in, proposal_scale: None, seed, chains: 1 }
    }

    pub fn with_chains(mut self, chains: usize) -> Self {
        self.chains = chains;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.proposal_scale = Some(scale);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(LabError::invalid(format!(
                "steps ({}) must exceed burn_in ({})",
                self.steps, self.burn_in
            )));
        }
        if let Some(s) = self.proposal_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(LabError::invalid("proposal_scale must be > 0"));
            }
        }
        if self.chains < 1 {
            return Err(LabError::invalid("chains must be >= 1"));
        }
        Ok(())
    }

    pub fn scale_for(&self, params: &PlasmaParams) -> f64 {
        self.proposal_scale.unwrap_or_else(|| params.magnetic_length())
    }

    /// Sweeps kept after burn-in, summed over chains.
    pub fn kept_sweeps(&self) -> usize {
        (self.steps - self.burn_in) * self.chains
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, o: &AcceptanceStats) {
        self.proposed += o.proposed;
        self.accepted += o.accepted;
    }
}

/// A single Metropolis chain. Each call to [`Chain::next_sample`] performs
/// one sweep; burn-in sweeps are consumed silently.
pub struct Chain<'a> {
    params: PlasmaParams,
    corr: &'a CorrelationFactor,
    points: Vec<Point>,
    rng: ChaCha8Rng,
    scale: f64,
    sweep: usize,
    steps: usize,
    burn_in: usize,
    stats: AcceptanceStats,
    window_proposed: usize,
    window_accepted: usize,
}

impl<'a> Chain<'a> {
    /// Chain `index` of `cfg`, started from a uniform draw in the droplet
    /// disk. Its random stream depends only on `(cfg.seed, index)`.
    pub fn new(params: &PlasmaParams, corr: &'a CorrelationFactor, cfg: &ChainConfig, index: u64) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        let radius = params.droplet_radius();
        let mut init = None;
        for _ in 0..1000 {
            let pts: Vec<Point> = (0..params.n)
                .map(|_| {
                    let r = radius * rng.random::<f64>().sqrt();
                    let t = std::f64::consts::TAU * rng.random::<f64>();
                    Point::new(r * t.cos(), r * t.sin())
                })
                .collect();
            let c = PointConfiguration { points: pts };
            if log_plasma_weight(&c, params, corr)?.is_finite() {
                init = Some(c.points);
                break;
            }
        }
        let points = init.ok_or_else(|| LabError::invalid("could not find a starting configuration of finite weight"))?;
        Ok(Self::from_points(params, corr, cfg, rng, points))
    }

    /// Chain started from an explicit configuration of finite weight.
    pub fn from_configuration(
        params: &PlasmaParams,
        corr: &'a CorrelationFactor,
        cfg: &ChainConfig,
        index: u64,
        start: PointConfiguration,
    ) -> Result<Self> {
        cfg.validate()?;
        if !log_plasma_weight(&start, params, corr)?.is_finite() {
            return Err(LabError::invalid("starting configuration has zero weight"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        Ok(Self::from_points(params, corr, cfg, rng, start.points))
    }

    fn from_points(
        params: &PlasmaParams,
        corr: &'a CorrelationFactor,
        cfg: &ChainConfig,
        rng: ChaCha8Rng,
        points: Vec<Point>,
    ) -> Self {
        Chain {
            params: *params,
            corr,
            points,
            rng,
            scale: cfg.scale_for(params),
            sweep: 0,
            steps: cfg.steps,
            burn_in: cfg.burn_in,
            stats: AcceptanceStats::default(),
            window_proposed: 0,
            window_accepted: 0,
        }
    }

    pub fn stats(&self) -> AcceptanceStats {
        self.stats
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    fn sweep_once(&mut self) -> Result<()> {
        let n = self.points.len();
        for _ in 0..n {
            let j = self.rng.random_range(0..n);
            let dx: f64 = StandardNormal.sample(&mut self.rng);
            let dy: f64 = StandardNormal.sample(&mut self.rng);
            let to = self.points[j] + Point::new(dx, dy) * self.scale;
            let delta = log_weight_change(&mut self.points, &self.params, self.corr, j, to);
            let u: f64 = self.rng.random();
            self.stats.proposed += 1;
            self.window_proposed += 1;
            // u in [0,1): ln(u) < delta accepts with probability min(1, e^delta)
            if delta >= 0.0 || u.ln() < delta {
                self.points[j] = to;
                self.stats.accepted += 1;
                self.window_accepted += 1;
            }
        }
        self.sweep += 1;
        if self.window_proposed >= ZERO_ACCEPTANCE_WINDOW {
            if self.window_accepted == 0 {
                return Err(LabError::Diagnostics(format!(
                    "no proposal accepted in the last {} proposals (sweep {}); reduce proposal_scale (currently {})",
                    self.window_proposed, self.sweep, self.scale
                )));
            }
            self.window_proposed = 0;
            self.window_accepted = 0;
        }
        Ok(())
    }

    /// Advances past burn-in and one more sweep, returning the configuration;
    /// `None` once `steps` sweeps are done.
    pub fn next_sample(&mut self) -> Option<Result<&[Point]>> {
        while self.sweep < self.burn_in {
            if let Err(e) = self.sweep_once() {
                return Some(Err(e));
            }
        }
        if self.sweep >= self.steps {
            return None;
        }
        Some(self.sweep_once().map(|_| self.points.as_slice()))
    }
}

impl Iterator for Chain<'_> {
    type Item = Result<PointConfiguration>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_sample().map(|r| r.map(|p| PointConfiguration { points: p.to_vec() }))
    }
}

/// Runs the chains of `cfg` in parallel. `consume` receives the chain index
/// and the chain; its results come back in chain order with the pooled
/// acceptance statistics.
pub fn run_chains<T, F>(
    params: &PlasmaParams,
    corr: &CorrelationFactor,
    cfg: &ChainConfig,
    consume: F,
) -> Result<(Vec<T>, Vec<AcceptanceStats>)>
where
    T: Send,
    F: Fn(usize, &mut Chain<'_>) -> Result<T> + Sync,
{
    cfg.validate()?;
    let results: Vec<Result<(T, AcceptanceStats)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut chain = Chain::new(params, corr, cfg, c as u64)?;
            let out = consume(c, &mut chain)?;
            Ok((out, chain.stats()))
        })
        .collect();
    let mut outs = Vec::with_capacity(cfg.chains);
    let mut stats = Vec::with_capacity(cfg.chains);
    for r in results {
        let (o, s) = r?;
        outs.push(o);
        stats.push(s);
    }
    Ok((outs, stats))
}

/// Binned one-body density in particles per unit area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: Grid,
    pub values: Vec<f64>,
    /// Number of configurations accumulated.
    pub total_weight: f64,
}

impl DensityGrid {
    /// `h^2 * sum(values)`: expected particle count inside the grid.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn uniform(grid: Grid, value: f64) -> Self {
        DensityGrid { grid, values: vec![value; grid.len()], total_weight: 1.0 }
    }

    /// Mean density over `D(c, r)` using fractional cell coverage.
    pub fn disk_mean(&self, c: Point, r: f64) -> f64 {
        let cov = self.grid.disk_coverage(c, r, 8);
        let w: f64 = cov.iter().map(|&(_, f)| f).sum();
        cov.iter().map(|&(i, f)| f * self.values[i]).sum::<f64>() / w
    }

    /// Mean density over the annulus `r0 <= |x - c| < r1`, by cell center.
    pub fn ring_mean(&self, c: Point, r0: f64, r1: f64) -> f64 {
        let (mut s, mut k) = (0.0, 0usize);
        for (i, &v) in self.values.iter().enumerate() {
            let d = self.grid.center_of(i).dist(c);
            if d >= r0 && d < r1 {
                s += v;
                k += 1;
            }
        }
        if k == 0 {
            0.0
        } else {
            s / k as f64
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.grid.write_csv(out, "rho", &self.values)
    }
}

/// Histogram accumulator; merging is commutative.
#[derive(Clone, Debug)]
pub struct DensityAccumulator {
    grid: Grid,
    counts: Vec<f64>,
    samples: u64,
    outside: u64,
}

impl DensityAccumulator {
    pub fn new(grid: Grid) -> Result<Self> {
        grid.validate()?;
        Ok(DensityAccumulator { grid, counts: vec![0.0; grid.len()], samples: 0, outside: 0 })
    }

    pub fn add(&mut self, points: &[Point]) {
        for &p in points {
            match self.grid.locate(p) {
                Some((ix, iy)) => self.counts[self.grid.index(ix, iy)] += 1.0,
                None => self.outside += 1,
            }
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &DensityAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.samples += other.samples;
        self.outside += other.outside;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn finish(&self) -> Result<DensityGrid> {
        if self.samples == 0 {
            return Err(LabError::invalid("density estimate needs at least one sample"));
        }
        let norm = 1.0 / (self.samples as f64 * self.grid.cell_area());
        Ok(DensityGrid {
            grid: self.grid,
            values: self.counts.iter().map(|c| c * norm).collect(),
            total_weight: self.samples as f64,
        })
    }
}

/// Histogram estimate of the one-body density from a set of configurations.
pub fn estimate_density<'s, I>(samples: I, grid: &Grid) -> Result<DensityGrid>
where
    I: IntoIterator<Item = &'s PointConfiguration>,
{
    let mut acc = DensityAccumulator::new(*grid)?;
    for s in samples {
        acc.add(&s.points);
    }
    acc.finish()
}

/// Output of [`sample_density`].
#[derive(Clone, Debug)]
pub struct DensityRun {
    pub density: DensityGrid,
    pub acceptance: Vec<AcceptanceStats>,
}

impl DensityRun {
    pub fn acceptance_rate(&self) -> f64 {
        let mut s = AcceptanceStats::default();
        self.acceptance.iter().for_each(|a| s.merge(a));
        s.rate()
    }
}

/// Runs all chains, accumulating one histogram per chain and merging them.
pub fn sample_density(
    params: &PlasmaParams,
    corr: &CorrelationFactor,
    cfg: &ChainConfig,
    grid: &Grid,
) -> Result<DensityRun> {
    let (accs, acceptance) = run_chains(params, corr, cfg, |_, chain| {
        let mut acc = DensityAccumulator::new(*grid)?;
        while let Some(s) = chain.next_sample() {
            acc.add(s?);
        }
        Ok(acc)
    })?;
    let mut total = DensityAccumulator::new(*grid)?;
    for a in &accs {
        total.merge(a);
    }
    Ok(DensityRun { density: total.finish()?, acceptance })
}

/// Square grid covering `D(0, extent * R)` with the given cell size.
pub fn droplet_grid(params: &PlasmaParams, extent: f64, spacing: f64) -> Result<Grid> {
    Grid::centered(Point::ORIGIN, extent * params.droplet_radius(), spacing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncompressibilityReport {
    pub coarse_radius: f64,
    pub max_coarse_density: f64,
    pub cap: f64,
    pub excess_ratio: f64,
    /// Cell centers where the coarse-grained density is within 1e-9
    /// (relative) of its maximum.
    pub maxima: Vec<Point>,
}

/// Default coarse-graining radius: three mean inter-particle spacings.
pub fn default_coarse_radius(params: &PlasmaParams) -> f64 {
    3.0 * params.mean_spacing()
}

/// Convolves the density with the normalized indicator of `D(0, r)`;
/// density outside the grid counts as zero.
pub fn coarse_grain(density: &DensityGrid, coarse_radius: f64) -> Vec<f64> {
    let g = density.grid;
    let stencil = g.disk_coverage(g.center(0, 0), coarse_radius, 8);
    let total: f64 = stencil.iter().map(|&(_, f)| f).sum();
    let offsets: Vec<(isize, isize, f64)> = stencil
        .iter()
        .map(|&(i, f)| {
            let (ix, iy) = g.coords(i);
            (ix as isize, iy as isize, f / total)
        })
        .collect();
    // The stencil was computed around cell (0,0) and clipped to the grid;
    // rebuild it unclipped from the first quadrant by symmetry.
    let mut full = Vec::with_capacity(offsets.len() * 4);
    for &(dx, dy, w) in &offsets {
        for (sx, sy) in [(1, 1), (-1, 1), (1, -1), (-1, -1)] {
            if (sx < 0 && dx == 0) || (sy < 0 && dy == 0) {
                continue;
            }
            full.push((sx * dx, sy * dy, w));
        }
    }
    let norm: f64 = full.iter().map(|t| t.2).sum();
    (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let (ix, iy) = g.coords(idx);
            let mut s = 0.0;
            for &(dx, dy, w) in &full {
                let (x, y) = (ix as isize + dx, iy as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < g.nx && (y as usize) < g.ny {
                    s += w * density.values[g.index(x as usize, y as usize)];
                }
            }
            s / norm
        })
        .collect()
}

pub fn incompressibility_check(
    density: &DensityGrid,
    params: &PlasmaParams,
    coarse_radius: f64,
) -> Result<IncompressibilityReport> {
    let min_radius = 2.0 * params.mean_spacing();
    if !(coarse_radius >= min_radius) {
        return Err(LabError::invalid(format!(
            "coarse_radius {coarse_radius} is below twice the mean inter-particle spacing ({min_radius})"
        )));
    }
    if coarse_radius < 2.0 * density.grid.spacing {
        return Err(LabError::invalid("coarse_radius is below the grid resolution"));
    }
    let coarse = coarse_grain(density, coarse_radius);
    let max = coarse.iter().cloned().fold(0.0, f64::max);
    let maxima = coarse
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v >= max * (1.0 - 1e-9))
        .map(|(i, _)| density.grid.center_of(i))
        .collect();
    let cap = params.cap_density();
    Ok(IncompressibilityReport { coarse_radius, max_coarse_density: max, cap, excess_ratio: max / cap, maxima })
}

/// `int_{D(a, r)} (baseline - density)`: the charge pushed out by a hole at `a`.
pub fn quasihole_deficit(density: &DensityGrid, baseline: &DensityGrid, center: Point, probe_radius: f64) -> Result<f64> {
    if density.grid != baseline.grid {
        return Err(LabError::invalid("density and baseline live on different grids"));
    }
    if !density.grid.contains_disk(center, probe_radius) {
        return Err(LabError::invalid("probe disk leaves the grid"));
    }
    let cov = density.grid.disk_coverage(center, probe_radius, 8);
    let h2 = density.grid.cell_area();
    Ok(cov.iter().map(|&(i, f)| f * (baseline.values[i] - density.values[i])).sum::<f64>() * h2)
}

/// Monte Carlo mean with a batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub batches: usize,
    pub samples: usize,
}

pub const DEFAULT_BATCHES: usize = 20;
pub const MIN_BATCHES: usize = 10;

/// Batch-means estimate over a time series. Trailing samples that do not
/// fill a batch are dropped.
pub fn batch_means(series: &[f64], batches: usize) -> Result<EnergyEstimate> {
    if batches < MIN_BATCHES {
        return Err(LabError::invalid(format!("need at least {MIN_BATCHES} batches, got {batches}")));
    }
    let per = series.len() / batches;
    if per == 0 {
        return Err(LabError::invalid(format!("{} samples cannot fill {batches} batches", series.len())));
    }
    let means: Vec<f64> = series.chunks_exact(per).take(batches).map(|c| c.iter().sum::<f64>() / per as f64).collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    Ok(EnergyEstimate { mean, std_error: (var / batches as f64).sqrt(), batches, samples: per * batches })
}

/// `sum_j V(x_j) + lambda sum_{i<j} W(x_i - x_j)` for one configuration.
pub fn configuration_energy(points: &[Point], pot: &ScaledPotentials) -> f64 {
    let external: f64 = points.iter().map(|&p| pot.external(p)).sum();
    if pot.lambda() == 0.0 || pot.spec.w.is_zero() {
        return external;
    }
    let mut pair = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            pair += pot.pair(points[i] - points[j]);
        }
    }
    external + pot.lambda() * pair
}

/// Trial energy from a set of samples of `exp(-H_F)`.
pub fn trial_energy<'s, I>(samples: I, pot: &ScaledPotentials, batches: usize) -> Result<EnergyEstimate>
where
    I: IntoIterator<Item = &'s PointConfiguration>,
{
    let series: Vec<f64> = samples.into_iter().map(|s| configuration_energy(&s.points, pot)).collect();
    batch_means(&series, batches)
}

/// Energy series of one chain, sampled every sweep.
pub fn chain_energy_series(chain: &mut Chain<'_>, pot: &ScaledPotentials) -> Result<Vec<f64>> {
    let mut series = Vec::new();
    while let Some(s) = chain.next_sample() {
        series.push(configuration_energy(s?, pot));
    }
    Ok(series)
}

/// Trial energy sampled directly from the chains of `cfg`. Batches are
/// formed per chain and pooled, so chains never share a batch.
pub fn sample_trial_energy(
    params: &PlasmaParams,
    corr: &CorrelationFactor,
    cfg: &ChainConfig,
    pot: &ScaledPotentials,
    batches: usize,
) -> Result<EnergyEstimate> {
    if batches < MIN_BATCHES {
        return Err(LabError::invalid(format!("need at least {MIN_BATCHES} batches, got {batches}")));
    }
    let per_chain = batches.div_ceil(cfg.chains).max(1);
    let (series, _) = run_chains(params, corr, cfg, |_, chain| chain_energy_series(chain, pot))?;
    let mut batch_means_all = Vec::new();
    let mut samples = 0;
    for s in &series {
        let per = s.len() / per_chain;
        if per == 0 {
            return Err(LabError::invalid("chain too short for the requested batches"));
        }
        for c in s.chunks_exact(per).take(per_chain) {
            batch_means_all.push(c.iter().sum::<f64>() / per as f64);
            samples += per;
        }
    }
    let b = batch_means_all.len();
    if b < MIN_BATCHES {
        return Err(LabError::invalid(format!("only {b} batches available")));
    }
    let mean = batch_means_all.iter().sum::<f64>() / b as f64;
    let var = batch_means_all.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    Ok(EnergyEstimate { mean, std_error: (var / b as f64).sqrt(), batches: b, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PotentialSpec, QuasiHoleSet, RadialPair, ScalarField, scaled_potentials};

    #[test]
    fn identical_seed_gives_identical_stream() {
        let p = PlasmaParams::new(1.0, 2, 5).unwrap();
        let corr = CorrelationFactor::None;
        let cfg = ChainConfig::new(30, 5, 42);
        let a: Vec<_> = Chain::new(&p, &corr, &cfg, 0).unwrap().map(|r| r.unwrap()).collect();
        let b: Vec<_> = Chain::new(&p, &corr, &cfg, 0).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(a.len(), 25);
        assert_eq!(a, b);
        let c: Vec<_> = Chain::new(&p, &corr, &cfg, 1).unwrap().map(|r| r.unwrap()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn huge_steps_trigger_diagnostics() {
        let p = PlasmaParams::new(1.0, 3, 8).unwrap();
        let corr = CorrelationFactor::None;
        let cfg = ChainConfig::new(500, 0, 1).with_scale(1e6);
        let mut chain = Chain::new(&p, &corr, &cfg, 0).unwrap();
        let mut err = None;
        while let Some(r) = chain.next_sample() {
            if let Err(e) = r {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(LabError::Diagnostics(_))), "{err:?}");
    }

    #[test]
    fn config_validation() {
        assert!(ChainConfig::new(10, 10, 0).validate().is_err());
        assert!(ChainConfig::new(10, 0, 0).with_scale(0.0).validate().is_err());
        assert!(ChainConfig::new(10, 0, 0).with_chains(0).validate().is_err());
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        let g = Grid::centered(Point::ORIGIN, 1.0, 0.1).unwrap();
        let empty: Vec<PointConfiguration> = vec![];
        assert!(estimate_density(&empty, &g).is_err());
    }

    #[test]
    fn uniform_density_at_cap_has_unit_excess() {
        let p = PlasmaParams::new(1.0, 3, 64).unwrap();
        let g = Grid::centered(Point::ORIGIN, 30.0, 0.5).unwrap();
        let d = DensityGrid::uniform(g, p.cap_density());
        let rep = incompressibility_check(&d, &p, default_coarse_radius(&p)).unwrap();
        assert_close!(rep.excess_ratio, 1.0, 1e-12);
        assert!(incompressibility_check(&d, &p, p.mean_spacing()).is_err());
    }

    #[test]
    fn deficit_of_identical_densities_is_zero_and_checks_grid() {
        let g = Grid::centered(Point::ORIGIN, 5.0, 0.25).unwrap();
        let d = DensityGrid::uniform(g, 0.3);
        assert_eq!(quasihole_deficit(&d, &d, Point::ORIGIN, 2.0).unwrap(), 0.0);
        assert!(quasihole_deficit(&d, &d, Point::new(4.0, 0.0), 2.0).is_err());
        let g2 = Grid::centered(Point::ORIGIN, 5.0, 0.5).unwrap();
        assert!(quasihole_deficit(&d, &DensityGrid::uniform(g2, 0.3), Point::ORIGIN, 1.0).is_err());
    }

    #[test]
    fn constant_potential_energy_is_exact() {
        let p = PlasmaParams::new(1.0, 2, 6).unwrap();
        let corr = CorrelationFactor::None;
        let spec = PotentialSpec { v: ScalarField::Constant { value: 1.7 }, w: RadialPair::Zero, lambda: 0.0 };
        let pot = scaled_potentials(&spec, p.n).unwrap();
        let samples: Vec<_> = Chain::new(&p, &corr, &ChainConfig::new(300, 10, 3), 0).unwrap().map(|r| r.unwrap()).collect();
        let e = trial_energy(&samples, &pot, 20).unwrap();
        assert_close!(e.mean, 1.7 * 6.0, 1e-12);
        assert!(trial_energy(&samples, &pot, 9).is_err());
    }

    #[test]
    fn accumulator_merge_is_commutative() {
        let g = Grid::centered(Point::ORIGIN, 2.0, 0.5).unwrap();
        let a_pts = [Point::new(0.1, 0.2), Point::new(-1.2, 0.7)];
        let b_pts = [Point::new(1.9, -1.9), Point::new(5.0, 0.0)];
        let mut a = DensityAccumulator::new(g).unwrap();
        a.add(&a_pts);
        let mut b = DensityAccumulator::new(g).unwrap();
        b.add(&b_pts);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.finish().unwrap(), ba.finish().unwrap());
    }

    #[test]
    fn quasi_hole_chain_never_sits_on_the_zero() {
        let p = PlasmaParams::new(1.0, 1, 3).unwrap();
        let corr = CorrelationFactor::quasi_holes(QuasiHoleSet::single(Point::ORIGIN, 2).unwrap());
        for s in Chain::new(&p, &corr, &ChainConfig::new(100, 0, 9), 0).unwrap() {
            let s = s.unwrap();
            assert!(log_plasma_weight(&s, &p, &corr).unwrap().is_finite());
        }
    }
}
