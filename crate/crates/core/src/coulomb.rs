//! Zero-temperature configurations of the cleaned Coulomb energy, disk
//! counts, and audits of the exclusion rule against screening regions.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{cleaned_gradient, cleaned_hamiltonian, CorrelationFactor, Point, PointConfiguration};
use crate::screening::{screening_region, ScreeningOptions, ScreeningRegion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    RandomInDisk { radius: f64 },
    /// The `N` triangular-lattice sites (unit density) nearest the origin.
    Lattice,
    Explicit { points: Vec<Point> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Target for the sup-norm of the gradient.
    pub gradient_tol: f64,
    pub init: InitStrategy,
    pub restarts: usize,
    pub seed: u64,
}

impl MinimizeOptions {
    /// Random start in the unit-density disk of area `N`.
    pub fn for_n(n: usize, seed: u64) -> Self {
        MinimizeOptions {
            max_iters: 20_000,
            gradient_tol: 1e-9,
            init: InitStrategy::RandomInDisk { radius: (n as f64 / PI).sqrt() },
            restarts: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tol > 0.0) {
            return Err(LabError::invalid("gradient_tol must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(LabError::invalid("max_iters must be >= 1"));
        }
        if self.restarts < 1 {
            return Err(LabError::invalid("restarts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub config: PointConfiguration,
    pub energy: f64,
    pub initial_energy: f64,
    /// Sup-norm of the gradient at `config`.
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Index of the restart that produced the result.
    pub restart: usize,
}

fn flatten(g: &[Point]) -> Vec<f64> {
    g.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn initial_points(n: usize, init: &InitStrategy, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let mut pts = match init {
        InitStrategy::RandomInDisk { radius } => (0..n)
            .map(|_| {
                let r = radius * rng.random::<f64>().sqrt();
                let t = std::f64::consts::TAU * rng.random::<f64>();
                Point::new(r * t.cos(), r * t.sin())
            })
            .collect(),
        InitStrategy::Lattice => {
            // unit-density triangular lattice: spacing a with (sqrt(3)/2) a^2 = 1
            let a = (2.0 / 3f64.sqrt()).sqrt();
            let k = (n as f64).sqrt().ceil() as i64 + 2;
            let mut sites: Vec<Point> = Vec::new();
            for i in -k..=k {
                for j in -k..=k {
                    sites.push(Point::new(a * (i as f64 + 0.5 * j as f64), a * 0.5 * 3f64.sqrt() * j as f64));
                }
            }
            sites.sort_by(|p, q| p.norm_sqr().total_cmp(&q.norm_sqr()));
            sites.truncate(n);
            // break the lattice symmetry slightly so restarts differ
            sites.iter().map(|&p| p + Point::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.05).collect()
        }
        InitStrategy::Explicit { points } => {
            if points.len() != n {
                return Err(LabError::invalid(format!("explicit start has {} points, expected {n}", points.len())));
            }
            points.clone()
        }
    };
    jitter_coincident(&mut pts, rng);
    Ok(pts)
}

/// Moves points that coincide with an earlier point by about 1e-6.
fn jitter_coincident(pts: &mut [Point], rng: &mut ChaCha8Rng) {
    for i in 1..pts.len() {
        while pts[..i].iter().any(|&q| q == pts[i]) {
            let t = std::f64::consts::TAU * rng.random::<f64>();
            pts[i] = pts[i] + Point::new(t.cos(), t.sin()) * 1e-6;
        }
    }
}

struct Objective<'a> {
    corr: &'a CorrelationFactor,
}

impl Objective<'_> {
    fn energy(&self, x: &[f64]) -> f64 {
        let c = to_config(x);
        cleaned_hamiltonian(&c, self.corr).unwrap_or(f64::INFINITY)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(flatten(&cleaned_gradient(&to_config(x), self.corr)?))
    }
}

fn to_config(x: &[f64]) -> PointConfiguration {
    PointConfiguration { points: x.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect() }
}

/// Backtracking line search on the Armijo condition, up to rounding. Returns the accepted
/// point and energy, or `None` if no decrease was found.
fn backtrack(obj: &Objective<'_>, x: &[f64], e: f64, g: &[f64], dir: &[f64]) -> Option<(Vec<f64>, f64)> {
    let slope = dot(g, dir);
    if !(slope < 0.0) {
        return None;
    }
    // near a minimum the predicted decrease drops below the rounding level
    // of the energy; allow that much slack so the gradient can still shrink
    let slack = 16.0 * f64::EPSILON * e.abs().max(1.0);
    let mut t = 1.0;
    for _ in 0..60 {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + t * d).collect();
        let et = obj.energy(&trial);
        if et.is_finite() && et <= e + 1e-4 * t * slope + slack {
            return Some((trial, et));
        }
        t *= 0.5;
    }
    None
}

/// Steepest descent warm-up followed by L-BFGS, both with Armijo
/// backtracking, so the energy never increases.
fn descend(obj: &Objective<'_>, mut x: Vec<f64>, opts: &MinimizeOptions) -> Result<(Vec<f64>, f64, f64, usize)> {
    const MEMORY: usize = 12;
    const WARMUP: usize = 50;
    let mut e = obj.energy(&x);
    let mut g = obj.gradient(&x)?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut it = 0;
    let sup = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    while it < opts.max_iters && sup(&g) > opts.gradient_tol {
        it += 1;
        let dir: Vec<f64> = if it <= WARMUP || hist.is_empty() {
            // scaled steepest descent; keeps the first step below ~0.1 length units
            let s = 0.1 / sup(&g).max(1.0);
            g.iter().map(|v| -s * v).collect()
        } else {
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(hist.len());
            for (s, y, rho) in hist.iter().rev() {
                let a = rho * dot(s, &q);
                q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
                alphas.push(a);
            }
            let (s, y, _) = hist.last().unwrap();
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
            for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &q);
                q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
            }
            q.iter().map(|v| -v).collect()
        };
        let step = backtrack(obj, &x, e, &g, &dir).or_else(|| {
            hist.clear();
            let s = 0.1 / sup(&g).max(1.0);
            let sd: Vec<f64> = g.iter().map(|v| -s * v).collect();
            backtrack(obj, &x, e, &g, &sd)
        });
        let Some((xn, en)) = step else { break };
        let gn = obj.gradient(&xn)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > MEMORY {
                hist.remove(0);
            }
        }
        x = xn;
        e = en;
        g = gn;
    }
    let gs = sup(&g);
    Ok((x, e, gs, it))
}

/// Local minimization of the cleaned energy with restarts; the best local
/// minimum wins. A result that misses `gradient_tol` after all restarts is
/// returned with `converged = false`.
pub fn minimize(n: usize, corr: &CorrelationFactor, opts: &MinimizeOptions) -> Result<MinimizeResult> {
    opts.validate()?;
    if n < 1 {
        return Err(LabError::invalid("N must be >= 1"));
    }
    let runs: Vec<Result<MinimizeResult>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let start = initial_points(n, &opts.init, &mut rng)?;
            let obj = Objective { corr };
            let x0 = flatten(&start);
            let e0 = obj.energy(&x0);
            if !e0.is_finite() {
                return Err(LabError::invalid("initial configuration has infinite energy"));
            }
            let (x, e, gnorm, iters) = descend(&obj, x0, opts)?;
            Ok(MinimizeResult {
                config: to_config(&x),
                energy: e,
                initial_energy: e0,
                gradient_norm: gnorm,
                converged: gnorm <= opts.gradient_tol,
                iterations: iters,
                restart: r,
            })
        })
        .collect();
    let mut best: Option<MinimizeResult> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.energy < b.energy) {
            best = Some(r);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskCount {
    pub center: Point,
    pub radius: f64,
    pub count: usize,
    /// `pi R^2`
    pub bound: f64,
    /// `N(a, R) / (pi R^2) - 1`
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountBoundReport {
    pub entries: Vec<DiskCount>,
    /// `(R, max over centers of the excess)`, in the order radii were given.
    pub max_excess: Vec<(f64, f64)>,
}

impl CountBoundReport {
    pub fn g_meas(&self, radius: f64) -> Option<f64> {
        self.max_excess.iter().find(|(r, _)| *r == radius).map(|&(_, g)| g)
    }
}

/// Exact counts `N(a, R)` of points in closed disks.
pub fn count_in_disks(config: &PointConfiguration, centers: &[Point], radii: &[f64]) -> CountBoundReport {
    let mut entries = Vec::with_capacity(centers.len() * radii.len());
    let mut max_excess = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut m = f64::NEG_INFINITY;
        for &c in centers {
            let count = config.points.iter().filter(|p| p.dist(c) <= r).count();
            let bound = PI * r * r;
            let excess = count as f64 / bound - 1.0;
            m = m.max(excess);
            entries.push(DiskCount { center: c, radius: r, count, bound, excess });
        }
        max_excess.push((r, m));
    }
    CountBoundReport { entries, max_excess }
}

/// How subsets `{y_1, ..., y_K}` are drawn for exclusion audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetStrategy {
    /// Radii of the sliding disks; each disk contributes the points inside it.
    pub disk_radii: Vec<f64>,
    /// Sliding disk centers per radius, drawn uniformly in the bounding box.
    pub disk_centers: usize,
    /// Sizes of uniformly random subsets and how many of each.
    pub random_sizes: Vec<usize>,
    pub random_per_size: usize,
    /// For every point, subsets made of its `k` nearest neighbours.
    pub nearest_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SubsetStrategy {
    fn default() -> Self {
        SubsetStrategy {
            disk_radii: vec![1.0, 1.5, 2.0],
            disk_centers: 25,
            random_sizes: vec![1, 2, 5, 10],
            random_per_size: 15,
            nearest_sizes: vec![1, 2, 3, 5, 10],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    Disk,
    Random,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSubset {
    pub id: usize,
    pub kind: SubsetKind,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionFinding {
    pub subset_id: usize,
    pub point: usize,
    /// Approximate distance from the point to the region boundary in grid
    /// cells; positive inside the region.
    pub penetration_cells: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub subsets: Vec<AuditSubset>,
    pub point_tests: usize,
    pub violations: Vec<ExclusionFinding>,
    /// Points within one cell of a region boundary: undecidable at this grid.
    pub inconclusive: Vec<ExclusionFinding>,
}

fn subsets_for(config: &PointConfiguration, strategy: &SubsetStrategy) -> Vec<AuditSubset> {
    let pts = &config.points;
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    let mut out: Vec<AuditSubset> = Vec::new();
    let push = |kind, mut members: Vec<usize>, out: &mut Vec<AuditSubset>| {
        members.sort_unstable();
        if members.is_empty() || members.len() >= n {
            return;
        }
        if out.iter().any(|s| s.members == members) {
            return;
        }
        out.push(AuditSubset { id: out.len(), kind, members });
    };
    let (lo, hi) = pts.iter().fold(
        (Point::new(f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Point::new(lo.x.min(p.x), lo.y.min(p.y)), Point::new(hi.x.max(p.x), hi.y.max(p.y))),
    );
    for &r in &strategy.disk_radii {
        for _ in 0..strategy.disk_centers {
            let c = Point::new(lo.x + (hi.x - lo.x) * rng.random::<f64>(), lo.y + (hi.y - lo.y) * rng.random::<f64>());
            let members = (0..n).filter(|&i| pts[i].dist(c) <= r).collect();
            push(SubsetKind::Disk, members, &mut out);
        }
    }
    for &k in &strategy.random_sizes {
        if k >= n {
            continue;
        }
        for _ in 0..strategy.random_per_size {
            push(SubsetKind::Random, sample(&mut rng, n, k).into_vec(), &mut out);
        }
    }
    for &k in &strategy.nearest_sizes {
        if k >= n {
            continue;
        }
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| pts[a].dist(pts[i]).total_cmp(&pts[b].dist(pts[i])));
            others.truncate(k);
            push(SubsetKind::Nearest, others, &mut out);
        }
    }
    out
}

/// Signed distance, in cells, from `p` to the boundary of the occupied set
/// `{occupancy >= 1/2}`; positive inside. Searches at most `reach` cells.
pub fn penetration_depth(region: &ScreeningRegion, p: Point, reach: usize) -> f64 {
    let g = region.grid;
    let Some((ix, iy)) = g.locate(p) else {
        return -(reach as f64);
    };
    let inside = region.occupancy[g.index(ix, iy)] >= 0.5;
    let mut best = f64::INFINITY;
    let r = reach as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (ix as isize + dx, iy as isize + dy);
            let other_inside = if x < 0 || y < 0 || x as usize >= g.nx || y as usize >= g.ny {
                false
            } else {
                region.occupancy[g.index(x as usize, y as usize)] >= 0.5
            };
            if other_inside != inside {
                let c = g.origin + Point::new((x as f64 + 0.5) * g.spacing, (y as f64 + 0.5) * g.spacing);
                best = best.min(c.dist(p));
            }
        }
    }
    // nearest cell center of the other phase sits half a cell past the boundary
    let d = (best / g.spacing - 0.5).clamp(0.0, reach as f64);
    if inside {
        d
    } else {
        -d
    }
}

/// Checks `y notin Sigma(y_1..y_K)` for every subset drawn by `strategy` and
/// every configuration point outside the subset.
pub fn audit_exclusion(
    config: &PointConfiguration,
    strategy: &SubsetStrategy,
    screening: &ScreeningOptions,
) -> Result<AuditReport> {
    config.validate()?;
    let subsets = subsets_for(config, strategy);
    let pts = &config.points;
    let per_subset: Vec<Result<(usize, Vec<ExclusionFinding>, Vec<ExclusionFinding>)>> = subsets
        .par_iter()
        .map(|s| {
            let sources: Vec<Point> = s.members.iter().map(|&i| pts[i]).collect();
            let region = screening_region(&sources, screening)?;
            let (mut viol, mut inc) = (Vec::new(), Vec::new());
            let mut tests = 0;
            for (i, &y) in pts.iter().enumerate() {
                if s.members.binary_search(&i).is_ok() {
                    continue;
                }
                tests += 1;
                let depth = penetration_depth(&region, y, 40);
                let f = ExclusionFinding { subset_id: s.id, point: i, penetration_cells: depth };
                if depth > 1.0 {
                    viol.push(f);
                } else if depth > -1.0 {
                    inc.push(f);
                }
            }
            Ok((tests, viol, inc))
        })
        .collect();
    let mut report = AuditReport { subsets, ..Default::default() };
    for r in per_subset {
        let (t, v, i) = r?;
        report.point_tests += t;
        report.violations.extend(v);
        report.inconclusive.extend(i);
    }
    Ok(report)
}

/// Moves one configuration point (the one farthest from the cluster) onto
/// the centroid of the `cluster_size` points nearest to `anchor`, planting a
/// violation of the exclusion rule. Returns the moved index.
pub fn plant_violation(config: &mut PointConfiguration, anchor: usize, cluster_size: usize) -> Result<usize> {
    let pts = &config.points;
    let n = pts.len();
    if anchor >= n || cluster_size + 1 >= n || cluster_size == 0 {
        return Err(LabError::invalid("cluster does not fit in the configuration"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].dist(pts[anchor]).total_cmp(&pts[b].dist(pts[anchor])));
    let cluster = &order[..cluster_size];
    let centroid = cluster.iter().fold(Point::ORIGIN, |acc, &i| acc + pts[i]) * (1.0 / cluster_size as f64);
    let moved = *order.last().unwrap();
    config.points[moved] = centroid;
    Ok(moved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuasiHoleSet;

    #[test]
    fn single_point_goes_to_origin() {
        let r = minimize(1, &CorrelationFactor::None, &MinimizeOptions::for_n(1, 3)).unwrap();
        assert!(r.converged);
        assert!(r.config.points[0].norm() < 1e-9);
        assert!(r.energy.abs() < 1e-15);
    }

    #[test]
    fn two_points_are_antipodal() {
        let r = minimize(2, &CorrelationFactor::None, &MinimizeOptions::for_n(2, 5)).unwrap();
        assert!(r.converged);
        let (a, b) = (r.config.points[0], r.config.points[1]);
        assert_close!(a.dist(b), (2.0 / PI).sqrt(), 1e-8);
        assert!((a + b).norm() < 1e-8);
        assert!(r.energy <= r.initial_energy);
    }

    #[test]
    fn coincident_explicit_start_is_jittered() {
        let opts = MinimizeOptions {
            init: InitStrategy::Explicit { points: vec![Point::new(0.5, 0.0); 3] },
            restarts: 1,
            ..MinimizeOptions::for_n(3, 0)
        };
        let r = minimize(3, &CorrelationFactor::None, &opts).unwrap();
        assert!(r.converged, "{r:?}");
    }

    #[test]
    fn explicit_start_length_is_checked() {
        let opts = MinimizeOptions {
            init: InitStrategy::Explicit { points: vec![Point::ORIGIN] },
            ..MinimizeOptions::for_n(3, 0)
        };
        assert!(minimize(3, &CorrelationFactor::None, &opts).is_err());
    }

    #[test]
    fn count_examples() {
        let c = PointConfiguration::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 3.0)]).unwrap();
        let rep = count_in_disks(&c, &[Point::new(10.0, 10.0), Point::ORIGIN], &[1.0, 100.0]);
        assert_eq!(rep.entries[0].count, 0);
        assert_eq!(rep.entries[1].count, 2);
        assert_eq!(rep.entries[3].count, 3);
        assert_close!(rep.entries[1].excess, 2.0 / PI - 1.0, 1e-15);
    }

    #[test]
    fn quasi_hole_carves_a_hole() {
        let m = 8;
        let corr = CorrelationFactor::quasi_holes(QuasiHoleSet::single(Point::ORIGIN, m).unwrap());
        let n = 40;
        let mut opts = MinimizeOptions::for_n(n, 11);
        opts.init = InitStrategy::RandomInDisk { radius: ((n as f64 + 2.0 * m as f64) / PI).sqrt() };
        let r = minimize(n, &corr, &opts).unwrap();
        assert!(r.converged, "{}", r.gradient_norm);
        let hole = (m as f64 / PI).sqrt();
        let closest = r.config.points.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
        assert!(closest > hole * 0.95, "closest {closest}, hole radius {hole}");
    }
}
