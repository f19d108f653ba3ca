//! Shared state family: plasma parameters, point configurations, quasi-hole
//! correlation factors, potentials and the two effective Hamilton functions.
//!
//! Two unit systems coexist. The plasma functions ([`log_plasma_weight`])
//! work in physical units fixed by `(B, ell)`, where the neutral density is
//! `B / (2 pi ell)`. The cleaned Hamiltonian ([`cleaned_hamiltonian`]) has
//! neutral density 1. [`UnitConversion`] maps between them.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// A point of the plane, identified with the complex number `x + i y`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm_sqr(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistics {
    Bosonic,
    Fermionic,
}

impl Statistics {
    /// Odd exponents give antisymmetric (fermionic) Laughlin functions.
    pub fn from_exponent(ell: u32) -> Self {
        if ell % 2 == 1 {
            Statistics::Fermionic
        } else {
            Statistics::Bosonic
        }
    }
}

/// Field strength `B`, Jastrow exponent `ell` and particle number `N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasmaParams {
    pub b: f64,
    pub ell: u32,
    pub n: usize,
}

impl PlasmaParams {
    pub fn new(b: f64, ell: u32, n: usize) -> Result<Self> {
        let p = PlasmaParams { b, ell, n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(LabError::invalid(format!("field strength B must be > 0, got {}", self.b)));
        }
        if self.ell < 1 {
            return Err(LabError::invalid("exponent ell must be >= 1"));
        }
        if self.n < 1 {
            return Err(LabError::invalid("particle number N must be >= 1"));
        }
        Ok(())
    }

    pub fn statistics(&self) -> Statistics {
        Statistics::from_exponent(self.ell)
    }

    /// Neutral plasma density `B / (2 pi ell)`.
    pub fn cap_density(&self) -> f64 {
        self.b / (2.0 * PI * self.ell as f64)
    }

    /// Radius `sqrt(2 ell N / B)` of the disk carrying the Laughlin plateau.
    pub fn droplet_radius(&self) -> f64 {
        (2.0 * self.ell as f64 * self.n as f64 / self.b).sqrt()
    }

    /// Magnetic length `sqrt(2 / B)`, the default Metropolis step.
    pub fn magnetic_length(&self) -> f64 {
        (2.0 / self.b).sqrt()
    }

    /// Radius of the disk holding one particle at the cap density,
    /// `sqrt(2 pi ell / B) / sqrt(pi)`.
    pub fn mean_spacing(&self) -> f64 {
        (2.0 * self.ell as f64 / self.b).sqrt()
    }

    /// Total angular momentum `ell N (N - 1) / 2` of the Laughlin state.
    pub fn laughlin_momentum(&self) -> usize {
        self.ell as usize * self.n * (self.n - 1) / 2
    }
}

/// The `N` planar coordinates shared by samplers and minimizers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointConfiguration {
    pub points: Vec<Point>,
}

impl PointConfiguration {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let c = PointConfiguration { points };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(LabError::invalid(format!("coordinate {i} is not finite"))),
            None => Ok(()),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.points.len() != n {
            return Err(LabError::invalid(format!(
                "configuration has {} points, expected N = {n}",
                self.points.len()
            )));
        }
        Ok(())
    }
}

impl From<Vec<Point>> for PointConfiguration {
    fn from(points: Vec<Point>) -> Self {
        PointConfiguration { points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiHole {
    pub position: Point,
    pub multiplicity: u32,
}

/// Zeros `a_k` of multiplicity `m_k` of the one-body factor `f`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuasiHoleSet {
    pub holes: Vec<QuasiHole>,
}

impl QuasiHoleSet {
    pub fn new(holes: Vec<QuasiHole>) -> Result<Self> {
        let s = QuasiHoleSet { holes };
        s.validate()?;
        Ok(s)
    }

    pub fn single(position: Point, multiplicity: u32) -> Result<Self> {
        Self::new(vec![QuasiHole { position, multiplicity }])
    }

    pub fn validate(&self) -> Result<()> {
        for (k, h) in self.holes.iter().enumerate() {
            if h.multiplicity < 1 {
                return Err(LabError::invalid(format!("quasi-hole {k} has multiplicity 0")));
            }
            if !h.position.is_finite() {
                return Err(LabError::invalid(format!("quasi-hole {k} has a non-finite position")));
            }
        }
        Ok(())
    }

    pub fn total_degree(&self) -> u64 {
        self.holes.iter().map(|h| h.multiplicity as u64).sum()
    }

    /// `sum_k m_k log|z - a_k|`, the log-modulus of `f(z)`.
    pub fn log_modulus_one(&self, z: Point) -> f64 {
        self.holes
            .iter()
            .map(|h| h.multiplicity as f64 * 0.5 * (z - h.position).norm_sqr().ln())
            .sum()
    }

    /// Gradient of `sum_k m_k log|z - a_k|` in `z`.
    pub fn grad_log_modulus_one(&self, z: Point) -> Point {
        self.holes.iter().fold(Point::ORIGIN, |acc, h| {
            let d = z - h.position;
            acc + d * (h.multiplicity as f64 / d.norm_sqr())
        })
    }

    /// Parses `"x,y,m"` triples separated by `;`, as used on the command line.
    pub fn parse_triples(s: &str) -> Result<Self> {
        let mut holes = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(LabError::invalid(format!("quasi-hole '{part}' is not x,y,m")));
            }
            let num = |t: &str| {
                t.parse::<f64>()
                    .map_err(|_| LabError::invalid(format!("bad number '{t}' in quasi-hole '{part}'")))
            };
            let m = fields[2]
                .parse::<u32>()
                .map_err(|_| LabError::invalid(format!("bad multiplicity in quasi-hole '{part}'")))?;
            holes.push(QuasiHole { position: Point::new(num(fields[0])?, num(fields[1])?), multiplicity: m });
        }
        Self::new(holes)
    }
}

/// User supplied `log|F|` for an analytic symmetric `F`.
///
/// Implementors assert that `-2 log|F|` is superharmonic in each variable;
/// this is not checked.
pub trait CorrelationEvaluator: Send + Sync + fmt::Debug {
    /// `log|F(z_1, ..., z_N)|`, `-inf` exactly at zeros of `F`.
    fn log_modulus(&self, points: &[Point]) -> f64;

    /// Per-particle gradient of `log|F|`, when available.
    fn grad_log_modulus(&self, _points: &[Point]) -> Option<Vec<Point>> {
        None
    }
}

/// The analytic factor `F` multiplying the Laughlin function.
#[derive(Clone, Debug, Default)]
pub enum CorrelationFactor {
    #[default]
    None,
    QuasiHoles(QuasiHoleSet),
    Custom(Arc<dyn CorrelationEvaluator>),
}

impl CorrelationFactor {
    pub fn quasi_holes(set: QuasiHoleSet) -> Self {
        if set.holes.is_empty() {
            CorrelationFactor::None
        } else {
            CorrelationFactor::QuasiHoles(set)
        }
    }

    /// `log|F|` at a configuration.
    pub fn log_modulus(&self, points: &[Point]) -> f64 {
        match self {
            CorrelationFactor::None => 0.0,
            CorrelationFactor::QuasiHoles(set) => points.iter().map(|&z| set.log_modulus_one(z)).sum(),
            CorrelationFactor::Custom(f) => f.log_modulus(points),
        }
    }

    /// Change of `log|F|` when point `j` moves to `to`.
    pub fn log_modulus_change(&self, points: &mut [Point], j: usize, to: Point) -> f64 {
        match self {
            CorrelationFactor::None => 0.0,
            CorrelationFactor::QuasiHoles(set) => set.log_modulus_one(to) - set.log_modulus_one(points[j]),
            CorrelationFactor::Custom(f) => {
                let before = f.log_modulus(points);
                let old = std::mem::replace(&mut points[j], to);
                let after = f.log_modulus(points);
                points[j] = old;
                after - before
            }
        }
    }

    /// Gradient of the phantom potential `W = -2 log|F|` per particle.
    pub fn phantom_gradient(&self, points: &[Point]) -> Result<Vec<Point>> {
        match self {
            CorrelationFactor::None => Ok(vec![Point::ORIGIN; points.len()]),
            CorrelationFactor::QuasiHoles(set) => {
                Ok(points.iter().map(|&z| set.grad_log_modulus_one(z) * -2.0).collect())
            }
            CorrelationFactor::Custom(f) => f
                .grad_log_modulus(points)
                .map(|g| g.into_iter().map(|p| p * -2.0).collect())
                .ok_or_else(|| LabError::invalid("custom correlation factor has no gradient")),
        }
    }
}

/// `-H_F`: the log of the unnormalized plasma weight `|Psi_F|^2`.
///
/// Returns `-inf` when two points coincide or `F` vanishes.
pub fn log_plasma_weight(
    config: &PointConfiguration,
    params: &PlasmaParams,
    corr: &CorrelationFactor,
) -> Result<f64> {
    params.validate()?;
    config.validate()?;
    config.check_len(params.n)?;
    let pts = &config.points;
    let trap: f64 = pts.iter().map(|p| p.norm_sqr()).sum();
    let mut jastrow = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            // log|z_i - z_j| = 0.5 log|z_i - z_j|^2; ln(0) = -inf
            jastrow += 0.5 * (pts[i] - pts[j]).norm_sqr().ln();
        }
    }
    let total = -0.5 * params.b * trap + 2.0 * params.ell as f64 * jastrow + 2.0 * corr.log_modulus(pts);
    Ok(if total.is_nan() { f64::NEG_INFINITY } else { total })
}

/// Change of `-H_F` when point `j` moves to `to`. Used by the sampler.
pub fn log_weight_change(
    points: &mut [Point],
    params: &PlasmaParams,
    corr: &CorrelationFactor,
    j: usize,
    to: Point,
) -> f64 {
    let from = points[j];
    // Products of squared-distance ratios, flushed through ln every few
    // factors so the running product stays far from overflow.
    let mut log_ratio_sq = 0.0;
    let mut prod = 1.0;
    let mut pending = 0;
    for (i, &p) in points.iter().enumerate() {
        if i != j {
            prod *= (to - p).norm_sqr() / (from - p).norm_sqr();
            pending += 1;
            if pending == 8 || !(1e-150..=1e150).contains(&prod) {
                log_ratio_sq += prod.ln();
                prod = 1.0;
                pending = 0;
            }
        }
    }
    log_ratio_sq += prod.ln();
    let trap = -0.5 * params.b * (to.norm_sqr() - from.norm_sqr());
    let delta = trap + params.ell as f64 * log_ratio_sq + 2.0 * corr.log_modulus_change(points, j, to);
    if delta.is_nan() {
        f64::NEG_INFINITY
    } else {
        delta
    }
}

/// Cleaned Coulomb energy
/// `(pi/2) sum |x_j|^2 - sum_{i<j} log|x_i - x_j| + W` with `W = -2 log|F|`.
///
/// Returns `+inf` at coincident points or zeros of `F`.
pub fn cleaned_hamiltonian(config: &PointConfiguration, corr: &CorrelationFactor) -> Result<f64> {
    config.validate()?;
    let pts = &config.points;
    let trap: f64 = pts.iter().map(|p| p.norm_sqr()).sum();
    let mut pair = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            pair += 0.5 * (pts[i] - pts[j]).norm_sqr().ln();
        }
    }
    let phantom = -2.0 * corr.log_modulus(pts);
    let total = 0.5 * PI * trap - pair + phantom;
    Ok(if total.is_nan() { f64::INFINITY } else { total })
}

/// Analytic gradient of [`cleaned_hamiltonian`].
pub fn cleaned_gradient(config: &PointConfiguration, corr: &CorrelationFactor) -> Result<Vec<Point>> {
    config.validate()?;
    let pts = &config.points;
    let mut grad = corr.phantom_gradient(pts)?;
    for (g, &p) in grad.iter_mut().zip(pts) {
        *g = *g + p * PI;
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i] - pts[j];
            let r2 = d.norm_sqr();
            if r2 == 0.0 {
                return Err(LabError::Singular(format!("points {i} and {j} coincide")));
            }
            let f = d * (1.0 / r2);
            grad[i] = grad[i] - f;
            grad[j] = grad[j] + f;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(LabError::Singular("gradient is not finite (point on a zero of F)".into()));
    }
    Ok(grad)
}

/// Length and density conversion between `(B, ell)` units and the cleaned
/// units of unit neutral density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitConversion {
    /// Physical length of one cleaned length unit, `sqrt(2 pi ell / B)`.
    pub length_scale: f64,
}

impl UnitConversion {
    pub fn new(params: &PlasmaParams) -> Self {
        UnitConversion { length_scale: (2.0 * PI * params.ell as f64 / params.b).sqrt() }
    }

    pub fn to_cleaned(&self, p: Point) -> Point {
        p * (1.0 / self.length_scale)
    }

    pub fn to_physical(&self, p: Point) -> Point {
        p * self.length_scale
    }

    pub fn density_to_cleaned(&self, rho: f64) -> f64 {
        rho * self.length_scale * self.length_scale
    }

    pub fn density_to_physical(&self, rho: f64) -> f64 {
        rho / (self.length_scale * self.length_scale)
    }
}

/// External potential `v`, selectable by name in configuration files.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarField {
    Constant { value: f64 },
    /// `c |x|^2`
    Quadratic { coefficient: f64 },
    /// `c (|x|^2 - a)^2`, a single non-degenerate maximum at the origin.
    MexicanHat { coefficient: f64, a: f64 },
    /// `c |x - (d,0)|^2 |x + (d,0)|^2`, two equal minima at `(+-d, 0)`.
    DoubleWell { coefficient: f64, d: f64 },
    #[serde(skip)]
    Custom(Arc<dyn Fn(Point) -> f64 + Send + Sync>),
}

impl ScalarField {
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Quadratic { coefficient } => coefficient * x.norm_sqr(),
            ScalarField::MexicanHat { coefficient, a } => {
                let t = x.norm_sqr() - a;
                coefficient * t * t
            }
            ScalarField::DoubleWell { coefficient, d } => {
                let s = Point::new(*d, 0.0);
                coefficient * (x - s).norm_sqr() * (x + s).norm_sqr()
            }
            ScalarField::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Constant { value } => write!(f, "Constant({value})"),
            ScalarField::Quadratic { coefficient } => write!(f, "Quadratic({coefficient})"),
            ScalarField::MexicanHat { coefficient, a } => write!(f, "MexicanHat({coefficient}, {a})"),
            ScalarField::DoubleWell { coefficient, d } => write!(f, "DoubleWell({coefficient}, {d})"),
            ScalarField::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Radial pair interaction `w(|x|)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialPair {
    Zero,
    Constant { value: f64 },
    /// `amplitude * exp(-|x|^2 / width^2)`
    Gaussian { amplitude: f64, width: f64 },
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl RadialPair {
    pub fn eval_radius(&self, r: f64) -> f64 {
        match self {
            RadialPair::Zero => 0.0,
            RadialPair::Constant { value } => *value,
            RadialPair::Gaussian { amplitude, width } => amplitude * (-(r * r) / (width * width)).exp(),
            RadialPair::Custom(f) => f(r),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RadialPair::Zero)
    }
}

impl fmt::Debug for RadialPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadialPair::Zero => f.write_str("Zero"),
            RadialPair::Constant { value } => write!(f, "Constant({value})"),
            RadialPair::Gaussian { amplitude, width } => write!(f, "Gaussian({amplitude}, {width})"),
            RadialPair::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Unscaled potentials `v`, `w` and the coupling `lambda`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub v: ScalarField,
    pub w: RadialPair,
    pub lambda: f64,
}

/// `V(x) = v(x / sqrt(N))` and `W(x) = w(x / sqrt(N)) / N`.
#[derive(Clone, Debug)]
pub struct ScaledPotentials {
    pub spec: PotentialSpec,
    pub n: usize,
    inv_sqrt_n: f64,
}

impl ScaledPotentials {
    pub fn external(&self, x: Point) -> f64 {
        self.spec.v.eval(x * self.inv_sqrt_n)
    }

    pub fn pair(&self, x: Point) -> f64 {
        self.pair_radius(x.norm())
    }

    pub fn pair_radius(&self, r: f64) -> f64 {
        self.spec.w.eval_radius(r * self.inv_sqrt_n) / self.n as f64
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda
    }
}

pub fn scaled_potentials(spec: &PotentialSpec, n: usize) -> Result<ScaledPotentials> {
    if n < 1 {
        return Err(LabError::invalid("N must be >= 1"));
    }
    Ok(ScaledPotentials { spec: spec.clone(), n, inv_sqrt_n: 1.0 / (n as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    fn cfg(pts: &[(f64, f64)]) -> PointConfiguration {
        PointConfiguration::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn plasma_weight_single_particle_at_origin() {
        let p = PlasmaParams::new(1.0, 3, 1).unwrap();
        assert_eq!(log_plasma_weight(&cfg(&[(0.0, 0.0)]), &p, &CorrelationFactor::None).unwrap(), 0.0);
    }

    #[test]
    fn plasma_weight_coincident_is_neg_inf() {
        for ell in 1..5 {
            let p = PlasmaParams::new(1.0, ell, 2).unwrap();
            let w = log_plasma_weight(&cfg(&[(0.3, 0.1), (0.3, 0.1)]), &p, &CorrelationFactor::None).unwrap();
            assert_eq!(w, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn plasma_weight_two_points() {
        // -(1/2)(1 + 1) + 6 ln 2
        let p = PlasmaParams::new(1.0, 3, 2).unwrap();
        let w = log_plasma_weight(&cfg(&[(1.0, 0.0), (-1.0, 0.0)]), &p, &CorrelationFactor::None).unwrap();
        assert_close!(w, 6.0 * 2f64.ln() - 1.0, 1e-12);
        assert_close!(w, 3.15888, 1e-5);
    }

    #[test]
    fn plasma_weight_rejects_bad_input() {
        let p = PlasmaParams::new(1.0, 3, 2).unwrap();
        let bad = PointConfiguration { points: vec![Point::new(f64::NAN, 0.0), Point::ORIGIN] };
        assert!(matches!(
            log_plasma_weight(&bad, &p, &CorrelationFactor::None),
            Err(LabError::InvalidInput(_))
        ));
        assert!(log_plasma_weight(&cfg(&[(0.0, 0.0)]), &p, &CorrelationFactor::None).is_err());
        assert!(PlasmaParams::new(0.0, 1, 1).is_err());
        assert!(PlasmaParams::new(1.0, 0, 1).is_err());
        assert!(PlasmaParams::new(1.0, 1, 0).is_err());
    }

    #[test]
    fn plasma_weight_zero_of_f() {
        let p = PlasmaParams::new(1.0, 2, 2).unwrap();
        let corr = CorrelationFactor::quasi_holes(QuasiHoleSet::single(Point::new(1.0, 0.0), 2).unwrap());
        let w = log_plasma_weight(&cfg(&[(1.0, 0.0), (-1.0, 0.0)]), &p, &corr).unwrap();
        assert_eq!(w, f64::NEG_INFINITY);
    }

    #[test]
    fn weight_change_matches_full_difference() {
        let p = PlasmaParams::new(0.7, 3, 4).unwrap();
        let corr = CorrelationFactor::quasi_holes(
            QuasiHoleSet::new(vec![
                QuasiHole { position: Point::new(0.2, -0.4), multiplicity: 2 },
                QuasiHole { position: Point::new(-1.0, 0.5), multiplicity: 1 },
            ])
            .unwrap(),
        );
        let c = cfg(&[(0.1, 0.2), (1.5, -0.3), (-0.7, 0.9), (0.4, -1.2)]);
        let before = log_plasma_weight(&c, &p, &corr).unwrap();
        let to = Point::new(-0.3, -0.8);
        let mut moved = c.clone();
        moved.points[2] = to;
        let after = log_plasma_weight(&moved, &p, &corr).unwrap();
        let mut pts = c.points.clone();
        assert_close!(log_weight_change(&mut pts, &p, &corr, 2, to), after - before, 1e-11);
        assert_eq!(pts, c.points);
    }

    #[test]
    fn cleaned_examples() {
        let z = CorrelationFactor::None;
        assert_eq!(cleaned_hamiltonian(&cfg(&[(0.0, 0.0)]), &z).unwrap(), 0.0);
        let r = (2.0 * PI).powf(-0.5);
        let e = cleaned_hamiltonian(&cfg(&[(r, 0.0), (-r, 0.0)]), &z).unwrap();
        assert_close!(e, 0.5 - (2.0 / PI).sqrt().ln(), 1e-12);
        assert_close!(e, 0.72579, 1e-5);
        assert_eq!(cleaned_hamiltonian(&cfg(&[(1.0, 1.0), (1.0, 1.0)]), &z).unwrap(), f64::INFINITY);
    }

    #[test]
    fn cleaned_gradient_examples() {
        let z = CorrelationFactor::None;
        let g = cleaned_gradient(&cfg(&[(1.0, 0.0)]), &z).unwrap();
        assert_close!(g[0].x, PI, 1e-15);
        assert_close!(g[0].y, 0.0, 1e-15);
        let r = (2.0 * PI).powf(-0.5);
        let g = cleaned_gradient(&cfg(&[(r, 0.0), (-r, 0.0)]), &z).unwrap();
        for gi in g {
            assert!(gi.norm() < 1e-12, "{gi:?}");
        }
        assert!(matches!(
            cleaned_gradient(&cfg(&[(1.0, 0.0), (1.0, 0.0)]), &z),
            Err(LabError::Singular(_))
        ));
    }

    #[test]
    fn scaled_potential_examples() {
        let spec = PotentialSpec {
            v: ScalarField::Quadratic { coefficient: 1.0 },
            w: RadialPair::Constant { value: 1.0 },
            lambda: 1.0,
        };
        let s = scaled_potentials(&spec, 4).unwrap();
        assert_close!(s.external(Point::new(2.0, 0.0)), 1.0, 1e-15);
        let s = scaled_potentials(&spec, 100).unwrap();
        assert_close!(s.external(Point::new(10.0, 0.0)), 1.0, 1e-15);
        let s = scaled_potentials(&spec, 10).unwrap();
        assert_close!(s.pair(Point::new(3.0, -7.0)), 0.1, 1e-15);
        assert!(scaled_potentials(&spec, 0).is_err());
    }

    #[test]
    fn parse_triples() {
        let s = QuasiHoleSet::parse_triples("0,0,6; 1.5,-2,1").unwrap();
        assert_eq!(s.holes.len(), 2);
        assert_eq!(s.holes[0].multiplicity, 6);
        assert_eq!(s.holes[1].position, Point::new(1.5, -2.0));
        assert!(QuasiHoleSet::parse_triples("0,0,0").is_err());
        assert!(QuasiHoleSet::parse_triples("0,0").is_err());
    }

    #[test]
    fn unit_conversion_maps_cap_to_one() {
        let p = PlasmaParams::new(1.3, 3, 10).unwrap();
        let u = UnitConversion::new(&p);
        assert_close!(u.density_to_cleaned(p.cap_density()), 1.0, 1e-14);
        let q = Point::new(0.3, 2.0);
        assert_close!(u.to_physical(u.to_cleaned(q)).dist(q), 0.0, 1e-14);
    }

    #[test]
    fn potential_spec_json() {
        let spec = PotentialSpec {
            v: ScalarField::MexicanHat { coefficient: 1.0, a: 2.0 },
            w: RadialPair::Gaussian { amplitude: 1.0, width: 1.0 },
            lambda: 0.05,
        };
        let js = serde_json::to_string(&spec).unwrap();
        assert!(js.contains("\"kind\":\"mexican_hat\""), "{js}");
        let back: PotentialSpec = serde_json::from_str(&js).unwrap();
        assert_close!(back.v.eval(Point::new(1.0, 0.0)), 1.0, 1e-15);
    }
}
