//! Rectangular cell grids shared by the density, screening and bathtub code.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::Point;

/// `nx * ny` square cells of side `spacing`; `origin` is the lower-left
/// corner of cell `(0, 0)`. Cell values are stored row-major, `iy * nx + ix`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: Point,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(origin: Point, spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        let g = Grid { origin, spacing, nx, ny };
        g.validate()?;
        Ok(g)
    }

    /// Square grid of side `2 * half_width` centered at `center`.
    pub fn centered(center: Point, half_width: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && half_width > 0.0) {
            return Err(LabError::invalid("grid spacing and half width must be positive"));
        }
        let n = (2.0 * half_width / spacing).ceil() as usize;
        let side = n as f64 * spacing;
        Grid::new(center - Point::new(side / 2.0, side / 2.0), spacing, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(LabError::invalid("grid spacing must be > 0"));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(LabError::invalid("grid must have at least one cell"));
        }
        if !self.origin.is_finite() {
            return Err(LabError::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn center(&self, ix: usize, iy: usize) -> Point {
        self.origin + Point::new((ix as f64 + 0.5) * self.spacing, (iy as f64 + 0.5) * self.spacing)
    }

    pub fn center_of(&self, idx: usize) -> Point {
        let (ix, iy) = self.coords(idx);
        self.center(ix, iy)
    }

    /// Cell containing `p`, if any.
    pub fn locate(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.spacing;
        let fy = (p.y - self.origin.y) / self.spacing;
        if fx < 0.0 || fy < 0.0 || !fx.is_finite() || !fy.is_finite() {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn max_corner(&self) -> Point {
        self.origin + Point::new(self.nx as f64 * self.spacing, self.ny as f64 * self.spacing)
    }

    /// Whether the closed disk `D(c, r)` lies inside the grid rectangle.
    pub fn contains_disk(&self, c: Point, r: f64) -> bool {
        let hi = self.max_corner();
        c.x - r >= self.origin.x && c.y - r >= self.origin.y && c.x + r <= hi.x && c.y + r <= hi.y
    }

    /// Bilinear interpolation of cell-centered `values` at `p`; clamps at
    /// the outermost cell centers.
    pub fn interpolate(&self, values: &[f64], p: Point) -> f64 {
        let fx = ((p.x - self.origin.x) / self.spacing - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((p.y - self.origin.y) / self.spacing - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (ix1, iy1) = ((ix + 1).min(self.nx - 1), (iy + 1).min(self.ny - 1));
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let v = |x, y| values[self.index(x, y)];
        (1.0 - ty) * ((1.0 - tx) * v(ix, iy) + tx * v(ix1, iy))
            + ty * ((1.0 - tx) * v(ix, iy1) + tx * v(ix1, iy1))
    }

    /// Fraction of each cell covered by `D(c, r)`, estimated on a
    /// `sub x sub` subgrid per cell. Returns `(cell index, fraction)` pairs.
    pub fn disk_coverage(&self, c: Point, r: f64, sub: usize) -> Vec<(usize, f64)> {
        let h = self.spacing;
        let lo_x = (((c.x - r - self.origin.x) / h).floor().max(0.0)) as usize;
        let lo_y = (((c.y - r - self.origin.y) / h).floor().max(0.0)) as usize;
        let hi_x = ((((c.x + r - self.origin.x) / h).ceil()).max(0.0) as usize).min(self.nx);
        let hi_y = ((((c.y + r - self.origin.y) / h).ceil()).max(0.0) as usize).min(self.ny);
        let r2 = r * r;
        let half_diag = h * std::f64::consts::FRAC_1_SQRT_2;
        let mut out = Vec::new();
        for iy in lo_y..hi_y {
            for ix in lo_x..hi_x {
                let cc = self.center(ix, iy);
                let d = cc.dist(c);
                let frac = if d + half_diag <= r {
                    1.0
                } else if d - half_diag >= r {
                    0.0
                } else {
                    let mut hits = 0usize;
                    for sy in 0..sub {
                        for sx in 0..sub {
                            let p = self.origin
                                + Point::new(
                                    (ix as f64 + (sx as f64 + 0.5) / sub as f64) * h,
                                    (iy as f64 + (sy as f64 + 0.5) / sub as f64) * h,
                                );
                            if (p - c).norm_sqr() <= r2 {
                                hits += 1;
                            }
                        }
                    }
                    hits as f64 / (sub * sub) as f64
                };
                if frac > 0.0 {
                    out.push((self.index(ix, iy), frac));
                }
            }
        }
        out
    }

    /// Writes `x,y,<column>` rows at cell centers.
    pub fn write_csv<W: Write>(&self, mut out: W, column: &str, values: &[f64]) -> Result<()> {
        writeln!(out, "x,y,{column}")?;
        for (idx, v) in values.iter().enumerate() {
            let c = self.center_of(idx);
            writeln!(out, "{},{},{}", c.x, c.y, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_and_center_roundtrip() {
        let g = Grid::new(Point::new(-1.0, -2.0), 0.5, 4, 6).unwrap();
        for idx in 0..g.len() {
            let (ix, iy) = g.coords(idx);
            assert_eq!(g.locate(g.center_of(idx)), Some((ix, iy)));
        }
        assert_eq!(g.locate(Point::new(-1.1, 0.0)), None);
        assert_eq!(g.locate(Point::new(1.0, 0.0)), None);
    }

    #[test]
    fn coverage_sums_to_disk_area() {
        let g = Grid::centered(Point::ORIGIN, 3.0, 0.1).unwrap();
        let a: f64 = g.disk_coverage(Point::new(0.13, -0.2), 1.7, 8).iter().map(|&(_, f)| f).sum::<f64>()
            * g.cell_area();
        let exact = std::f64::consts::PI * 1.7 * 1.7;
        assert!((a - exact).abs() / exact < 2e-3, "{a} vs {exact}");
    }

    #[test]
    fn interpolation_is_exact_for_linear_fields() {
        let g = Grid::centered(Point::ORIGIN, 2.0, 0.25).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|i| {
            let c = g.center_of(i);
            2.0 * c.x - 0.5 * c.y + 1.0
        }).collect();
        let p = Point::new(0.31, -0.77);
        assert!((g.interpolate(&vals, p) - (2.0 * p.x - 0.5 * p.y + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(Point::ORIGIN, 0.0, 1, 1).is_err());
        assert!(Grid::new(Point::ORIGIN, 1.0, 0, 1).is_err());
    }
}
