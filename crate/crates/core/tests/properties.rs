//! Invariants checked on generated inputs.

mod common;

use std::f64::consts::PI;

use laughlin_lab::bathtub::{self, FlockingOptions, PairKernel};
use laughlin_lab::coulomb;
use laughlin_lab::ed::{self, LinearOperator, MomentumSector};
use laughlin_lab::model::{
    cleaned_hamiltonian, log_plasma_weight, log_weight_change, CorrelationFactor, PlasmaParams, Point,
    PointConfiguration, QuasiHole, QuasiHoleSet,
};
use laughlin_lab::sampler;
use laughlin_lab::screening::{self, ScreeningOptions};
use laughlin_lab::Grid;
use proptest::prelude::*;

use common::*;

fn point(r: f64) -> impl Strategy<Value = Point> {
    (-r..r, -r..r).prop_map(|(x, y)| Point::new(x, y))
}

fn separated(n: std::ops::Range<usize>, r: f64) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(r), n).prop_filter("points too close", |pts| {
        pts.iter().enumerate().all(|(i, a)| pts[i + 1..].iter().all(|b| a.dist(*b) > 1e-3))
    })
}

fn hole_corr(pos: Point, m: u32) -> CorrelationFactor {
    CorrelationFactor::quasi_holes(QuasiHoleSet::new(vec![QuasiHole { position: pos, multiplicity: m }]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_change_matches_full_weight(pts in separated(2..12, 3.0), to in point(3.0), j in 0usize..12, ell in 1u32..4, hole in point(2.0)) {
        let j = j % pts.len();
        prop_assume!(pts.iter().enumerate().all(|(i, p)| i == j || p.dist(to) > 1e-3));
        let params = PlasmaParams::new(1.0, ell, pts.len()).unwrap();
        let corr = hole_corr(hole, 2);
        let before = log_plasma_weight(&PointConfiguration::new(pts.clone()).unwrap(), &params, &corr).unwrap();
        let mut moved = pts.clone();
        moved[j] = to;
        let after = log_plasma_weight(&PointConfiguration::new(moved).unwrap(), &params, &corr).unwrap();
        let mut work = pts.clone();
        let delta = log_weight_change(&mut work, &params, &corr, j, to);
        prop_assert!((delta - (after - before)).abs() <= 1e-8 * (1.0 + before.abs()), "{delta} vs {}", after - before);
        prop_assert_eq!(work, pts);
    }

    #[test]
    fn cleaned_energy_is_rotation_and_permutation_invariant(pts in separated(2..15, 3.0), angle in 0.0..(2.0 * PI), shift in 0usize..15) {
        let e = cleaned_hamiltonian(&PointConfiguration::new(pts.clone()).unwrap(), &CorrelationFactor::None).unwrap();
        let rotated: Vec<Point> = pts.iter().map(|p| p.rotate(angle)).collect();
        let mut permuted = pts.clone();
        permuted.rotate_left(shift % pts.len());
        let er = cleaned_hamiltonian(&PointConfiguration::new(rotated).unwrap(), &CorrelationFactor::None).unwrap();
        let ep = cleaned_hamiltonian(&PointConfiguration::new(permuted).unwrap(), &CorrelationFactor::None).unwrap();
        prop_assert!((e - er).abs() <= 1e-10 * (1.0 + e.abs()));
        prop_assert!((e - ep).abs() <= 1e-10 * (1.0 + e.abs()));
    }

    #[test]
    fn histogram_density_integrates_to_particle_count(pts in prop::collection::vec(point(1.9), 1..30)) {
        let grid = Grid::centered(Point::ORIGIN, 2.0, 0.25).unwrap();
        let config = PointConfiguration::new(pts.clone()).unwrap();
        let d = sampler::estimate_density(std::iter::once(&config), &grid).unwrap();
        prop_assert!((d.integral() - pts.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn disk_counts_match_brute_force(pts in prop::collection::vec(point(3.0), 1..40), c in point(2.0), r in 0.1f64..3.0) {
        let config = PointConfiguration::new(pts.clone()).unwrap();
        let rep = coulomb::count_in_disks(&config, &[c], &[r]);
        let brute = pts.iter().filter(|p| ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt() <= r).count();
        prop_assert_eq!(rep.entries[0].count, brute);
        prop_assert!((rep.g_meas(r).unwrap() - (brute as f64 / (PI * r * r) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bathtub_fill_is_feasible_and_optimal(v in prop::collection::vec(-5.0f64..5.0, 64), frac in 0.05f64..0.95, cap in 0.2f64..3.0, swaps in prop::collection::vec((0usize..64, 0usize..64, 0.0f64..1.0), 1..20)) {
        let grid = Grid::new(Point::ORIGIN, 0.5, 8, 8).unwrap();
        let mass = frac * cap * grid.len() as f64 * grid.cell_area();
        let fill = bathtub::bathtub_fill(&grid, &v, cap, mass).unwrap();
        fill.profile.check(Some(mass)).unwrap();
        prop_assert!((fill.profile.linear_energy(&v) - fill.energy).abs() < 1e-9);
        // mass-preserving perturbations cannot lower the energy
        let mut rho = fill.profile.values.clone();
        for (i, j, t) in swaps {
            let amount = t * rho[i].min(cap - rho[j]);
            rho[i] -= amount;
            rho[j] += amount;
        }
        let e: f64 = rho.iter().zip(&v).map(|(r, x)| r * x).sum::<f64>() * grid.cell_area();
        prop_assert!(e >= fill.energy - 1e-9);
    }

    #[test]
    fn flocking_never_beats_its_own_lower_bound(v in prop::collection::vec(0.0f64..2.0, 36), lambda in 0.0f64..0.3) {
        let grid = Grid::new(Point::ORIGIN, 0.25, 6, 6).unwrap();
        let (cap, mass) = (1.0, 0.5);
        let k = PairKernel::gaussian(&grid, 1.0, 0.5);
        let res = bathtub::flocking_solve_values(&grid, &v, &k, lambda, cap, mass, &FlockingOptions::default()).unwrap();
        res.density.check(Some(mass)).unwrap();
        let fill = bathtub::bathtub_fill(&grid, &v, cap, mass).unwrap();
        // nonnegative W only adds energy on top of the bathtub minimum
        prop_assert!(res.energy >= fill.energy - 1e-9);
        let e = bathtub::flocking_energy(&grid, &v, &k, lambda, &res.density.values);
        prop_assert!((e - res.energy).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn screening_area_equals_source_count(pts in prop::collection::vec(point(2.0), 1..5)) {
        let region = screening::screening_region(&pts, &ScreeningOptions::with_spacing(0.05)).unwrap();
        prop_assert!((region.area - pts.len() as f64).abs() < 1e-6, "area {}", region.area);
        prop_assert!(region.occupancy.iter().all(|&o| (-1e-9..=1.0 + 1e-9).contains(&o)));
    }

    #[test]
    fn screening_commutes_with_translation(pts in prop::collection::vec(point(1.5), 1..4), shift in (-4i32..4, -4i32..4)) {
        let h = 0.05;
        let d = Point::new(shift.0 as f64 * 10.0 * h, shift.1 as f64 * 10.0 * h);
        let a = screening::screening_region(&pts, &ScreeningOptions::with_spacing(h)).unwrap();
        let moved: Vec<Point> = pts.iter().map(|&p| p + d).collect();
        let b = screening::screening_region(&moved, &ScreeningOptions::with_spacing(h)).unwrap();
        for i in 0..a.grid.len() {
            let c = a.grid.center_of(i);
            prop_assert!((a.occupancy[i] - b.occupancy_at(c + d)).abs() < 1e-6);
        }
    }

    #[test]
    fn sector_dimension_matches_partition_count(n in 2usize..6, fermions in any::<bool>(), extra in 0usize..10) {
        let ell = if fermions { 3 } else { 2 };
        let l = l_min(n, ell) + extra;
        let sector = MomentumSector::new(n, l, statistics(ell)).unwrap();
        let basis = ed::enumerate_basis(&sector).unwrap();
        prop_assert_eq!(basis.len() as u128, sector.partition_count());
        prop_assert!(basis.states.iter().all(|s| s.momentum() == l));
    }

    #[test]
    fn factored_and_assembled_operators_agree(n in 2usize..5, fermions in any::<bool>(), extra in 0usize..6, seed in any::<u64>()) {
        let ell = if fermions { 3 } else { 2 };
        let l = l_min(n, ell) + extra;
        let sector = MomentumSector::new(n, l, statistics(ell)).unwrap();
        let basis = ed::enumerate_basis(&sector).unwrap();
        let m = ell as usize - 2;
        let f = ed::factored_hamiltonian(&basis, m).unwrap();
        let s = ed::build_hamiltonian(&sector, m).unwrap();
        let x = scattered_points(basis.len(), 1.0, seed).iter().map(|p| p.x).collect::<Vec<_>>();
        let (mut y1, mut y2) = (vec![0.0; x.len()], vec![0.0; x.len()]);
        f.apply(&x, &mut y1);
        s.apply(&x, &mut y2);
        for (a, b) in y1.iter().zip(&y2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // positive semidefinite
        let xhx: f64 = x.iter().zip(&y1).map(|(a, b)| a * b).sum();
        prop_assert!(xhx >= -1e-10);
    }
}
