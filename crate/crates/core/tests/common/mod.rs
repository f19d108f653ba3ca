//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use laughlin_lab::ed::{self, Method, MomentumSector, SpectrumOptions};
use laughlin_lab::model::{Point, Statistics};

/// Partitions of `d` into at most `k` parts, by the recurrence
/// `p(d, k) = p(d, k - 1) + p(d - k, k)`.
pub fn partitions_oracle(d: usize, k: usize) -> u64 {
    let mut t = vec![vec![0u64; k + 1]; d + 1];
    for row in t.iter_mut().take(1) {
        row.iter_mut().for_each(|x| *x = 1);
    }
    for n in 1..=d {
        for j in 1..=k {
            t[n][j] = t[n][j - 1] + if n >= j { t[n - j][j] } else { 0 };
        }
    }
    t[d][k]
}

pub fn statistics(ell: u32) -> Statistics {
    if ell % 2 == 0 {
        Statistics::Bosonic
    } else {
        Statistics::Fermionic
    }
}

pub fn laughlin_momentum(n: usize, ell: u32) -> usize {
    ell as usize * n * (n - 1) / 2
}

pub fn l_min(n: usize, ell: u32) -> usize {
    if ell % 2 == 0 {
        0
    } else {
        n * (n - 1) / 2
    }
}

/// Eigenvalues of the explicitly assembled sector matrix, by a dense
/// symmetric eigen-decomposition.
pub fn dense_sector_eigenvalues(n: usize, ell: u32, l: usize) -> Vec<f64> {
    let sector = MomentumSector::new(n, l, statistics(ell)).unwrap();
    let h = ed::build_hamiltonian(&sector, ell as usize - 2).unwrap();
    let mut v: Vec<f64> = h.to_dense().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// One row of the golden gap table.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenRow {
    pub n: usize,
    pub ell: u32,
    pub l: usize,
    pub dim: usize,
    pub zero_modes: usize,
    pub lowest_nonzero: f64,
    pub oracle: String,
}

pub const GOLDEN_HEADER: &str = "N,ell,L,dim,zero_modes,lowest_nonzero,oracle";

pub fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/gap_table.csv")
}

pub fn read_golden(path: &Path) -> Option<Vec<GoldenRow>> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    assert_eq!(lines.next()?, GOLDEN_HEADER, "unexpected golden header in {}", path.display());
    Some(
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                GoldenRow {
                    n: f[0].parse().unwrap(),
                    ell: f[1].parse().unwrap(),
                    l: f[2].parse().unwrap(),
                    dim: f[3].parse().unwrap(),
                    zero_modes: f[4].parse().unwrap(),
                    lowest_nonzero: f[5].parse().unwrap(),
                    oracle: f[6].to_string(),
                }
            })
            .collect(),
    )
}

pub fn write_golden(path: &Path, rows: &[GoldenRow]) {
    let mut s = String::from(GOLDEN_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.15e},{}\n",
            r.n, r.ell, r.l, r.dim, r.zero_modes, r.lowest_nonzero, r.oracle
        ));
    }
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, s).unwrap();
}

/// Reference values for one sector, independent of the factored operator
/// the production path uses: a dense decomposition of the assembled matrix
/// when it fits, otherwise Lanczos on the assembled matrix with its own
/// seed, subspace size and a tighter residual.
pub fn oracle_row(n: usize, ell: u32, l: usize, dense_limit: usize) -> GoldenRow {
    let tol = ed::zero_tolerance(n);
    let sector = MomentumSector::new(n, l, statistics(ell)).unwrap();
    let dim = ed::enumerate_basis(&sector).unwrap().len();
    let (vals, oracle) = if dim <= dense_limit {
        (dense_sector_eigenvalues(n, ell, l), "dense")
    } else {
        let h = ed::build_hamiltonian(&sector, ell as usize - 2).unwrap();
        let mut o = SpectrumOptions::new(1, tol);
        o.until_nonzero = true;
        o.force_lanczos = true;
        o.krylov = 100;
        o.residual_tol = 1e-11;
        o.seed = 0x9e37_79b9_7f4a_7c15;
        let r = ed::lowest_spectrum(&h, &o).unwrap();
        assert_eq!(r.method, Method::Lanczos);
        (r.eigenvalues, "lanczos-assembled")
    };
    let zero_modes = vals.iter().take_while(|&&v| v < tol).count();
    GoldenRow {
        n,
        ell,
        l,
        dim,
        zero_modes,
        lowest_nonzero: vals.get(zero_modes).copied().unwrap_or(f64::NAN),
        oracle: oracle.into(),
    }
}

/// Deterministic pseudo-random points in a square, for fixtures.
pub fn scattered_points(n: usize, half_width: f64, seed: u64) -> Vec<Point> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point::new(rng.random_range(-half_width..half_width), rng.random_range(-half_width..half_width)))
        .collect()
}
