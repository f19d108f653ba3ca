//! Exact diagonalization of pseudo-potential Hamiltonians in the lowest
//! Landau level, one total angular momentum sector at a time.
//!
//! Orbitals are `phi_m(z) = c_m z^m exp(-|z|^2 / 4)` with `B = 1` and
//! `c_m` normalizing them. The pair projector onto relative angular
//! momentum `m` acts in second quantization as `H = sum_s Bt_s^dag Bt_s`,
//! where `Bt_s` annihilates a pair of total momentum `s` in the state with
//! relative momentum `m`. Applying `H` through the stacked `Bt_s` keeps the
//! operator positive semidefinite by construction.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::Statistics;

/// Largest basis the enumerator will build.
pub const MAX_BASIS_DIM: usize = 10_000_000;

/// Sectors up to this dimension are diagonalized densely.
pub const DENSE_LIMIT: usize = 2000;

/// Ratio between the midpoint-substitution action with its `1/(2 pi)`
/// prefactor and the projector Hamiltonian `H(0, N)`. Fixed by
/// [`calibrate_delta_factor`].
pub const DELTA_CONVENTION_FACTOR: f64 = 1.0 / (2.0 * PI);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentumSector {
    pub n: usize,
    pub l: usize,
    pub statistics: Statistics,
    /// Highest orbital index; `None` means `L`, which loses nothing.
    pub m_max: Option<usize>,
}

impl MomentumSector {
    pub fn new(n: usize, l: usize, statistics: Statistics) -> Result<Self> {
        let s = MomentumSector { n, l, statistics, m_max: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::invalid("sector needs N >= 1"));
        }
        if self.l < self.l_min() {
            return Err(LabError::invalid(format!(
                "fermionic sector needs L >= N(N-1)/2 = {}, got {}",
                self.l_min(),
                self.l
            )));
        }
        if self.m_max() > u16::MAX as usize {
            return Err(LabError::invalid("orbital index exceeds 65535"));
        }
        Ok(())
    }

    /// Smallest momentum in the Hilbert space: 0 for bosons, `N(N-1)/2`
    /// for fermions.
    pub fn l_min(&self) -> usize {
        match self.statistics {
            Statistics::Bosonic => 0,
            Statistics::Fermionic => self.n * (self.n - 1) / 2,
        }
    }

    pub fn m_max(&self) -> usize {
        self.m_max.unwrap_or(self.l)
    }

    /// Partitions of `L - L_min` into at most `N` parts; the basis
    /// dimension when `m_max = L`.
    pub fn partition_count(&self) -> u128 {
        partitions_at_most(self.l - self.l_min(), self.n)
    }
}

/// Number of partitions of `total` into at most `parts` parts (saturating).
pub fn partitions_at_most(total: usize, parts: usize) -> u128 {
    // p[k][t]: partitions of t into parts of size <= k, which is the same
    // count as partitions into at most k parts
    let k = parts.min(total.max(1));
    let mut p = vec![0u128; total + 1];
    p[0] = 1;
    for size in 1..=k {
        for t in size..=total {
            p[t] = p[t].saturating_add(p[t - size]);
        }
    }
    p[total]
}

/// Occupied orbitals in ascending order, one entry per particle.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OccupationState {
    pub orbitals: Vec<u16>,
}

impl OccupationState {
    /// Occupation numbers `n_0..=n_{m_max}`.
    pub fn occupations(&self, m_max: usize) -> Vec<u32> {
        let mut n = vec![0; m_max + 1];
        for &o in &self.orbitals {
            n[o as usize] += 1;
        }
        n
    }

    pub fn momentum(&self) -> usize {
        self.orbitals.iter().map(|&o| o as usize).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Basis {
    pub sector: MomentumSector,
    /// Lexicographic order of the ascending orbital lists.
    pub states: Vec<OccupationState>,
    index: HashMap<Vec<u16>, usize>,
}

impl Basis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, orbitals: &[u16]) -> Option<usize> {
        self.index.get(orbitals).copied()
    }
}

/// All states of the sector, without duplicates, in canonical order.
pub fn enumerate_basis(sector: &MomentumSector) -> Result<Basis> {
    sector.validate()?;
    let count = sector.partition_count();
    if count > MAX_BASIS_DIM as u128 {
        return Err(LabError::DimensionOverflow { dim: count.min(usize::MAX as u128) as usize, limit: MAX_BASIS_DIM });
    }
    let fermionic = sector.statistics == Statistics::Fermionic;
    let mut states = Vec::with_capacity(count as usize);
    let mut cur = Vec::with_capacity(sector.n);
    fill(sector.n, sector.l, 0, sector.m_max(), fermionic, &mut cur, &mut states);
    let index = states.iter().enumerate().map(|(i, s): (usize, &OccupationState)| (s.orbitals.clone(), i)).collect();
    Ok(Basis { sector: *sector, states, index })
}

fn fill(left: usize, sum: usize, min: usize, m_max: usize, fermionic: bool, cur: &mut Vec<u16>, out: &mut Vec<OccupationState>) {
    if left == 1 {
        if sum >= min && sum <= m_max {
            cur.push(sum as u16);
            out.push(OccupationState { orbitals: cur.clone() });
            cur.pop();
        }
        return;
    }
    let mut v = min;
    loop {
        // the remaining `left` orbitals are at least v, v (+1), ...
        let least = if fermionic { left * v + left * (left - 1) / 2 } else { left * v };
        if least > sum || v > m_max {
            break;
        }
        cur.push(v as u16);
        fill(left - 1, sum - v, if fermionic { v + 1 } else { v }, m_max, fermionic, cur, out);
        cur.pop();
        v += 1;
    }
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Amplitude of `phi_{s-m}(z_R) phi_m(z_r)` in `phi_p(z_1) phi_q(z_2)`,
/// with `z_R = (z_1 + z_2)/sqrt 2`, `z_r = (z_1 - z_2)/sqrt 2`, `s = p + q`.
pub fn pair_coefficient(m: usize, p: usize, q: usize) -> f64 {
    let s = p + q;
    if m > s {
        return 0.0;
    }
    let mut sum = 0.0;
    for a in 0..=m.min(p) {
        let b = m - a;
        if b > q {
            continue;
        }
        let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binomial(p, a) * binomial(q, b);
    }
    let log_norm = 0.5 * (ln_factorial(s - m) + ln_factorial(m) - ln_factorial(p) - ln_factorial(q)) - 0.5 * s as f64 * 2f64.ln();
    sum * log_norm.exp()
}

fn parity_matches(m: usize, stats: Statistics) -> bool {
    match stats {
        Statistics::Bosonic => m % 2 == 0,
        Statistics::Fermionic => m % 2 == 1,
    }
}

/// Overlap of the normalized (anti)symmetrized pair `(p, q)` with the
/// pair state of relative momentum `m`.
fn pair_overlap(m: usize, p: usize, q: usize, stats: Statistics) -> f64 {
    if p == q {
        return match stats {
            Statistics::Bosonic => pair_coefficient(m, p, p),
            Statistics::Fermionic => 0.0,
        };
    }
    let (a, b) = (p.min(q), p.max(q));
    let sign = if stats == Statistics::Fermionic && p > q { -1.0 } else { 1.0 };
    sign * 2f64.sqrt() * pair_coefficient(m, a, b)
}

/// Matrix element of the relative-momentum-`m` projector between the
/// normalized two-particle states built on the orbital pairs `input` and
/// `output`. Fermionic pairs are antisymmetrized in the given order.
pub fn two_body_element(m: usize, input: (usize, usize), output: (usize, usize), stats: Statistics) -> f64 {
    if input.0 + input.1 != output.0 + output.1 || !parity_matches(m, stats) {
        return 0.0;
    }
    pair_overlap(m, input.0, input.1, stats) * pair_overlap(m, output.0, output.1, stats)
}

/// Matrix-vector products `y = A x` for real symmetric operators.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Compressed rows.
#[derive(Clone, Debug, Default)]
struct Csr {
    ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, mut t: Vec<(u32, u32, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut ptr = vec![0; rows + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            ptr[r as usize + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..rows {
            ptr[i + 1] += ptr[i];
        }
        Csr { ptr, cols, vals }
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.ptr[r]..self.ptr[r + 1]).map(move |k| (self.cols[k] as usize, self.vals[k]))
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(r, out)| {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        });
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// `H = M^T M` with `M` the stacked pair annihilators into the
/// `(N-2)`-particle states of every total momentum.
#[derive(Clone, Debug)]
pub struct FactoredOperator {
    dim: usize,
    intermediate: usize,
    m: Csr,
    mt: Csr,
}

impl FactoredOperator {
    pub fn intermediate_dim(&self) -> usize {
        self.intermediate
    }

    pub fn nnz(&self) -> usize {
        self.m.nnz()
    }

    /// Assembles `M^T M` explicitly (upper triangle).
    pub fn to_sparse(&self) -> SparseOperator {
        let mut t: Vec<(u32, u32, f64)> = Vec::new();
        for r in 0..self.intermediate {
            let row: Vec<(usize, f64)> = self.m.row(r).collect();
            for (i, &(a, va)) in row.iter().enumerate() {
                for &(b, vb) in &row[i..] {
                    let (lo, hi) = (a.min(b), a.max(b));
                    t.push((lo as u32, hi as u32, va * vb));
                }
            }
        }
        SparseOperator { dim: self.dim, upper: Csr::from_triplets(self.dim, t), note: None }
    }
}

impl LinearOperator for FactoredOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut w = vec![0.0; self.intermediate];
        self.m.mul(x, &mut w);
        self.mt.mul(&w, y);
    }
}

/// Pair annihilation amplitudes of one state: `(remaining orbitals, value)`
/// for every pair `p <= q` removed, already carrying `pair_coefficient`.
fn pair_removals(state: &[u16], m: usize, stats: Statistics) -> Vec<(Vec<u16>, f64)> {
    let mut out = Vec::new();
    let n = state.len();
    let mut i = 0;
    while i < n {
        let p = state[i];
        let np = state[i..].iter().take_while(|&&o| o == p).count();
        // pairs within the run of equal orbitals (bosons only)
        if stats == Statistics::Bosonic && np >= 2 {
            let g = pair_coefficient(m, p as usize, p as usize);
            if g != 0.0 {
                let amp = ((np * (np - 1)) as f64).sqrt();
                let mut rest = state.to_vec();
                rest.drain(i..i + 2);
                out.push((rest, g * amp / 2f64.sqrt()));
            }
        }
        let mut j = i + np;
        while j < n {
            let q = state[j];
            let nq = state[j..].iter().take_while(|&&o| o == q).count();
            let g = pair_coefficient(m, p as usize, q as usize);
            if g != 0.0 {
                let amp = match stats {
                    Statistics::Bosonic => ((np * nq) as f64).sqrt(),
                    // a_q a_p: (-1)^(#below p) (-1)^(#below q - 1)
                    Statistics::Fermionic => {
                        if (i + j - 1) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                let mut rest = state.to_vec();
                rest.remove(j);
                rest.remove(i);
                out.push((rest, 2f64.sqrt() * g * amp));
            }
            j += nq;
        }
        i += np;
    }
    out
}

/// Factored form of `H(m, N)` on `basis`. A parity mismatch between `m`
/// and the statistics gives the zero operator.
pub fn factored_hamiltonian(basis: &Basis, m: usize) -> Result<FactoredOperator> {
    let stats = basis.sector.statistics;
    let dim = basis.len();
    if basis.sector.n < 2 || !parity_matches(m, stats) {
        return Ok(FactoredOperator { dim, intermediate: 0, m: Csr::from_triplets(0, vec![]), mt: Csr::from_triplets(dim, vec![]) });
    }
    let per_state: Vec<Vec<(Vec<u16>, f64)>> =
        basis.states.par_iter().map(|s| pair_removals(&s.orbitals, m, stats)).collect();
    let mut inter: HashMap<Vec<u16>, u32> = HashMap::new();
    let mut t = Vec::new();
    for (c, rem) in per_state.into_iter().enumerate() {
        for (rest, v) in rem {
            let next = inter.len() as u32;
            let r = *inter.entry(rest).or_insert(next);
            t.push((r, c as u32, v));
        }
    }
    let rows = inter.len();
    let tt: Vec<(u32, u32, f64)> = t.iter().map(|&(r, c, v)| (c, r, v)).collect();
    Ok(FactoredOperator { dim, intermediate: rows, m: Csr::from_triplets(rows, t), mt: Csr::from_triplets(dim, tt) })
}

/// Symmetric operator stored as its upper triangle.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    dim: usize,
    upper: Csr,
    /// Set when the operator is zero for a structural reason.
    pub note: Option<String>,
}

impl SparseOperator {
    /// `(row, col, value)` with `row <= col`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |r| self.upper.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = (r.min(c), r.max(c));
        self.upper.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
        a
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.dim {
            let mut acc = 0.0;
            for (c, v) in self.upper.row(r) {
                acc += v * x[c];
                if c != r {
                    y[c] += v * x[r];
                }
            }
            y[r] += acc;
        }
    }
}

/// Explicit sparse `H(m, N)` on the sector. Intended for moderate
/// dimensions; large sectors should use [`factored_hamiltonian`].
pub fn build_hamiltonian(sector: &MomentumSector, m: usize) -> Result<SparseOperator> {
    let basis = enumerate_basis(sector)?;
    build_hamiltonian_on(&basis, m)
}

pub fn build_hamiltonian_on(basis: &Basis, m: usize) -> Result<SparseOperator> {
    let mut op = factored_hamiltonian(basis, m)?.to_sparse();
    if !parity_matches(m, basis.sector.statistics) {
        op.note = Some(format!(
            "pseudo-potential m = {m} has the wrong parity for {:?} particles; the operator is zero",
            basis.sector.statistics
        ));
    }
    Ok(op)
}

pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.0.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// `1e-10 * N(N-1)/2`, the zero-mode threshold.
pub fn zero_tolerance(n: usize) -> f64 {
    1e-10 * (n * n.saturating_sub(1) / 2).max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dense,
    Lanczos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    /// Eigenvalues wanted.
    pub k: usize,
    pub zero_tol: f64,
    /// Keep going past `k` until one eigenvalue above `zero_tol` is found.
    pub until_nonzero: bool,
    /// Residual norm required of every Ritz pair.
    pub residual_tol: f64,
    /// Lanczos steps per restart.
    pub krylov: usize,
    pub max_restarts: usize,
    pub dense_limit: usize,
    /// Skip the dense path even for small operators.
    pub force_lanczos: bool,
    pub seed: u64,
}

impl SpectrumOptions {
    pub fn new(k: usize, zero_tol: f64) -> Self {
        SpectrumOptions {
            k,
            zero_tol,
            until_nonzero: false,
            residual_tol: 1e-10,
            krylov: 60,
            max_restarts: 200,
            dense_limit: DENSE_LIMIT,
            force_lanczos: false,
            seed: 0x1a2c_2005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Zero modes among the computed eigenvalues; complete whenever
    /// `lowest_nonzero` is set.
    pub zero_mode_count: usize,
    pub lowest_nonzero: Option<f64>,
    pub method: Method,
    /// Largest residual norm among the returned pairs (0 for dense).
    pub max_residual: f64,
}

/// The lowest eigenvalues of `op`, densely below `dense_limit` and by
/// Lanczos otherwise.
pub fn lowest_spectrum(op: &dyn LinearOperator, opts: &SpectrumOptions) -> Result<SpectrumResult> {
    if opts.k == 0 {
        return Err(LabError::invalid("k must be >= 1"));
    }
    let n = op.dim();
    if n == 0 {
        return Ok(SpectrumResult { eigenvalues: vec![], zero_mode_count: 0, lowest_nonzero: None, method: Method::Dense, max_residual: 0.0 });
    }
    let (vals, method, res) = if n <= opts.dense_limit && !opts.force_lanczos {
        (dense_eigenvalues(op), Method::Dense, 0.0)
    } else {
        let (v, r) = lanczos(op, opts)?;
        (v, Method::Lanczos, r)
    };
    let zero_mode_count = vals.iter().take_while(|&&v| v < opts.zero_tol).count();
    let lowest_nonzero = vals.get(zero_mode_count).copied();
    let mut keep = opts.k.min(vals.len());
    if opts.until_nonzero {
        keep = keep.max((zero_mode_count + 1).min(vals.len()));
    }
    Ok(SpectrumResult { eigenvalues: vals[..keep].to_vec(), zero_mode_count, lowest_nonzero, method, max_residual: res })
}

/// Every eigenvalue, ascending, from the materialized matrix.
pub fn dense_eigenvalues(op: &dyn LinearOperator) -> Vec<f64> {
    let n = op.dim();
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    // symmetrize against rounding in the products
    let a = (&a + a.transpose()) * 0.5;
    let mut v: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorize the reduction
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(b, a)| *b += alpha * a);
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One classical Gram-Schmidt pass against `basis`; returns the removed
/// coefficients.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let coeffs: Vec<f64> = basis.par_iter().map(|b| dot(b, v)).collect();
    for (b, c) in basis.iter().zip(&coeffs) {
        axpy(-c, b, v);
    }
    coeffs
}

/// Thick-restart Lanczos with full reorthogonalization and locking.
///
/// Each new direction first has the three-term recurrence removed and then
/// gets one Gram-Schmidt pass against the whole basis (a second one only if
/// the first removed a large part); the removed coefficients fill the
/// projected matrix `V^T A V`. Restarts keep the lowest unconverged Ritz
/// vectors and continue from the residual direction, so `A V = V H + f e^T`
/// holds and Ritz residuals are `|f| |s_last|`. Pairs are locked only after
/// a true residual check. Converged pairs at the bottom are locked and
/// projected out of everything later; repeated eigenvalues surface one copy
/// at a time. Once enough pairs are locked, a fresh run from a random
/// vector on the deflated operator must converge no lower than the locked
/// values, which guards against a missed copy.
fn lanczos(op: &dyn LinearOperator, opts: &SpectrumOptions) -> Result<(Vec<f64>, f64)> {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mmax = opts.krylov.max(8);
    let keep = (mmax / 4).max(2);
    let tol = opts.residual_tol;
    let target = |vals: &[f64]| {
        let zeros = vals.iter().filter(|&&v| v < opts.zero_tol).count();
        let want = if opts.until_nonzero { opts.k.max(zeros + 1) } else { opts.k };
        want.min(n)
    };
    let true_residual = |y: &[f64], theta: f64| {
        let mut ay = vec![0.0; n];
        op.apply(y, &mut ay);
        axpy(-theta, y, &mut ay);
        norm(&ay)
    };
    let mut locked: Vec<Vec<f64>> = Vec::new();
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut max_res = 0.0f64;
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut h: Vec<Vec<f64>> = Vec::new();
    let mut next: Option<Vec<f64>> = None;
    let mut hscale = 1e-300f64;
    let mut restarts = 0;
    while locked.len() < n {
        if next.is_none() {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let nv = orthogonalize_all(&mut v, &locked, &vs);
            if nv < 1e-10 {
                // locked plus basis already span everything
                if vs.is_empty() {
                    break;
                }
            } else {
                v.iter_mut().for_each(|x| *x /= nv);
                next = Some(v);
            }
        }
        restarts += 1;
        if restarts > opts.max_restarts {
            return Err(LabError::NonConvergence {
                what: "Lanczos",
                detail: format!("{} of {} eigenpairs after {} restarts", locked.len(), target(&locked_vals), opts.max_restarts),
            });
        }
        let cap = mmax.min(n - locked.len());
        // the previous vector of the current three-term run and its coupling
        let mut prev: Option<(usize, f64)> = None;
        // expand the basis until the lowest Ritz pair converges or room runs out
        let (vals, svec, f, fnorm) = loop {
            if let Some(v) = next.take() {
                let j = vs.len();
                let mut w = vec![0.0; n];
                op.apply(&v, &mut w);
                let mut col = vec![0.0; j + 1];
                col[j] = dot(&v, &w);
                axpy(-col[j], &v, &mut w);
                if let Some((i, beta)) = prev {
                    col[i] += beta;
                    axpy(-beta, &vs[i], &mut w);
                }
                vs.push(v);
                let mut before = norm(&w);
                for _ in 0..3 {
                    orthogonalize(&mut w, &locked);
                    let c = orthogonalize(&mut w, &vs);
                    col.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    let after = norm(&w);
                    if after > std::f64::consts::FRAC_1_SQRT_2 * before {
                        break;
                    }
                    before = after;
                }
                hscale = hscale.max(col[j].abs());
                for (row, c) in h.iter_mut().zip(&col) {
                    row.push(*c);
                }
                h.push(col);
                let s = h.len();
                for i in 0..s {
                    h[s - 1][i] = h[i][s - 1];
                }
                next = Some(w);
            }
            let mut f = next.take().unwrap();
            let fnorm = norm(&f);
            let exhausted = vs.len() >= cap || fnorm <= 1e-13 * hscale;
            if exhausted || vs.len() % 5 == 0 {
                let (vals, svec) = projected_eigen(&h);
                let r = fnorm * svec[(vs.len() - 1, 0)].abs();
                if exhausted || r <= tol {
                    break (vals, svec, (fnorm > 1e-13 * hscale).then_some(f), fnorm);
                }
            }
            f.iter_mut().for_each(|x| *x /= fnorm);
            prev = Some((vs.len() - 1, fnorm));
            next = Some(f);
        };
        let m = vs.len();
        let comb = |j: usize| -> Vec<f64> {
            let mut y = vec![0.0; n];
            for (k, v) in vs.iter().enumerate() {
                axpy(svec[(k, j)], v, &mut y);
            }
            let ny = norm(&y);
            y.iter_mut().for_each(|x| *x /= ny);
            y
        };
        let mut first_kept = 0;
        let mut fresh = false;
        let mut done = false;
        let mut i = 0;
        while i < m {
            let want = target(&locked_vals);
            if fnorm * svec[(m - 1, i)].abs() > tol {
                break;
            }
            let y = comb(i);
            let r = true_residual(&y, vals[i]);
            if r > tol {
                break;
            }
            if locked.len() < want {
                max_res = max_res.max(r);
                locked.push(y);
                locked_vals.push(vals[i]);
                first_kept = i + 1;
                if locked.len() >= target(&locked_vals) {
                    // verify with a direction the Krylov space may have missed
                    fresh = true;
                }
                i += 1;
                continue;
            }
            let top = locked_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if vals[i] < top - 10.0 * tol {
                let imax = locked_vals.iter().position(|&v| v == top).unwrap();
                locked.swap_remove(imax);
                locked_vals.swap_remove(imax);
                max_res = max_res.max(r);
                locked.push(y);
                locked_vals.push(vals[i]);
                first_kept = i + 1;
                fresh = true;
                i += 1;
                continue;
            }
            // a replacement in this cycle needs a fresh verification
            done = !fresh;
            break;
        }
        if done {
            break;
        }
        // restart from the next unconverged Ritz vectors; a verification
        // run starts clean so the basis stays a Krylov decomposition
        let sel: Vec<usize> = if fresh { Vec::new() } else { (first_kept..m.min(first_kept + keep)).collect() };
        let new_vs: Vec<Vec<f64>> = sel.iter().map(|&j| comb(j)).collect();
        h = sel.iter().enumerate().map(|(a, &j)| (0..sel.len()).map(|b| if a == b { vals[j] } else { 0.0 }).collect()).collect();
        vs = new_vs;
        next = if fresh { None } else { f.map(|f| f.iter().map(|x| x / fnorm).collect()) };
        if let Some(v) = next.as_mut() {
            // the residual direction is orthogonal to the kept vectors up to rounding
            let nv = orthogonalize_all(v, &locked, &vs);
            if nv < 1e-8 || !vs.is_empty() && (nv - 1.0).abs() > 1e-6 {
                // a random direction would break A V = V H + f e^T
                next = None;
                vs.clear();
                h.clear();
            } else {
                v.iter_mut().for_each(|x| *x /= nv);
            }
        }
    }
    let mut v = locked_vals;
    v.sort_by(f64::total_cmp);
    Ok((v, max_res))
}

/// Projects `w` off both sets, repeating while a pass shrinks the norm
/// below `1/sqrt 2` of its previous value (DGKS), and returns the norm.
fn orthogonalize_all(w: &mut [f64], locked: &[Vec<f64>], vs: &[Vec<f64>]) -> f64 {
    let mut before = norm(w);
    for _ in 0..5 {
        orthogonalize(w, locked);
        orthogonalize(w, vs);
        let after = norm(w);
        if after > std::f64::consts::FRAC_1_SQRT_2 * before {
            return after;
        }
        before = after;
    }
    norm(w)
}

/// Eigenpairs of the projected matrix, ascending.
fn projected_eigen(h: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let m = h.len();
    let t = DMatrix::from_fn(m, m, |r, c| 0.5 * (h[r][c] + h[c][r]));
    let e = SymmetricEigen::new(t);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m, m, |r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorGap {
    pub n: usize,
    pub ell: u32,
    pub l: usize,
    pub dim: usize,
    pub zero_modes: usize,
    pub lowest_nonzero: Option<f64>,
    pub eigenvalues: Vec<f64>,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub ell: u32,
    pub statistics: Statistics,
    /// Pseudo-potential index `ell - 2`.
    pub m: usize,
    pub laughlin_momentum: usize,
    pub zero_tol: f64,
    /// Smallest nonzero eigenvalue over the scanned sectors.
    pub sigma: Option<f64>,
    pub sigma_sector: Option<usize>,
    pub sectors: Vec<SectorGap>,
}

impl GapReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,ell,L,dim,zero_modes,lowest_nonzero")?;
        for s in &self.sectors {
            let ln = s.lowest_nonzero.map_or(String::from("nan"), |v| format!("{v:.15e}"));
            writeln!(out, "{},{},{},{},{},{}", s.n, s.ell, s.l, s.dim, s.zero_modes, ln)?;
        }
        Ok(())
    }

    pub fn sector(&self, l: usize) -> Option<&SectorGap> {
        self.sectors.iter().find(|s| s.l == l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapOptions {
    /// Eigenvalues per sector; at least one nonzero value is always found.
    pub k: usize,
    /// Highest momentum scanned; `None` is the Laughlin momentum.
    pub l_max: Option<usize>,
    pub solver: SpectrumOptions,
}

impl GapOptions {
    pub fn new(n: usize, k: usize) -> Self {
        let mut solver = SpectrumOptions::new(k, zero_tolerance(n));
        solver.until_nonzero = true;
        GapOptions { k, l_max: None, solver }
    }
}

/// One sector of `H(ell - 2, N)`.
pub fn sector_spectrum(n: usize, ell: u32, l: usize, opts: &GapOptions) -> Result<SectorGap> {
    let stats = Statistics::from_exponent(ell);
    let sector = MomentumSector::new(n, l, stats)?;
    let basis = enumerate_basis(&sector)?;
    let op = factored_hamiltonian(&basis, ell as usize - 2)?;
    let mut so = opts.solver.clone();
    so.k = opts.k;
    let res = lowest_spectrum(&op, &so)?;
    Ok(SectorGap {
        n,
        ell,
        l,
        dim: basis.len(),
        zero_modes: res.zero_mode_count,
        lowest_nonzero: res.lowest_nonzero,
        eigenvalues: res.eigenvalues,
        method: res.method,
    })
}

/// Spectral gap of `H(ell - 2, N)` over the sectors `L_min <= L <= l_max`.
pub fn spectral_gap(n: usize, ell: u32, opts: &GapOptions) -> Result<GapReport> {
    if ell < 2 {
        return Err(LabError::invalid("ell must be >= 2"));
    }
    if n < 2 {
        return Err(LabError::invalid("N must be >= 2"));
    }
    let stats = Statistics::from_exponent(ell);
    let l_lau = ell as usize * n * (n - 1) / 2;
    let l_min = MomentumSector { n, l: l_lau, statistics: stats, m_max: None }.l_min();
    let l_max = opts.l_max.unwrap_or(l_lau);
    let sectors: Vec<SectorGap> =
        (l_min..=l_max).into_par_iter().map(|l| sector_spectrum(n, ell, l, opts)).collect::<Result<_>>()?;
    let best = sectors
        .iter()
        .filter(|s| s.l <= l_lau)
        .filter_map(|s| s.lowest_nonzero.map(|v| (v, s.l)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GapReport {
        n,
        ell,
        statistics: stats,
        m: ell as usize - 2,
        laughlin_momentum: l_lau,
        zero_tol: opts.solver.zero_tol,
        sigma: best.map(|b| b.0),
        sigma_sector: best.map(|b| b.1),
        sectors,
    })
}

/// A symmetric polynomial in `N` variables in the monomial symmetric
/// basis: `coeffs[lambda]` multiplies `m_lambda`, the sum of the distinct
/// monomials with exponent multiset `lambda` (ascending, padded with 0).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymmetricPolynomial {
    pub n: usize,
    pub coeffs: BTreeMap<Vec<u16>, f64>,
}

/// `sqrt(prod n_m! / N!) * prod_j c_{lambda_j}`: the coefficient of
/// `m_lambda` in the normalized bosonic Fock state, with `B = 1`.
fn monomial_factor(lambda: &[u16]) -> f64 {
    let mut ln = -ln_factorial(lambda.len());
    let mut i = 0;
    while i < lambda.len() {
        let run = lambda[i..].iter().take_while(|&&o| o == lambda[i]).count();
        ln += ln_factorial(run);
        i += run;
    }
    let mut f = 0.5 * ln;
    for &o in lambda {
        let o = o as usize;
        f -= 0.5 * (PI.ln() + (o + 1) as f64 * 2f64.ln() + ln_factorial(o));
    }
    f.exp()
}

impl SymmetricPolynomial {
    /// Polynomial part of the bosonic Fock vector `v` over `basis`.
    pub fn from_fock(basis: &Basis, v: &[f64]) -> Result<Self> {
        if basis.sector.statistics != Statistics::Bosonic {
            return Err(LabError::invalid("symmetric polynomials describe bosonic states"));
        }
        if v.len() != basis.len() {
            return Err(LabError::invalid("vector length does not match the basis"));
        }
        let coeffs = basis.states.iter().zip(v).map(|(s, &c)| (s.orbitals.clone(), c * monomial_factor(&s.orbitals))).collect();
        Ok(SymmetricPolynomial { n: basis.sector.n, coeffs })
    }

    /// Fock coefficients over `basis`; monomials outside it are an error.
    pub fn to_fock(&self, basis: &Basis) -> Result<Vec<f64>> {
        let mut v = vec![0.0; basis.len()];
        for (lambda, &c) in &self.coeffs {
            if c == 0.0 {
                continue;
            }
            let i = basis.index_of(lambda).ok_or_else(|| LabError::invalid(format!("monomial {lambda:?} is outside the basis")))?;
            v[i] = c / monomial_factor(lambda);
        }
        Ok(v)
    }

    fn coefficient(&self, exps: &[u16]) -> f64 {
        let mut key = exps.to_vec();
        key.sort_unstable();
        self.coeffs.get(&key).copied().unwrap_or(0.0)
    }
}

/// `A -> (1/2pi) sum_{i<j} A(.., (z_i+z_j)/2, .., (z_i+z_j)/2, ..)`, the
/// delta-interaction action on the polynomial part of a bosonic state.
///
/// The coefficient of `z^mu` in the result only involves monomials of `A`
/// that agree with `mu` off the pair `(i, j)` and have the same pair degree
/// `s`; substitution sends `z_i^a z_j^(s-a)` to `2^-s (z_i + z_j)^s`.
pub fn delta_action(poly: &SymmetricPolynomial) -> Result<SymmetricPolynomial> {
    let n = poly.n;
    if n < 2 {
        return Ok(SymmetricPolynomial { n, coeffs: BTreeMap::new() });
    }
    let mut out = BTreeMap::new();
    // every output monomial has a degree present in the input
    let mut degrees: Vec<usize> = poly.coeffs.keys().map(|k| k.iter().map(|&o| o as usize).sum()).collect();
    degrees.sort_unstable();
    degrees.dedup();
    for d in degrees {
        let mut mus = Vec::new();
        fill(n, d, 0, d, false, &mut Vec::new(), &mut mus);
        for mu in mus {
            let e = &mu.orbitals;
            let mut total = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let s = (e[i] + e[j]) as usize;
                    let mut inner = 0.0;
                    let mut exps = e.clone();
                    for a in 0..=s {
                        exps[i] = a as u16;
                        exps[j] = (s - a) as u16;
                        inner += poly.coefficient(&exps);
                    }
                    total += inner * binomial(s, e[i] as usize) * 0.5f64.powi(s as i32);
                }
            }
            if total != 0.0 {
                out.insert(mu.orbitals, total / (2.0 * PI));
            }
        }
    }
    Ok(SymmetricPolynomial { n, coeffs: out })
}

/// Ratio `<v, delta_action v> / <v, H(0, N) v>` in the Fock basis.
pub fn calibrate_delta_factor(basis: &Basis, v: &[f64]) -> Result<f64> {
    let poly = SymmetricPolynomial::from_fock(basis, v)?;
    let dv = delta_action(&poly)?.to_fock(basis)?;
    let op = factored_hamiltonian(basis, 0)?;
    let mut hv = vec![0.0; v.len()];
    op.apply(v, &mut hv);
    let den = dot(v, &hv);
    if den.abs() < 1e-300 {
        return Err(LabError::Singular("vector lies in the kernel of H(0, N)".into()));
    }
    Ok(dot(v, &dv) / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sector(n: usize, l: usize, s: Statistics) -> MomentumSector {
        MomentumSector::new(n, l, s).unwrap()
    }

    #[test]
    fn basis_examples() {
        let b = enumerate_basis(&sector(2, 2, Statistics::Bosonic)).unwrap();
        assert_eq!(b.states.iter().map(|s| s.orbitals.clone()).collect::<Vec<_>>(), vec![vec![0, 2], vec![1, 1]]);
        assert_eq!(b.states[0].occupations(2), vec![1, 0, 1]);
        let f = enumerate_basis(&sector(2, 1, Statistics::Fermionic)).unwrap();
        assert_eq!(f.states[0].orbitals, vec![0, 1]);
        assert_eq!(f.len(), 1);
        assert_eq!(enumerate_basis(&sector(3, 0, Statistics::Bosonic)).unwrap().len(), 1);
        assert!(MomentumSector::new(3, 2, Statistics::Fermionic).is_err());
    }

    #[test]
    fn dimensions_match_partition_counts() {
        for n in 1..6 {
            for l in 0..14 {
                let b = enumerate_basis(&sector(n, l, Statistics::Bosonic)).unwrap();
                assert_eq!(b.len() as u128, partitions_at_most(l, n), "N={n} L={l}");
                let lf = l + n * (n - 1) / 2;
                let f = enumerate_basis(&sector(n, lf, Statistics::Fermionic)).unwrap();
                assert_eq!(f.len() as u128, partitions_at_most(l, n));
                let mut sorted = b.states.clone();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted, b.states);
            }
        }
        assert_eq!(partitions_at_most(56, 8), 55974);
    }

    #[test]
    fn dimension_guard() {
        match enumerate_basis(&sector(40, 400, Statistics::Bosonic)) {
            Err(LabError::DimensionOverflow { .. }) => {}
            other => panic!("expected overflow, got {:?}", other.map(|b| b.len())),
        }
    }

    #[test]
    fn two_body_examples() {
        assert_close!(two_body_element(0, (0, 0), (0, 0), Statistics::Bosonic), 1.0, 1e-15);
        assert_close!(two_body_element(1, (0, 1), (0, 1), Statistics::Fermionic), 1.0, 1e-15);
        assert_close!(two_body_element(0, (0, 2), (1, 1), Statistics::Bosonic), 0.5, 1e-15);
        assert_eq!(two_body_element(0, (0, 2), (1, 2), Statistics::Bosonic), 0.0);
        assert_eq!(two_body_element(1, (0, 2), (1, 1), Statistics::Bosonic), 0.0);
    }

    #[test]
    fn pair_states_are_normalized() {
        // the relative/COM transform is unitary on each total-momentum shell
        for s in 0..9 {
            for p in 0..=s {
                let total: f64 = (0..=s).map(|m| pair_coefficient(m, p, s - p).powi(2)).sum();
                assert_close!(total, 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn two_particle_blocks_match_two_body_elements() {
        for (stats, m) in [(Statistics::Bosonic, 0), (Statistics::Bosonic, 2), (Statistics::Fermionic, 1), (Statistics::Fermionic, 3)] {
            for l in 1..8 {
                let Ok(sec) = MomentumSector::new(2, l, stats) else { continue };
                let b = enumerate_basis(&sec).unwrap();
                let h = build_hamiltonian_on(&b, m).unwrap();
                for (i, si) in b.states.iter().enumerate() {
                    for (j, sj) in b.states.iter().enumerate() {
                        let pi = (si.orbitals[0] as usize, si.orbitals[1] as usize);
                        let pj = (sj.orbitals[0] as usize, sj.orbitals[1] as usize);
                        assert_close!(h.get(i, j), two_body_element(m, pi, pj, stats), 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn laughlin_pair_block() {
        let h = build_hamiltonian(&sector(2, 2, Statistics::Bosonic), 0).unwrap();
        let ev = dense_eigenvalues(&h);
        assert_close!(ev[0], 0.0, 1e-14);
        assert_close!(ev[1], 1.0, 1e-14);
    }

    #[test]
    fn parity_mismatch_is_zero_with_a_note() {
        let h = build_hamiltonian(&sector(2, 3, Statistics::Bosonic), 1).unwrap();
        assert!(h.note.is_some());
        assert_eq!(h.entries().count(), 0);
        let r = lowest_spectrum(&h, &SpectrumOptions::new(2, 1e-10)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0, 0.0]);
    }

    #[test]
    fn factored_and_explicit_agree() {
        let b = enumerate_basis(&sector(4, 9, Statistics::Bosonic)).unwrap();
        let f = factored_hamiltonian(&b, 0).unwrap();
        let s = f.to_sparse();
        let x: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (mut y1, mut y2) = (vec![0.0; b.len()], vec![0.0; b.len()]);
        f.apply(&x, &mut y1);
        s.apply(&x, &mut y2);
        for (a, c) in y1.iter().zip(&y2) {
            assert_close!(*a, *c, 1e-12);
        }
    }

    #[test]
    fn lanczos_matches_dense_on_random_projectors() {
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut a = DMatrix::zeros(n, n);
        for _ in 0..60 {
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let nv = norm(&v);
            let v = DMatrix::from_column_slice(n, 1, &v.iter().map(|x| x / nv).collect::<Vec<_>>());
            a += &v * v.transpose();
        }
        let op = DenseOperator(a);
        let dense = dense_eigenvalues(&op);
        let mut o = SpectrumOptions::new(45, 1e-10);
        o.force_lanczos = true;
        let r = lowest_spectrum(&op, &o).unwrap();
        assert_eq!(r.method, Method::Lanczos);
        // 40 zero modes, then the nonzero spectrum
        assert_eq!(r.zero_mode_count, 40);
        for (a, b) in r.eigenvalues.iter().zip(&dense) {
            assert_close!(*a, *b, 1e-9);
        }
    }

    #[test]
    fn zero_operator_spectrum() {
        let op = DenseOperator(DMatrix::zeros(5, 5));
        let r = lowest_spectrum(&op, &SpectrumOptions::new(3, 1e-10)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 3]);
        assert_eq!(r.lowest_nonzero, None);
    }

    #[test]
    fn two_boson_gap_is_one() {
        let g = spectral_gap(2, 2, &GapOptions::new(2, 2)).unwrap();
        assert_eq!(g.sectors.len(), 3);
        assert_close!(g.sigma.unwrap(), 1.0, 1e-12);
        assert_eq!(g.sector(2).unwrap().zero_modes, 1);
        assert_eq!(g.sector(0).unwrap().zero_modes, 0);
    }

    #[test]
    fn delta_action_examples() {
        let mut a = SymmetricPolynomial { n: 2, coeffs: BTreeMap::new() };
        a.coeffs.insert(vec![1, 1], 1.0);
        let d = delta_action(&a).unwrap();
        let k = 1.0 / (2.0 * PI);
        assert_close!(d.coeffs[&vec![0, 2]], 0.25 * k, 1e-15);
        assert_close!(d.coeffs[&vec![1, 1]], 0.5 * k, 1e-15);
        // (z1 - z2)^2 = m_(0,2) - 2 m_(1,1)
        let mut lau = SymmetricPolynomial { n: 2, coeffs: BTreeMap::new() };
        lau.coeffs.insert(vec![0, 2], 1.0);
        lau.coeffs.insert(vec![1, 1], -2.0);
        assert!(delta_action(&lau).unwrap().coeffs.values().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn fock_polynomial_roundtrip() {
        let b = enumerate_basis(&sector(3, 5, Statistics::Bosonic)).unwrap();
        let v: Vec<f64> = (0..b.len()).map(|i| i as f64 - 1.5).collect();
        let back = SymmetricPolynomial::from_fock(&b, &v).unwrap().to_fock(&b).unwrap();
        for (a, c) in v.iter().zip(&back) {
            assert_close!(*a, *c, 1e-12);
        }
    }
}
