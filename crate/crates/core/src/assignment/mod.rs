//! Exact unit-demand assignment: max-weight matching with dual
//! certificates, VCG item prices, fractional augmentation and lottery
//! (Birkhoff–von Neumann) decomposition.
//!
//! Player weights are passed separately from utilities so one matrix can be
//! reused across weight sweeps; the optimized objective is always
//! `sum_i weights[i] * u[i][pi(i)]`.

mod birkhoff;
mod envelope;
mod hungarian;
mod matching;

use serde::{Deserialize, Serialize};

use crate::error::{ApexError, Result};

pub use birkhoff::birkhoff_decompose;
pub use envelope::{bid_envelope, EnvelopePiece};

/// Absolute value tolerance used for certificate checks.
pub const VALUE_TOL: f64 = 1e-9;
/// Relative tolerance for deciding that two objective values tie.
pub const TIE_TOL: f64 = 1e-12;

/// Square matrix of non-negative, finite player-by-item utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct UtilityMatrix {
    n: usize,
    u: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for UtilityMatrix {
    type Error = ApexError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        UtilityMatrix::from_rows(&rows)
    }
}

impl From<UtilityMatrix> for Vec<Vec<f64>> {
    fn from(m: UtilityMatrix) -> Self {
        m.u.chunks(m.n).map(<[f64]>::to_vec).collect()
    }
}

impl UtilityMatrix {
    /// Builds an `n x n` matrix from row-major entries.
    pub fn new(n: usize, u: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(ApexError::Empty);
        }
        if u.len() != n * n {
            return Err(ApexError::NotSquare {
                expected: n * n,
                got: u.len(),
            });
        }
        if let Some(k) = u.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(ApexError::InvalidUtility {
                row: k / n,
                col: k % n,
                value: u[k],
            });
        }
        Ok(Self { n, u })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut u = Vec::with_capacity(n * n);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n {
                return Err(ApexError::NotSquare {
                    expected: n,
                    got: row.len(),
                });
            }
            u.extend_from_slice(row);
        }
        Self::new(n, u)
    }

    pub fn identity(n: usize) -> Self {
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            u[i * n + i] = 1.0;
        }
        Self { n, u }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.u[i * self.n..(i + 1) * self.n]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn max_entry(&self) -> f64 {
        self.u.iter().copied().fold(0.0, f64::max)
    }

    /// Copy with row `i` replaced.
    pub fn with_row(&self, i: usize, row: &[f64]) -> Result<Self> {
        check_len("utility row", self.n, row.len())?;
        let mut u = self.u.clone();
        u[i * self.n..(i + 1) * self.n].copy_from_slice(row);
        Self::new(self.n, u)
    }

    /// Copy with every entry multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.n, self.u.iter().map(|v| v * factor).collect())
    }

    /// True when every row has minimum 0 and maximum 1.
    pub fn is_normalized(&self) -> bool {
        self.check_normalized().is_ok()
    }

    pub fn check_normalized(&self) -> Result<()> {
        for i in 0..self.n {
            let row = self.row(i);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min.abs() > 1e-12 || (max - 1.0).abs() > 1e-12 {
                return Err(ApexError::NotNormalized { row: i, min, max });
            }
        }
        Ok(())
    }

    /// Row-major matrix of `weights[i] * u[i][j]`.
    pub fn weighted(&self, weights: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut w = self.u.clone();
        for i in 0..n {
            for v in &mut w[i * n..(i + 1) * n] {
                *v *= weights[i];
            }
        }
        w
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ApexError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Validates an optional weight vector and returns it (all-ones default).
pub(crate) fn resolve_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            check_len("weights", n, w.len())?;
            if let Some(index) = w.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(ApexError::InvalidWeight {
                    index,
                    value: w[index],
                });
            }
            Ok(w.to_vec())
        }
    }
}

/// A perfect assignment of players to items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `pi[i]` is the item assigned to player `i`.
    pub pi: Vec<usize>,
    pub value: f64,
}

/// Dual solution of the assignment LP: `w[i][j] <= a[i] + b[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Violations of the three certificate conditions for a given assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualCheck {
    /// `max(0, max_ij w_ij - a_i - b_j)`.
    pub feasibility: f64,
    /// `|sum a + sum b - value|`.
    pub duality_gap: f64,
    /// `max_i |a_i + b_pi(i) - w_i,pi(i)|`.
    pub slackness: f64,
}

impl DualCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.feasibility <= tol && self.duality_gap <= tol && self.slackness <= tol
    }
}

impl DualCertificate {
    /// Checks the certificate against `weights * u` and `assignment`.
    pub fn check(&self, u: &UtilityMatrix, weights: &[f64], assignment: &Assignment) -> DualCheck {
        let n = u.n();
        let w = u.weighted(weights);
        let mut feasibility = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                feasibility = feasibility.max(w[i * n + j] - self.a[i] - self.b[j]);
            }
        }
        let dual: f64 = self.a.iter().sum::<f64>() + self.b.iter().sum::<f64>();
        let value: f64 = (0..n).map(|i| w[i * n + assignment.pi[i]]).sum();
        let slackness = (0..n)
            .map(|i| (self.a[i] + self.b[assignment.pi[i]] - w[i * n + assignment.pi[i]]).abs())
            .fold(0.0, f64::max);
        DualCheck {
            feasibility,
            duality_gap: (dual - value).abs(),
            slackness,
        }
    }
}

/// Item prices in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceVector(pub Vec<f64>);

impl PriceVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Outcome of the unit-demand VCG mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcgOutcome {
    pub assignment: Assignment,
    pub prices: PriceVector,
    /// Dual certificate built from the prices: `b = C`, `a_i = w_i,pi(i) - C_pi(i)`.
    pub duals: DualCertificate,
    pub payments: Vec<f64>,
}

/// Bi-stochastic matrix: `x[i][j]` is the probability player `i` gets item `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalAllocation {
    n: usize,
    x: Vec<f64>,
}

/// Tolerance on row/column sums enforced by [`FractionalAllocation::new`].
pub const BISTOCHASTIC_TOL: f64 = 1e-9;

impl FractionalAllocation {
    /// Validated constructor: non-negative entries, unit row and column sums.
    pub fn new(n: usize, x: Vec<f64>) -> Result<Self> {
        let alloc = Self::from_matrix(n, x)?;
        let err = alloc.bistochastic_error();
        if err > BISTOCHASTIC_TOL {
            return Err(ApexError::NotBistochastic(format!(
                "row/column sums deviate from 1 by {err:e}"
            )));
        }
        Ok(alloc)
    }

    /// Shape and finiteness checks only; use [`Self::bistochastic_error`] to
    /// measure how far the matrix is from the Birkhoff polytope.
    pub fn from_matrix(n: usize, x: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(ApexError::Empty);
        }
        check_len("allocation", n * n, x.len())?;
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(ApexError::NotBistochastic(format!(
                "entry ({}, {}) is not finite",
                k / n,
                k % n
            )));
        }
        Ok(Self { n, x })
    }

    pub fn from_permutation(pi: &[usize]) -> Self {
        let n = pi.len();
        let mut x = vec![0.0; n * n];
        for (i, &j) in pi.iter().enumerate() {
            x[i * n + j] = 1.0;
        }
        Self { n, x }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            n,
            x: vec![1.0 / n as f64; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }

    /// Largest violation among negativity and unit row/column sums.
    pub fn bistochastic_error(&self) -> f64 {
        let n = self.n;
        let mut err = self.x.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        for i in 0..n {
            let row: f64 = self.row(i).iter().sum();
            let col: f64 = (0..n).map(|k| self.x[k * n + i]).sum();
            err = err.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        err
    }
}

/// Lottery over permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPermutations {
    pub terms: Vec<(f64, Vec<usize>)>,
}

impl WeightedPermutations {
    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|(w, _)| w).sum()
    }

    /// `sum_k weight_k * P(pi_k)` as a row-major matrix.
    pub fn reconstruct(&self, n: usize) -> Vec<f64> {
        let mut x = vec![0.0; n * n];
        for (w, pi) in &self.terms {
            for (i, &j) in pi.iter().enumerate() {
                x[i * n + j] += w;
            }
        }
        x
    }
}

/// Optimum of a square weighted matrix, tie-broken to the lexicographically
/// smallest optimal permutation, with its Hungarian dual potentials.
pub(crate) fn lex_optimum(w: &[f64], n: usize) -> (Vec<usize>, f64, Vec<f64>, Vec<f64>) {
    let sol = hungarian::solve_max(w, n, n);
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = TIE_TOL * (1.0 + n as f64 * scale);
    // Every optimal permutation lives on the tight edges of any optimal
    // dual, and every perfect matching of tight edges is optimal.
    let tight: Vec<bool> = (0..n * n)
        .map(|k| sol.a[k / n] + sol.b[k % n] - w[k] <= tol)
        .collect();
    let pi = matching::lex_smallest_perfect_matching(&tight, n).unwrap_or(sol.row_to_col);
    let value = (0..n).map(|i| w[i * n + pi[i]]).sum();
    (pi, value, sol.a, sol.b)
}

/// Optimal value of a square weighted matrix and one optimal permutation
/// (no tie-breaking).
pub(crate) fn optimum(w: &[f64], n: usize) -> (f64, Vec<usize>) {
    let sol = hungarian::solve_max(w, n, n);
    (sol.value, sol.row_to_col)
}

/// Optimal value when one extra copy of `item` is available.
fn value_with_second_copy(w: &[f64], n: usize, item: usize) -> f64 {
    let cols = n + 1;
    let mut aug = vec![0.0; n * cols];
    for i in 0..n {
        aug[i * cols..i * cols + n].copy_from_slice(&w[i * n..(i + 1) * n]);
        aug[i * cols + n] = w[i * n + item];
    }
    hungarian::solve_max(&aug, n, cols).value
}

/// Optimal value with player `removed` absent (`n - 1` players, `n` items).
fn value_without_player(w: &[f64], n: usize, removed: usize) -> f64 {
    let mut sub = Vec::with_capacity((n - 1) * n);
    for i in (0..n).filter(|&i| i != removed) {
        sub.extend_from_slice(&w[i * n..(i + 1) * n]);
    }
    hungarian::solve_max(&sub, n - 1, n).value
}

/// VCG prices `C_j = OPT_{+j} - OPT` of a weighted matrix.
pub(crate) fn prices_of_weighted(w: &[f64], n: usize, opt: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let c = value_with_second_copy(w, n, j) - opt;
            if c < 0.0 {
                0.0
            } else {
                c
            }
        })
        .collect()
}

/// Maximizes `sum_i weights[i] * u[i][pi(i)]`.
///
/// Among optimal permutations the lexicographically smallest is returned.
/// The dual certificate satisfies feasibility, strong duality and
/// complementary slackness on the returned assignment.
pub fn solve_assignment(
    u: &UtilityMatrix,
    weights: Option<&[f64]>,
) -> Result<(Assignment, DualCertificate)> {
    let n = u.n();
    let lambda = resolve_weights(n, weights)?;
    let w = u.weighted(&lambda);
    let (pi, value, a, b) = lex_optimum(&w, n);
    Ok((Assignment { pi, value }, DualCertificate { a, b }))
}

/// VCG item prices: the welfare gained from a second copy of each item.
pub fn vcg_prices(u: &UtilityMatrix, weights: Option<&[f64]>) -> Result<PriceVector> {
    let n = u.n();
    let lambda = resolve_weights(n, weights)?;
    let w = u.weighted(&lambda);
    let (opt, _) = optimum(&w, n);
    Ok(PriceVector(prices_of_weighted(&w, n, opt)))
}

fn outcome_for(w: &[f64], n: usize, pi: Vec<usize>, opt: f64) -> Result<VcgOutcome> {
    let prices = prices_of_weighted(w, n, opt);
    let value: f64 = (0..n).map(|i| w[i * n + pi[i]]).sum();
    let payments: Vec<f64> = pi.iter().map(|&j| prices[j]).collect();

    // Second route: the externality each player imposes on the others.
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = VALUE_TOL * (1.0 + scale);
    for i in 0..n {
        let others_best = if n == 1 {
            0.0
        } else {
            value_without_player(w, n, i)
        };
        let externality = others_best - (value - w[i * n + pi[i]]);
        if (externality - payments[i]).abs() > tol {
            return Err(ApexError::Inconsistent(format!(
                "player {i}: second-copy price {} differs from externality {externality}",
                payments[i]
            )));
        }
    }

    let a = (0..n).map(|i| w[i * n + pi[i]] - prices[pi[i]]).collect();
    Ok(VcgOutcome {
        assignment: Assignment { pi, value },
        duals: DualCertificate {
            a,
            b: prices.clone(),
        },
        prices: PriceVector(prices),
        payments,
    })
}

/// Full VCG outcome on the lexicographically smallest optimal assignment.
pub fn vcg_outcome(u: &UtilityMatrix, weights: Option<&[f64]>) -> Result<VcgOutcome> {
    let n = u.n();
    let lambda = resolve_weights(n, weights)?;
    let w = u.weighted(&lambda);
    let (pi, opt, _, _) = lex_optimum(&w, n);
    outcome_for(&w, n, pi, opt)
}

/// VCG outcome for a caller-chosen optimal assignment `pi`.
///
/// Fails if `pi` is not a permutation or is not optimal.
pub fn vcg_outcome_for(
    u: &UtilityMatrix,
    weights: Option<&[f64]>,
    pi: &[usize],
) -> Result<VcgOutcome> {
    let n = u.n();
    let lambda = resolve_weights(n, weights)?;
    check_permutation(pi, n)?;
    let w = u.weighted(&lambda);
    let (opt, _) = optimum(&w, n);
    let value: f64 = (0..n).map(|i| w[i * n + pi[i]]).sum();
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if value < opt - VALUE_TOL * (1.0 + scale) {
        return Err(ApexError::InvalidParameter(format!(
            "assignment has value {value} below the optimum {opt}"
        )));
    }
    outcome_for(&w, n, pi.to_vec(), opt)
}

pub(crate) fn check_permutation(pi: &[usize], n: usize) -> Result<()> {
    check_len("permutation", n, pi.len())?;
    let mut seen = vec![false; n];
    for (i, &j) in pi.iter().enumerate() {
        if j >= n || seen[j] {
            return Err(ApexError::InvalidParameter(format!(
                "pi is not a permutation (entry {i} = {j})"
            )));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Optimal value when each item `j` is available in quantity `1 + y_j`.
///
/// Computed as the mixture `(1 - sum y) OPT + sum_j y_j OPT_{+j}` and checked
/// against the dual upper bound `sum a + sum (1 + y_j) C_j`. Only defined for
/// `sum y <= 1`, where the two agree.
pub fn opt_with_capacities(u: &UtilityMatrix, weights: Option<&[f64]>, y: &[f64]) -> Result<f64> {
    let n = u.n();
    let lambda = resolve_weights(n, weights)?;
    check_len("capacity vector", n, y.len())?;
    if let Some(j) = y.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(ApexError::InvalidCapacity(format!("y[{j}] = {}", y[j])));
    }
    let total: f64 = y.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(ApexError::InvalidCapacity(format!(
            "sum of extra capacity is {total} > 1"
        )));
    }
    let w = u.weighted(&lambda);
    let (pi, opt, _, _) = lex_optimum(&w, n);
    let with_copy: Vec<f64> = (0..n).map(|j| value_with_second_copy(&w, n, j)).collect();
    let mixture = (1.0 - total) * opt + y.iter().zip(&with_copy).map(|(yj, v)| yj * v).sum::<f64>();

    let prices: Vec<f64> = with_copy.iter().map(|v| (v - opt).max(0.0)).collect();
    let a_sum: f64 = (0..n).map(|i| w[i * n + pi[i]] - prices[pi[i]]).sum();
    let bound = a_sum
        + prices
            .iter()
            .zip(y)
            .map(|(c, yj)| (1.0 + yj) * c)
            .sum::<f64>();
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if (mixture - bound).abs() > 1e-8 * (1.0 + scale) {
        return Err(ApexError::Inconsistent(format!(
            "augmented value {mixture} differs from its dual bound {bound}"
        )));
    }
    Ok(mixture)
}
