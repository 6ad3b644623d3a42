//! The regularized mechanism: maximize `sum lambda_i u_ij x_ij - beta sum 1/x_ij`
//! over bi-stochastic `x`, charge each player the welfare loss it causes
//! the others, and let players pick the constant bid that exhausts their
//! budget.
//!
//! The solver works on the dual. With slack `d_ij = a_i + b_j - lambda_i u_ij`
//! stationarity gives `x_ij = sqrt(beta / d_ij)`. The slack matrix is stored
//! and updated directly: at `beta ~ 1e-6` the slacks of large entries are
//! far below the rounding error of `a_i + b_j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::{check_len, FractionalAllocation, UtilityMatrix};
use crate::error::{ApexError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerParams {
    pub beta: f64,
    pub lambda_bar: f64,
}

impl RegularizerParams {
    pub fn new(beta: f64, lambda_bar: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(ApexError::InvalidParameter(format!(
                "beta must be > 0, got {beta}"
            )));
        }
        if !(lambda_bar > 1.0 && lambda_bar.is_finite()) {
            return Err(ApexError::InvalidParameter(format!(
                "lambda_bar must be > 1, got {lambda_bar}"
            )));
        }
        Ok(Self { beta, lambda_bar })
    }

    /// `beta = lambda_bar^-3 n^-4`.
    pub fn canonical(n: usize, lambda_bar: f64) -> Result<Self> {
        Self::new(lambda_bar.powi(-3) / (n as f64).powi(4), lambda_bar)
    }

    /// `M = lambda_bar^(1/2) beta^(-1/2) / n`, the choice that makes
    /// `eta <= 2 lambda_bar^(1/2) n^2 beta^(1/2)` when all bids are at most `lambda_bar`.
    pub fn default_m(&self, n: usize) -> f64 {
        (self.lambda_bar / self.beta).sqrt() / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target for the largest row/column sum violation.
    pub tol: f64,
    /// Cap on sweeps plus Newton steps.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedOptimum {
    pub x: FractionalAllocation,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `OPT_0`: linear value plus the regularizer.
    pub value_reg: f64,
    /// `sum lambda_i u_ij x_ij`.
    pub value_linear: f64,
    /// Largest row/column sum violation at exit.
    pub residual: f64,
    pub iterations: usize,
}

impl RegularizedOptimum {
    /// `max |lambda_i u_ij + beta / x_ij^2 - a_i - b_j|`.
    pub fn stationarity_residual(&self, u: &UtilityMatrix, lambda: &[f64], beta: f64) -> f64 {
        let n = u.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let x = self.x.get(i, j);
                let r = lambda[i] * u.get(i, j) + beta / (x * x) - self.a[i] - self.b[j];
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaBound {
    pub eta: f64,
    pub m: f64,
}

/// `eta = sum lambda / M + beta n^3 M`, the regularization loss bound for a
/// given `M > 1`.
pub fn eta_bound(lambda: &[f64], n: usize, params: &RegularizerParams, m: f64) -> Result<EtaBound> {
    if !(m > 1.0 && m.is_finite()) {
        return Err(ApexError::InvalidParameter(format!(
            "M must be > 1, got {m}"
        )));
    }
    let total: f64 = lambda.iter().sum();
    Ok(EtaBound {
        eta: total / m + params.beta * (n as f64).powi(3) * m,
        m,
    })
}

/// [`eta_bound`] at the `M > 1` minimizing it.
pub fn eta_bound_min(lambda: &[f64], n: usize, params: &RegularizerParams) -> EtaBound {
    let total: f64 = lambda.iter().sum();
    let m = (total / (params.beta * (n as f64).powi(3))).sqrt();
    let m = if m > 1.0 { m } else { 1.0 + 1e-9 };
    EtaBound {
        eta: total / m + params.beta * (n as f64).powi(3) * m,
        m,
    }
}

fn validate(u: &UtilityMatrix, lambda: &[f64], params: &RegularizerParams) -> Result<()> {
    u.check_normalized()?;
    check_len("bids", u.n(), lambda.len())?;
    for (index, &value) in lambda.iter().enumerate() {
        if !(0.0..=params.lambda_bar).contains(&value) {
            return Err(ApexError::InvalidWeight { index, value });
        }
    }
    Ok(())
}

struct DualState {
    n: usize,
    beta: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
}

impl DualState {
    fn cold(w: &[f64], n: usize, beta: f64) -> Self {
        let shift = beta * (n * n) as f64;
        let mut a = vec![0.0; n];
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            let row = &w[i * n..(i + 1) * n];
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            a[i] = top + shift;
            for j in 0..n {
                d[i * n + j] = (top - row[j]) + shift;
            }
        }
        Self {
            n,
            beta,
            a,
            b: vec![0.0; n],
            d,
        }
    }

    fn warm(w: &[f64], n: usize, beta: f64, a: &[f64], b: &[f64]) -> Option<Self> {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = a[i] + b[j] - w[i * n + j];
                if !(v > 0.0) {
                    return None;
                }
                d[i * n + j] = v;
            }
        }
        Some(Self {
            n,
            beta,
            a: a.to_vec(),
            b: b.to_vec(),
            d,
        })
    }

    fn x(&self, k: usize) -> f64 {
        (self.beta / self.d[k]).sqrt()
    }

    fn residual(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        let mut cols = vec![0.0; n];
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let x = self.x(i * n + j);
                row += x;
                cols[j] += x;
            }
            worst = worst.max((row - 1.0).abs());
        }
        cols.iter().fold(worst, |m, c| m.max((c - 1.0).abs()))
    }

    /// Shift `s` making `sum_k sqrt(beta / (d_k + s)) = 1`.
    fn unit_shift(&self, idx: impl Iterator<Item = usize> + Clone) -> f64 {
        let min = idx.clone().map(|k| self.d[k]).fold(f64::INFINITY, f64::min);
        let sb = self.beta.sqrt();
        // The sum is convex and decreasing in s, so Newton started where the
        // sum is at least 1 climbs monotonically to the root.
        let mut s = self.beta - min;
        for _ in 0..200 {
            let (mut f, mut df) = (0.0, 0.0);
            for k in idx.clone() {
                let z = self.d[k] + s;
                let x = sb / z.sqrt();
                f += x;
                df += 0.5 * x / z;
            }
            let next = s + (f - 1.0) / df;
            if !(next > s) {
                break;
            }
            s = next;
        }
        s
    }

    fn sweep(&mut self) {
        let n = self.n;
        for i in 0..n {
            let s = self.unit_shift((0..n).map(|j| i * n + j));
            self.a[i] += s;
            for j in 0..n {
                self.d[i * n + j] += s;
            }
        }
        for j in 0..n {
            let s = self.unit_shift((0..n).map(|i| i * n + j));
            self.b[j] += s;
            for i in 0..n {
                self.d[i * n + j] += s;
            }
        }
    }

    /// One damped Newton step on the dual `sum a + sum b - 2 sqrt(beta) sum sqrt(d)`.
    /// Returns false if no decrease was found.
    fn newton(&mut self) -> bool {
        let n = self.n;
        if n < 2 {
            return false;
        }
        let m = 2 * n - 1;
        let mut h = DMatrix::<f64>::zeros(m, m);
        let mut g = DVector::<f64>::zeros(m);
        for i in 0..n {
            g[i] = 1.0;
        }
        for j in 0..n - 1 {
            g[n + j] = 1.0;
        }
        for i in 0..n {
            for j in 0..n {
                let x = self.x(i * n + j);
                let k = x * x * x / (2.0 * self.beta);
                g[i] -= x;
                h[(i, i)] += k;
                if j < n - 1 {
                    g[n + j] -= x;
                    h[(n + j, n + j)] += k;
                    h[(i, n + j)] = k;
                    h[(n + j, i)] = k;
                }
            }
        }
        // Jacobi scaling tames the spread of curvatures.
        let scale: Vec<f64> = (0..m).map(|k| 1.0 / h[(k, k)].sqrt()).collect();
        for r in 0..m {
            for c in 0..m {
                h[(r, c)] *= scale[r] * scale[c];
            }
        }
        let rhs = DVector::from_iterator(m, (0..m).map(|k| -g[k] * scale[k]));
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match h.lu().solve(&rhs) {
                Some(s) => s,
                None => return false,
            },
        };
        let delta: Vec<f64> = (0..m).map(|k| step[k] * scale[k]).collect();
        let slope: f64 = (0..m).map(|k| g[k] * delta[k]).sum();
        if !(slope < 0.0) {
            return false;
        }
        let da = &delta[..n];
        let db = |j: usize| if j < n - 1 { delta[n + j] } else { 0.0 };
        let sb = self.beta.sqrt();
        let mut t = 1.0;
        for _ in 0..60 {
            let mut ok = true;
            let mut change = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    let inc = t * (da[i] + db(j));
                    let dn = self.d[k] + inc;
                    if !(dn > 0.0) {
                        ok = false;
                        break;
                    }
                    change -= 2.0 * sb * inc / (dn.sqrt() + self.d[k].sqrt());
                }
                if !ok {
                    break;
                }
            }
            if ok {
                change += t * (da.iter().sum::<f64>() + (0..n).map(db).sum::<f64>());
                if change <= 0.25 * t * slope {
                    for i in 0..n {
                        self.a[i] += t * da[i];
                        for j in 0..n {
                            self.d[i * n + j] += t * (da[i] + db(j));
                        }
                    }
                    for j in 0..n {
                        self.b[j] += t * db(j);
                    }
                    return true;
                }
            }
            t *= 0.5;
        }
        false
    }
}

/// Regularized optimum with default options and a cold start.
pub fn regularized_optimum(
    u: &UtilityMatrix,
    lambda: &[f64],
    params: &RegularizerParams,
) -> Result<RegularizedOptimum> {
    regularized_optimum_with(u, lambda, params, None, &SolverOptions::default())
}

/// Regularized optimum, optionally warm-started from duals `(a, b)` of a
/// nearby problem. Warm duals that violate the domain are ignored.
pub fn regularized_optimum_with(
    u: &UtilityMatrix,
    lambda: &[f64],
    params: &RegularizerParams,
    warm: Option<(&[f64], &[f64])>,
    opts: &SolverOptions,
) -> Result<RegularizedOptimum> {
    validate(u, lambda, params)?;
    solve_unchecked(u, lambda, params.beta, warm, opts)
}

pub(crate) fn solve_unchecked(
    u: &UtilityMatrix,
    lambda: &[f64],
    beta: f64,
    warm: Option<(&[f64], &[f64])>,
    opts: &SolverOptions,
) -> Result<RegularizedOptimum> {
    let n = u.n();
    let w = u.weighted(lambda);
    let mut st = warm
        .filter(|(a, b)| a.len() == n && b.len() == n)
        .and_then(|(a, b)| DualState::warm(&w, n, beta, a, b))
        .unwrap_or_else(|| DualState::cold(&w, n, beta));

    let mut residual = st.residual();
    let mut iterations = 0;
    while residual >= opts.tol {
        if iterations >= opts.max_iter {
            return Err(ApexError::NoConvergence {
                what: "regularized optimum",
                residual,
                iterations,
            });
        }
        iterations += 1;
        // Sweeps globalize; Newton finishes quadratically.
        if !st.newton() {
            st.sweep();
        }
        let next = st.residual();
        if next >= residual {
            st.sweep();
            residual = st.residual();
        } else {
            residual = next;
        }
    }

    let x: Vec<f64> = (0..n * n).map(|k| st.x(k)).collect();
    let value_linear: f64 = w.iter().zip(&x).map(|(w, x)| w * x).sum();
    let penalty: f64 = x.iter().map(|x| beta / x).sum();
    Ok(RegularizedOptimum {
        x: FractionalAllocation::from_matrix(n, x)?,
        a: st.a,
        b: st.b,
        value_reg: value_linear - penalty,
        value_linear,
        residual,
        iterations,
    })
}

fn without(lambda: &[f64], i: usize) -> Vec<f64> {
    let mut l = lambda.to_vec();
    l[i] = 0.0;
    l
}

fn payment_from(
    u: &UtilityMatrix,
    lambda: &[f64],
    opt: &RegularizedOptimum,
    others_opt: f64,
    i: usize,
) -> f64 {
    if lambda[i] == 0.0 {
        return 0.0;
    }
    let own: f64 = (0..u.n()).map(|j| opt.x.get(i, j) * u.get(i, j)).sum();
    others_opt - (opt.value_reg - lambda[i] * own)
}

/// `P_i = OPT_0(lambda^-i) - (OPT_0(lambda) - lambda_i sum_j x_ij u_ij)`.
pub fn regularized_payment(
    u: &UtilityMatrix,
    lambda: &[f64],
    params: &RegularizerParams,
    i: usize,
) -> Result<f64> {
    let n = u.n();
    if i >= n {
        return Err(ApexError::OutOfRange {
            what: "player",
            index: i,
            len: n,
        });
    }
    let opt = regularized_optimum(u, lambda, params)?;
    if lambda[i] == 0.0 {
        return Ok(0.0);
    }
    let opts = SolverOptions::default();
    let others = solve_unchecked(
        u,
        &without(lambda, i),
        params.beta,
        Some((&opt.a, &opt.b)),
        &opts,
    )?;
    Ok(payment_from(u, lambda, &opt, others.value_reg, i))
}

/// Optimum and every player's payment, sharing one solve.
pub fn regularized_outcome(
    u: &UtilityMatrix,
    lambda: &[f64],
    params: &RegularizerParams,
    warm: Option<(&[f64], &[f64])>,
) -> Result<(RegularizedOptimum, Vec<f64>)> {
    let opts = SolverOptions::default();
    let opt = regularized_optimum_with(u, lambda, params, warm, &opts)?;
    let mut pay = Vec::with_capacity(u.n());
    for i in 0..u.n() {
        if lambda[i] == 0.0 {
            pay.push(0.0);
            continue;
        }
        // Lowering a weight only raises the slacks, so these duals stay valid.
        let others = solve_unchecked(
            u,
            &without(lambda, i),
            params.beta,
            Some((&opt.a, &opt.b)),
            &opts,
        )?;
        pay.push(payment_from(u, lambda, &opt, others.value_reg, i));
    }
    Ok((opt, pay))
}

/// Total payment of player `i` bidding `bid` in every round against the
/// recorded opponent profiles (entry `i` of each profile is ignored).
pub fn total_spend(
    rounds: &[Vec<f64>],
    u: &UtilityMatrix,
    i: usize,
    params: &RegularizerParams,
    bid: f64,
) -> Result<f64> {
    SpendCurve::new(rounds, u, i, params)?.spend(bid)
}

/// Spend as a function of a constant bid, with the opponent-only optima
/// cached per distinct opponent profile.
struct SpendCurve<'a> {
    u: &'a UtilityMatrix,
    i: usize,
    params: RegularizerParams,
    /// (opponent profile, multiplicity, OPT_0 without i, warm duals).
    groups: Vec<(
        Vec<f64>,
        usize,
        f64,
        std::cell::RefCell<(Vec<f64>, Vec<f64>)>,
    )>,
}

impl<'a> SpendCurve<'a> {
    fn new(
        rounds: &[Vec<f64>],
        u: &'a UtilityMatrix,
        i: usize,
        params: &RegularizerParams,
    ) -> Result<Self> {
        let n = u.n();
        if rounds.is_empty() {
            return Err(ApexError::InvalidParameter(
                "no rounds of opponent bids".into(),
            ));
        }
        if i >= n {
            return Err(ApexError::OutOfRange {
                what: "player",
                index: i,
                len: n,
            });
        }
        let mut groups: Vec<(Vec<f64>, usize, f64, _)> = Vec::new();
        for r in rounds {
            let profile = without(r, i);
            validate(u, &profile, params)?;
            if let Some(g) = groups.iter_mut().find(|g| g.0 == profile) {
                g.1 += 1;
                continue;
            }
            let opt = solve_unchecked(u, &profile, params.beta, None, &SolverOptions::default())?;
            let cell = std::cell::RefCell::new((opt.a.clone(), opt.b.clone()));
            groups.push((profile, 1, opt.value_reg, cell));
        }
        Ok(Self {
            u,
            i,
            params: *params,
            groups,
        })
    }

    fn spend(&self, bid: f64) -> Result<f64> {
        if bid == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (profile, count, others, warm) in &self.groups {
            let mut lambda = profile.clone();
            lambda[self.i] = bid;
            let (a, b) = warm.borrow().clone();
            let opt = regularized_optimum_with(
                self.u,
                &lambda,
                &self.params,
                Some((&a, &b)),
                &SolverOptions::default(),
            )?;
            total += *count as f64 * payment_from(self.u, &lambda, &opt, *others, self.i);
            *warm.borrow_mut() = (opt.a, opt.b);
        }
        Ok(total)
    }
}

/// Relative tolerance of the bisection on the bid. Spend can be very steep
/// in the bid at small `beta`, so the bracket is shrunk to near machine
/// precision unless the spend is already on budget.
pub const BID_TOL: f64 = 1e-14;

/// The constant bid whose total payment over `rounds` equals `budget`,
/// capped at `lambda_bar`.
///
/// Returns the lower end of the final bisection bracket, so the spend at the
/// returned bid never exceeds the budget.
pub fn best_response(
    rounds: &[Vec<f64>],
    u: &UtilityMatrix,
    i: usize,
    params: &RegularizerParams,
    budget: f64,
) -> Result<f64> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(ApexError::InvalidParameter(format!(
            "budget must be > 0, got {budget}"
        )));
    }
    let curve = SpendCurve::new(rounds, u, i, params)?;
    let cap = params.lambda_bar;
    if curve.spend(cap)? < budget {
        return Ok(cap);
    }
    let (mut lo, mut hi) = (0.0, 1.0f64.min(cap));
    let mut lo_spend = 0.0;
    loop {
        let s = curve.spend(hi)?;
        if hi >= cap || s >= budget {
            break;
        }
        (lo, lo_spend) = (hi, s);
        hi = (2.0 * hi).min(cap);
    }
    while hi - lo > BID_TOL * hi.max(1.0) && budget - lo_spend > 1e-12 * budget {
        let mid = 0.5 * (lo + hi);
        let s = curve.spend(mid)?;
        if s < budget {
            (lo, lo_spend) = (mid, s);
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Second-order approximation of player `i`'s payment:
/// `lambda_i^2 / 4 * g' H^-1 g` with `g = grad f_i` and `H = diag(beta / x^3)`
/// restricted to row/column-sum-preserving directions.
pub fn quadratic_price(
    u: &UtilityMatrix,
    lambda: &[f64],
    params: &RegularizerParams,
    i: usize,
) -> Result<f64> {
    let n = u.n();
    if i >= n {
        return Err(ApexError::OutOfRange {
            what: "player",
            index: i,
            len: n,
        });
    }
    let opt = regularized_optimum(u, lambda, params)?;
    quadratic_form_price(u, &opt.x, params.beta, lambda[i], i)
}

/// [`quadratic_price`] at a given interior allocation.
pub fn quadratic_form_price(
    u: &UtilityMatrix,
    x: &FractionalAllocation,
    beta: f64,
    bid: f64,
    i: usize,
) -> Result<f64> {
    let n = u.n();
    if bid == 0.0 {
        return Ok(0.0);
    }
    // Inverse Hessian entries.
    let hinv: Vec<f64> = x.as_slice().iter().map(|x| x * x * x / beta).collect();
    if hinv.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(ApexError::Singular("allocation is not interior"));
    }
    let g = |r: usize, c: usize| if r == i { u.get(i, c) } else { 0.0 };
    let ghg: f64 = (0..n).map(|j| hinv[i * n + j] * g(i, j) * g(i, j)).sum();
    if n == 1 {
        return Ok(0.0);
    }
    // Constraints: n row sums and the first n - 1 column sums.
    let m = 2 * n - 1;
    let mut s = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for r in 0..n {
        for c in 0..n {
            let h = hinv[r * n + c];
            s[(r, r)] += h;
            rhs[r] += h * g(r, c);
            if c < n - 1 {
                s[(n + c, n + c)] += h;
                s[(r, n + c)] = h;
                s[(n + c, r)] = h;
                rhs[n + c] += h * g(r, c);
            }
        }
    }
    let scale: Vec<f64> = (0..m).map(|k| 1.0 / s[(k, k)].sqrt()).collect();
    for r in 0..m {
        rhs[r] *= scale[r];
        for c in 0..m {
            s[(r, c)] *= scale[r] * scale[c];
        }
    }
    let mu = s
        .cholesky()
        .ok_or(ApexError::Singular("projected Hessian"))?
        .solve(&rhs);
    let correction = rhs.dot(&mu);
    let form = (ghg - correction).max(0.0);
    Ok(bid * bid / 4.0 * form)
}
