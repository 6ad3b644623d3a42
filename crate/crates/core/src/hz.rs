//! Hylland–Zeckhauser equilibria.
//!
//! Bids `lambda` are adjusted until every player's expected VCG payment is
//! one token; expectations are over bids jittered uniformly in
//! `[lambda_i, lambda_i + eps]`. The expected allocation and expected VCG
//! prices at the fixed point form an approximate HZ equilibrium.
//!
//! The estimator integrates each player's own jitter exactly along the
//! piecewise-linear welfare envelope and samples only the opponents'
//! jitter. Sampled payments then vary continuously with `lambda`, which is
//! what lets the fixed-point search reach small residuals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    self, bid_envelope, birkhoff_decompose, check_len, vcg_prices, FractionalAllocation,
    PriceVector, UtilityMatrix,
};
use crate::error::{ApexError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaMax {
    pub value: f64,
    /// No row has two distinct entries; every allocation is equivalent.
    pub degenerate: bool,
}

/// `1 + n / g` where `g` is the smallest gap between two distinct entries
/// of the same row.
pub fn lambda_max(u: &UtilityMatrix) -> LambdaMax {
    let n = u.n();
    let mut gap = f64::INFINITY;
    for i in 0..n {
        let mut row = u.row(i).to_vec();
        row.sort_by(f64::total_cmp);
        for w in row.windows(2) {
            let d = w[1] - w[0];
            if d > 0.0 {
                gap = gap.min(d);
            }
        }
    }
    if gap.is_finite() {
        LambdaMax {
            value: 1.0 + n as f64 / gap,
            degenerate: false,
        }
    } else {
        LambdaMax {
            value: 1.0,
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedEvaluation {
    /// Expected VCG payment of each player.
    pub phi: Vec<f64>,
    pub x_eps: FractionalAllocation,
    pub c_eps: PriceVector,
    pub samples: usize,
    pub seed: u64,
}

fn check_smoothing(u: &UtilityMatrix, lambda: &[f64], eps: f64, samples: usize) -> Result<()> {
    check_len("bids", u.n(), lambda.len())?;
    if let Some(index) = lambda.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ApexError::InvalidWeight {
            index,
            value: lambda[index],
        });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ApexError::InvalidParameter(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    if samples == 0 {
        return Err(ApexError::InvalidParameter("samples must be >= 1".into()));
    }
    Ok(())
}

/// Jitter vector of sample `k`: samples come in antithetic pairs `(U, 1 - U)`.
fn jitter(seed: u64, k: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((k / 2) as u64);
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    if k % 2 == 1 {
        v.into_iter().map(|x| 1.0 - x).collect()
    } else {
        v
    }
}

struct SampleOut {
    phi: Vec<f64>,
    x: Vec<f64>,
    c: Vec<f64>,
}

fn sample(
    u: &UtilityMatrix,
    lambda: &[f64],
    eps: f64,
    seed: u64,
    k: usize,
    full: bool,
) -> Result<SampleOut> {
    let n = u.n();
    let z = jitter(seed, k, n);
    let bids: Vec<f64> = lambda.iter().zip(&z).map(|(l, z)| l + eps * z).collect();
    let mut phi = vec![0.0; n];
    let mut x = if full { vec![0.0; n * n] } else { Vec::new() };
    for i in 0..n {
        let mut others = bids.clone();
        others[i] = 0.0;
        let (without_i, _) = assignment::optimum(&u.weighted(&others), n);
        let pieces = bid_envelope(u, &others, i, lambda[i], lambda[i] + eps)?;
        for p in &pieces {
            let share = (p.end - p.start) / eps;
            phi[i] += share * (without_i - p.intercept).max(0.0);
            if full {
                for (r, &c) in p.pi.iter().enumerate() {
                    x[r * n + c] += share / n as f64;
                }
            }
        }
    }
    let c = if full {
        let w = u.weighted(&bids);
        let (opt, _) = assignment::optimum(&w, n);
        assignment::prices_of_weighted(&w, n, opt)
    } else {
        Vec::new()
    };
    Ok(SampleOut { phi, x, c })
}

fn smoothed(
    u: &UtilityMatrix,
    lambda: &[f64],
    eps: f64,
    samples: usize,
    seed: u64,
    full: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = u.n();
    let outs: Vec<SampleOut> = (0..samples)
        .into_par_iter()
        .map(|k| sample(u, lambda, eps, seed, k, full))
        .collect::<Result<_>>()?;
    // Summed in sample order so the result does not depend on scheduling.
    let mut phi = vec![0.0; n];
    let mut x = vec![0.0; if full { n * n } else { 0 }];
    let mut c = vec![0.0; if full { n } else { 0 }];
    for o in &outs {
        phi.iter_mut().zip(&o.phi).for_each(|(a, b)| *a += b);
        x.iter_mut().zip(&o.x).for_each(|(a, b)| *a += b);
        c.iter_mut().zip(&o.c).for_each(|(a, b)| *a += b);
    }
    let s = samples as f64;
    for v in phi.iter_mut().chain(x.iter_mut()).chain(c.iter_mut()) {
        *v /= s;
    }
    Ok((phi, x, c))
}

/// Expected VCG payments, allocation and prices over the `eps`-box above
/// `lambda`, from `samples` draws keyed by `(seed, sample index)`.
pub fn expected_vcg_payments(
    u: &UtilityMatrix,
    lambda: &[f64],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<SmoothedEvaluation> {
    check_smoothing(u, lambda, eps, samples)?;
    let (phi, x, c) = smoothed(u, lambda, eps, samples, seed, true)?;
    Ok(SmoothedEvaluation {
        phi,
        x_eps: FractionalAllocation::from_matrix(u.n(), x)?,
        c_eps: PriceVector(c),
        samples,
        seed,
    })
}

fn psi_from(lambda: &[f64], phi: &[f64], lambda_bar: f64) -> Vec<f64> {
    lambda
        .iter()
        .zip(phi)
        .map(|(l, p)| (l + (1.0 - p)).clamp(0.0, lambda_bar))
        .collect()
}

/// `clamp(lambda_i + 1 - phi_i, 0, lambda_bar)`.
pub fn psi_step(
    u: &UtilityMatrix,
    lambda: &[f64],
    eps: f64,
    lambda_bar: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_smoothing(u, lambda, eps, samples)?;
    if !(lambda_bar > 0.0) {
        return Err(ApexError::InvalidParameter(format!(
            "lambda_bar must be > 0, got {lambda_bar}"
        )));
    }
    let (phi, _, _) = smoothed(u, lambda, eps, samples, seed, false)?;
    Ok(psi_from(lambda, &phi, lambda_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointMethod {
    /// `lambda <- (1 - alpha) lambda + alpha Psi(lambda)` only.
    Damped,
    /// Semismooth Newton on `Psi(lambda) - lambda`, falling back to a damped
    /// step when Newton makes no progress.
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HzOptions {
    pub eps: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
    pub seed: u64,
    pub method: FixedPointMethod,
    /// Bid cap; `lambda_max(u)` when absent.
    pub lambda_bar: Option<f64>,
    /// Start point; all ones (capped) when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for HzOptions {
    fn default() -> Self {
        Self {
            eps: 0.01,
            alpha: 0.3,
            tol: 1e-3,
            max_iter: 5000,
            samples: 512,
            seed: 0,
            method: FixedPointMethod::Newton,
            lambda_bar: None,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HzSolution {
    pub lambda_star: Vec<f64>,
    pub lambda_bar: f64,
    pub allocation: FractionalAllocation,
    pub prices: PriceVector,
    /// Expected payments at `lambda_star`.
    pub phi: Vec<f64>,
    /// `max_i |Psi(lambda*)_i - lambda*_i|`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Searches for `lambda` with `Psi(lambda) = lambda`. Non-convergence is
/// reported in the result, never as an error.
pub fn find_hz_equilibrium(u: &UtilityMatrix, opts: &HzOptions) -> Result<HzSolution> {
    let n = u.n();
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(ApexError::InvalidParameter(format!(
            "alpha must be in (0, 1], got {}",
            opts.alpha
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(ApexError::InvalidParameter(format!(
            "tol must be > 0, got {}",
            opts.tol
        )));
    }
    let cap = match opts.lambda_bar {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => {
            return Err(ApexError::InvalidParameter(format!(
                "lambda_bar must be > 0, got {v}"
            )))
        }
        None => lambda_max(u).value,
    };
    let mut lambda = match &opts.start {
        Some(s) => {
            check_len("start", n, s.len())?;
            s.iter().map(|v| v.clamp(0.0, cap)).collect()
        }
        None => vec![1.0f64.min(cap); n],
    };
    check_smoothing(u, &lambda, opts.eps, opts.samples)?;

    let phi_at = |l: &[f64]| -> Result<Vec<f64>> {
        Ok(smoothed(u, l, opts.eps, opts.samples, opts.seed, false)?.0)
    };
    let residual_of = |l: &[f64], phi: &[f64]| -> Vec<f64> {
        psi_from(l, phi, cap)
            .iter()
            .zip(l)
            .map(|(p, l)| p - l)
            .collect()
    };

    let mut phi = phi_at(&lambda)?;
    let mut r = residual_of(&lambda, &phi);
    let mut iterations = 0;
    let mut mu = 1e-6;
    while sup_norm(&r) >= opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let newton = match opts.method {
            FixedPointMethod::Newton => {
                newton_step(&lambda, &phi, &r, cap, &mut mu, &phi_at, &residual_of)?
            }
            FixedPointMethod::Damped => None,
        };
        let (next, next_phi, next_r) = match newton {
            Some(step) => step,
            None => {
                let l: Vec<f64> = lambda
                    .iter()
                    .zip(&r)
                    .map(|(l, r)| l + opts.alpha * r)
                    .collect();
                let p = phi_at(&l)?;
                let rr = residual_of(&l, &p);
                (l, p, rr)
            }
        };
        lambda = next;
        phi = next_phi;
        r = next_r;
    }

    let residual = sup_norm(&r);
    let eval = expected_vcg_payments(u, &lambda, opts.eps, opts.samples, opts.seed)?;
    Ok(HzSolution {
        lambda_star: lambda,
        lambda_bar: cap,
        allocation: eval.x_eps,
        prices: eval.c_eps,
        phi: eval.phi,
        residual,
        iterations,
        converged: residual < opts.tol,
    })
}

type Step = (Vec<f64>, Vec<f64>, Vec<f64>);

/// One Levenberg–Marquardt-damped semismooth Newton step on the natural
/// residual `r = clamp(lambda + 1 - phi) - lambda`. `None` if no decrease.
fn newton_step(
    lambda: &[f64],
    phi: &[f64],
    r: &[f64],
    cap: f64,
    mu: &mut f64,
    phi_at: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    residual_of: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<Option<Step>> {
    let n = lambda.len();
    // Forward differences of phi; phi is defined beyond the cap as well.
    let mut jphi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let h = 1e-6 * lambda[k].max(1.0);
        let mut l = lambda.to_vec();
        l[k] += h;
        let p = phi_at(&l)?;
        for i in 0..n {
            jphi[(i, k)] = (p[i] - phi[i]) / h;
        }
    }
    let mut jr = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let raw = lambda[i] + 1.0 - phi[i];
        if raw > 0.0 && raw < cap {
            for k in 0..n {
                jr[(i, k)] = -jphi[(i, k)];
            }
        } else {
            jr[(i, i)] = -1.0;
        }
    }
    let rv = DVector::from_column_slice(r);
    let base = two_norm(r);
    let try_step = |delta: &DVector<f64>| -> Result<Option<Step>> {
        let next: Vec<f64> = (0..n)
            .map(|k| (lambda[k] + delta[k]).clamp(0.0, cap))
            .collect();
        let p = phi_at(&next)?;
        let rr = residual_of(&next, &p);
        Ok((two_norm(&rr) < (1.0 - 1e-4) * base).then_some((next, p, rr)))
    };
    // Plain Newton first; it is exact on clamped coordinates.
    if let Some(delta) = jr.clone().lu().solve(&(-&rv)) {
        if let Some(step) = try_step(&delta)? {
            return Ok(Some(step));
        }
    }
    let jtj = jr.transpose() * &jr;
    let jtr = jr.transpose() * &rv;
    let scale = (0..n).map(|k| jtj[(k, k)]).fold(0.0, f64::max).max(1e-12);
    for _ in 0..6 {
        let mut m = jtj.clone();
        for k in 0..n {
            m[(k, k)] += *mu * scale;
        }
        let Some(delta) = m.lu().solve(&(-&jtr)) else {
            *mu *= 10.0;
            continue;
        };
        if let Some(step) = try_step(&delta)? {
            *mu = (*mu / 10.0).max(1e-12);
            return Ok(Some(step));
        }
        *mu *= 10.0;
    }
    *mu = 1e-6;
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    /// Probability on each item.
    pub y: Vec<f64>,
    pub value: f64,
}

/// Best unit bundle `y` (probabilities summing to 1) with `C . y <= budget`.
///
/// An optimum with at most two items always exists, so singletons and
/// budget-binding pairs are enumerated; ties go to the lexicographically
/// smallest support.
pub fn best_affordable_bundle(u_row: &[f64], prices: &[f64], budget: f64) -> Result<Bundle> {
    let n = u_row.len();
    check_len("prices", n, prices.len())?;
    if !(budget > 0.0) {
        return Err(ApexError::InvalidParameter(format!(
            "budget must be > 0, got {budget}"
        )));
    }
    if let Some(j) = prices.iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(ApexError::InvalidParameter(format!(
            "price {j} is {}",
            prices[j]
        )));
    }
    let min_price = prices.iter().copied().fold(f64::INFINITY, f64::min);
    if min_price > budget {
        return Err(ApexError::Unaffordable { min_price, budget });
    }
    let tie = 1e-12 * (1.0 + u_row.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut best: Option<Bundle> = None;
    let mut offer = |y: Vec<f64>, value: f64| {
        if best.as_ref().map_or(true, |b| value > b.value + tie) {
            best = Some(Bundle { y, value });
        }
    };
    // Supports in lexicographic order: [j], [j, j+1], ..., [j, n-1], [j+1], ...
    for j in 0..n {
        if prices[j] <= budget {
            let mut y = vec![0.0; n];
            y[j] = 1.0;
            offer(y, u_row[j]);
        }
        for k in j + 1..n {
            if prices[j] == prices[k] {
                continue;
            }
            let yj = (budget - prices[k]) / (prices[j] - prices[k]);
            if (0.0..=1.0).contains(&yj) {
                let mut y = vec![0.0; n];
                y[j] = yj;
                y[k] = 1.0 - yj;
                offer(y, yj * u_row[j] + (1.0 - yj) * u_row[k]);
            }
        }
    }
    Ok(best.expect("an affordable singleton exists"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerCertificate {
    pub budget: f64,
    pub budget_spent: f64,
    /// Best affordable bundle value; `None` if no unit bundle is affordable.
    pub best_bundle_value: Option<f64>,
    pub realized_value: f64,
    /// `best - realized` in the units used by the check (scaled if bids given).
    pub gap: f64,
    /// The same gap measured with raw utilities.
    pub gap_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    pub delta: f64,
    pub players: Vec<PlayerCertificate>,
    /// Largest deviation of `x` from the Birkhoff polytope.
    pub bistochastic_error: f64,
    /// Largest `|C_j - vcg_j|`, when bids were given.
    pub price_error: Option<f64>,
    /// Largest welfare shortfall of a lottery permutation, when bids were given.
    pub support_shortfall: Option<f64>,
    /// Results of checks 1 to 5; `None` when not applicable.
    pub properties: [Option<bool>; 5],
    pub pass: bool,
}

/// Checks `(x, C)` against the HZ conditions at tolerance `delta`.
///
/// 1. `x` bi-stochastic; 4. spend within budget; 5. no affordable bundle
/// better than the realized one. With bids also 2. `C` are the VCG prices
/// and 3. every permutation in a lottery for `x` is welfare-optimal.
pub fn verify_ce(
    u: &UtilityMatrix,
    lambda: Option<&[f64]>,
    x: &FractionalAllocation,
    prices: &[f64],
    budgets: Option<&[f64]>,
    delta: f64,
) -> Result<EquilibriumCertificate> {
    let n = u.n();
    check_len("allocation", n, x.n())?;
    check_len("prices", n, prices.len())?;
    if !(delta >= 0.0) {
        return Err(ApexError::InvalidParameter(format!(
            "delta must be >= 0, got {delta}"
        )));
    }
    let budgets = match budgets {
        Some(b) => {
            check_len("budgets", n, b.len())?;
            if b.iter().any(|v| !(*v > 0.0)) {
                return Err(ApexError::InvalidParameter("budgets must be > 0".into()));
            }
            b.to_vec()
        }
        None => vec![1.0; n],
    };
    if let Some(l) = lambda {
        assignment::resolve_weights(n, Some(l))?;
    }
    let scale = |i: usize| lambda.map_or(1.0, |l| l[i]);

    let bistochastic_error = x.bistochastic_error();
    let mut players = Vec::with_capacity(n);
    for i in 0..n {
        let raw = u.row(i);
        let scaled: Vec<f64> = raw.iter().map(|v| v * scale(i)).collect();
        let spent: f64 = (0..n).map(|j| prices[j] * x.get(i, j)).sum();
        let realized: f64 = (0..n).map(|j| scaled[j] * x.get(i, j)).sum();
        let realized_raw: f64 = (0..n).map(|j| raw[j] * x.get(i, j)).sum();
        let (best, best_raw) = match (
            best_affordable_bundle(&scaled, prices, budgets[i]),
            best_affordable_bundle(raw, prices, budgets[i]),
        ) {
            (Ok(s), Ok(r)) => (Some(s.value), Some(r.value)),
            (Err(ApexError::Unaffordable { .. }), _) | (_, Err(ApexError::Unaffordable { .. })) => {
                (None, None)
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        players.push(PlayerCertificate {
            budget: budgets[i],
            budget_spent: spent,
            best_bundle_value: best,
            realized_value: realized,
            gap: best.map_or(0.0, |b| b - realized),
            gap_raw: best_raw.map_or(0.0, |b| b - realized_raw),
        });
    }

    let p1 = bistochastic_error <= delta;
    let p4 = players.iter().all(|p| p.budget_spent <= p.budget + delta);
    let p5 = players.iter().all(|p| p.gap <= delta);
    let (mut price_error, mut support_shortfall, mut p2, mut p3) = (None, None, None, None);
    if let Some(l) = lambda {
        let vcg = vcg_prices(u, Some(l))?;
        let err = vcg
            .0
            .iter()
            .zip(prices)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        price_error = Some(err);
        p2 = Some(err <= delta);

        let w = u.weighted(l);
        let (opt, _) = assignment::optimum(&w, n);
        let shortfall = match birkhoff_decompose(x) {
            Ok(lottery) => lottery
                .terms
                .iter()
                .map(|(_, pi)| opt - (0..n).map(|i| w[i * n + pi[i]]).sum::<f64>())
                .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        support_shortfall = Some(shortfall);
        p3 = Some(shortfall <= delta);
    }
    let properties = [Some(p1), p2, p3, Some(p4), Some(p5)];
    let pass = properties.iter().all(|p| p.unwrap_or(true));
    Ok(EquilibriumCertificate {
        delta,
        players,
        bistochastic_error,
        price_error,
        support_shortfall,
        properties,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envy {
    pub envious: usize,
    pub envied: usize,
    pub own_value: f64,
    pub other_value: f64,
}

/// Pairs `(i, k)` where `i` strictly prefers `k`'s expected bundle.
pub fn envy_check(u: &UtilityMatrix, x: &FractionalAllocation) -> Vec<Envy> {
    let n = u.n();
    let value = |i: usize, k: usize| -> f64 { (0..n).map(|j| u.get(i, j) * x.get(k, j)).sum() };
    let mut out = Vec::new();
    for i in 0..n {
        let own = value(i, i);
        for k in (0..n).filter(|&k| k != i) {
            let other = value(i, k);
            if other > own + 1e-9 {
                out.push(Envy {
                    envious: i,
                    envied: k,
                    own_value: own,
                    other_value: other,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
