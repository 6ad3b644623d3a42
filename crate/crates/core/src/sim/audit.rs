//! Hindsight audits of a finished trace.

use serde::{Deserialize, Serialize};

use super::{SimulationTrace, BUDGET_TOL};
use crate::assignment::{bid_envelope, vcg_prices, EnvelopePiece};
use crate::error::{ApexError, Result};
use crate::hz::{verify_ce, EquilibriumCertificate};
use crate::regularized::{best_response, regularized_outcome, RegularizerParams};

/// Randomization between two adjacent bid levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidMixture {
    pub low: f64,
    pub high: f64,
    /// Probability of bidding `low` in a round.
    pub weight_low: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub player: usize,
    pub budget: f64,
    pub realized_utility: f64,
    pub realized_spend: f64,
    pub best_response_lambda: f64,
    /// Set when the best play mixes two bid levels (exact backend only).
    pub mixture: Option<BidMixture>,
    pub best_response_utility: f64,
    pub best_response_spend: f64,
    pub strong_regret: f64,
    /// `strong_regret / T`.
    pub normalized: f64,
    /// The best response is only a lower bound on the best feasible
    /// sequence of bids (exact backend).
    pub certified_lower_bound: bool,
}

/// Best constant (or two-level mixed) bid in hindsight against the recorded
/// opponent bids, spending at most `budget` (default: the player's budget).
pub fn audit_strong_regret(
    trace: &SimulationTrace,
    i: usize,
    budget: Option<f64>,
) -> Result<RegretReport> {
    trace.validate()?;
    let n = trace.n();
    if i >= n {
        return Err(ApexError::OutOfRange {
            what: "player",
            index: i,
            len: n,
        });
    }
    let budget = budget.unwrap_or(trace.config.budgets[i]);
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(ApexError::InvalidParameter(format!(
            "budget must be > 0, got {budget}"
        )));
    }
    let best = match trace.config.regularizer()? {
        None => exact_best(trace, i, budget)?,
        Some(p) => regularized_best(trace, i, budget, &p)?,
    };
    let realized_utility = trace.total_utility(i);
    let strong_regret = best.utility - realized_utility;
    Ok(RegretReport {
        player: i,
        budget,
        realized_utility,
        realized_spend: trace.total_charges(i),
        best_response_lambda: best.lambda,
        mixture: best.mixture,
        best_response_utility: best.utility,
        best_response_spend: best.spend,
        strong_regret,
        normalized: strong_regret / trace.rounds.len() as f64,
        certified_lower_bound: best.lower_bound,
    })
}

struct Best {
    lambda: f64,
    mixture: Option<BidMixture>,
    utility: f64,
    spend: f64,
    lower_bound: bool,
}

/// Distinct opponent profiles (player `i`'s own bid zeroed) with counts.
fn opponent_groups(trace: &SimulationTrace, i: usize) -> Vec<(Vec<f64>, usize)> {
    let mut groups: Vec<(Vec<f64>, usize)> = Vec::new();
    for r in &trace.rounds {
        let mut profile = r.bids.clone();
        profile[i] = 0.0;
        match groups.iter_mut().find(|g| g.0 == profile) {
            Some(g) => g.1 += 1,
            None => groups.push((profile, 1)),
        }
    }
    groups
}

/// Exact backend. Per round, the player's charge and utility are step
/// functions of its bid; summed over rounds they give increasing levels of
/// (spend, utility) on the open intervals between breakpoints.
fn exact_best(trace: &SimulationTrace, i: usize, budget: f64) -> Result<Best> {
    let cap = trace.config.lambda_cap();
    let u = &trace.config.u;
    let groups = opponent_groups(trace, i);
    let envelopes: Vec<(Vec<EnvelopePiece>, usize)> = groups
        .iter()
        .map(|(profile, count)| Ok((bid_envelope(u, profile, i, 0.0, cap)?, *count)))
        .collect::<Result<_>>()?;

    let mut cuts: Vec<f64> = vec![0.0, cap];
    for (pieces, _) in &envelopes {
        cuts.extend(pieces.iter().map(|p| p.end));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // (bid, spend, utility) on each open interval.
    let mut levels: Vec<(f64, f64, f64)> = Vec::new();
    for w in cuts.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let (mut spend, mut utility) = (0.0, 0.0);
        for (pieces, count) in &envelopes {
            let k = pieces
                .partition_point(|p| p.end < mid)
                .min(pieces.len() - 1);
            let c = *count as f64;
            spend += c * (pieces[0].intercept - pieces[k].intercept).max(0.0);
            utility += c * pieces[k].slope;
        }
        levels.push((mid, spend, utility));
    }
    if levels.is_empty() {
        // cap == 0: bidding zero is the only option.
        return Ok(Best {
            lambda: 0.0,
            mixture: None,
            utility: 0.0,
            spend: 0.0,
            lower_bound: true,
        });
    }

    let affordable = levels.partition_point(|l| l.1 <= budget + BUDGET_TOL);
    let low = levels[affordable.saturating_sub(1)];
    if affordable == 0 {
        // Even the lowest bids overspend; only a zero bid in every round fits.
        return Ok(Best {
            lambda: 0.0,
            mixture: None,
            utility: 0.0,
            spend: 0.0,
            lower_bound: true,
        });
    }
    let mut best = Best {
        lambda: low.0,
        mixture: None,
        utility: low.2,
        spend: low.1,
        lower_bound: true,
    };
    if let Some(&high) = levels.get(affordable) {
        let mu = (high.1 - budget) / (high.1 - low.1);
        let utility = mu * low.2 + (1.0 - mu) * high.2;
        if mu < 1.0 && utility > best.utility {
            best.mixture = Some(BidMixture {
                low: low.0,
                high: high.0,
                weight_low: mu,
            });
            best.utility = utility;
            best.spend = mu * low.1 + (1.0 - mu) * high.1;
        }
    }
    Ok(best)
}

fn regularized_best(
    trace: &SimulationTrace,
    i: usize,
    budget: f64,
    params: &RegularizerParams,
) -> Result<Best> {
    let u = &trace.config.u;
    let lambda = best_response(&trace.bid_profiles(), u, i, params, budget)?;
    let (mut utility, mut spend) = (0.0, 0.0);
    for (mut profile, count) in opponent_groups(trace, i) {
        profile[i] = lambda;
        let (opt, pay) = regularized_outcome(u, &profile, params, None)?;
        let c = count as f64;
        utility += c
            * (0..u.n())
                .map(|j| u.get(i, j) * opt.x.get(i, j))
                .sum::<f64>();
        spend += c * pay[i];
    }
    Ok(Best {
        lambda,
        mixture: None,
        utility,
        spend,
        lower_bound: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Each player's best-response bid against the recorded profiles.
    pub lambda: Vec<f64>,
    /// `(1 - delta/3)` times the VCG prices at `lambda`.
    pub prices: Vec<f64>,
    /// `(1/T) sum_t sum_i |lambda_it - lambda_i|`.
    pub concentration: f64,
    pub certificate: EquilibriumCertificate,
}

/// Reads an approximate HZ equilibrium off a regularized trace: the
/// time-averaged allocation, priced at the VCG prices of the players'
/// hindsight best responses, with per-round budgets `B_i / T`.
pub fn aggregate_and_verify(trace: &SimulationTrace, delta: f64) -> Result<AggregateReport> {
    trace.validate()?;
    let params = trace.config.regularizer()?.ok_or_else(|| {
        ApexError::Unsupported(
            "aggregate verification needs a regularized trace: with exact VCG rounds a \
             zero-regret run can average to an allocation that no prices support \
             (see the two-player oscillation scenario)"
                .into(),
        )
    })?;
    if !(delta > 0.0 && delta < 3.0) {
        return Err(ApexError::InvalidParameter(format!(
            "delta must be in (0, 3), got {delta}"
        )));
    }
    let n = trace.n();
    let u = &trace.config.u;
    let t_total = trace.rounds.len() as f64;
    let profiles = trace.bid_profiles();
    let lambda = (0..n)
        .map(|i| best_response(&profiles, u, i, &params, trace.config.budgets[i]))
        .collect::<Result<Vec<f64>>>()?;
    let vcg = vcg_prices(u, Some(&lambda))?;
    let prices: Vec<f64> = vcg.0.iter().map(|c| (1.0 - delta / 3.0) * c).collect();
    let x = trace.aggregate.allocation(n)?;
    let budgets: Vec<f64> = trace.config.budgets.iter().map(|b| b / t_total).collect();
    let certificate = verify_ce(u, None, &x, &prices, Some(&budgets), delta)?;
    let concentration = profiles
        .iter()
        .map(|p| {
            p.iter()
                .zip(&lambda)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / t_total;
    Ok(AggregateReport {
        lambda,
        prices,
        concentration,
        certificate,
    })
}
