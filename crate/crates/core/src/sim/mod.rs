//! The repeated token auction: each round players bid, the backend picks an
//! allocation and charges each player the welfare loss it imposes on the
//! others, and spending is capped by a per-player token budget.

mod audit;
mod strategy;
mod trace;

use serde::{Deserialize, Serialize};

use crate::assignment::{check_len, vcg_outcome, FractionalAllocation, UtilityMatrix};
use crate::error::{ApexError, Result};
use crate::hz::lambda_max;
use crate::regularized::{regularized_outcome, RegularizerParams};

pub use audit::{
    aggregate_and_verify, audit_strong_regret, AggregateReport, BidMixture, RegretReport,
};
pub use strategy::{BwkPacer, Constant, Replay, Strategy, StrategySpec};
pub use trace::{read_trace, write_trace, TraceRecord};

/// Slack allowed when comparing a charge with the remaining budget.
pub const BUDGET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    /// Unit-demand VCG with lexicographic tie-breaking.
    ExactVcg,
    /// The `-beta/x` regularized mechanism; `beta` defaults to
    /// `lambda_bar^-3 n^-4`.
    Regularized {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub u: UtilityMatrix,
    pub rounds: usize,
    pub budgets: Vec<f64>,
    pub backend: Backend,
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub seed: u64,
    /// Largest admissible bid. Defaults to `lambda_max(u)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_bar: Option<f64>,
}

impl ScenarioConfig {
    pub fn n(&self) -> usize {
        self.u.n()
    }

    pub fn lambda_cap(&self) -> f64 {
        self.lambda_bar.unwrap_or_else(|| lambda_max(&self.u).value)
    }

    pub fn regularizer(&self) -> Result<Option<RegularizerParams>> {
        match self.backend {
            Backend::ExactVcg => Ok(None),
            Backend::Regularized { beta: Some(beta) } => {
                RegularizerParams::new(beta, self.lambda_cap()).map(Some)
            }
            Backend::Regularized { beta: None } => {
                RegularizerParams::canonical(self.n(), self.lambda_cap()).map(Some)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.rounds == 0 {
            return Err(ApexError::InvalidParameter("rounds must be >= 1".into()));
        }
        check_len("budgets", n, self.budgets.len())?;
        check_len("strategies", n, self.strategies.len())?;
        if let Some(i) = self
            .budgets
            .iter()
            .position(|b| !(*b > 0.0 && b.is_finite()))
        {
            return Err(ApexError::InvalidParameter(format!(
                "budget of player {i} must be > 0, got {}",
                self.budgets[i]
            )));
        }
        let cap = self.lambda_cap();
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(ApexError::InvalidParameter(format!(
                "lambda_bar must be > 0, got {cap}"
            )));
        }
        if self.regularizer()?.is_some() {
            self.u.check_normalized()?;
        }
        for (i, s) in self.strategies.iter().enumerate() {
            s.validate(i, cap)?;
            if *s == StrategySpec::BestResponse && self.regularizer()?.is_none() {
                return Err(ApexError::Unsupported(format!(
                    "player {i}: best-response bidding needs the regularized backend"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub bids: Vec<f64>,
    /// Row-major `n x n`.
    pub allocation: Vec<f64>,
    pub charges: Vec<f64>,
    /// Raw utilities `sum_j u_ij x_ij`.
    pub utilities: Vec<f64>,
    pub budget_remaining: Vec<f64>,
    /// Bid replaced by 0 because the charge would have overdrawn the budget.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Time-averaged allocation, row-major.
    pub mean_allocation: Vec<f64>,
    pub mean_payments: Vec<f64>,
    pub mean_utilities: Vec<f64>,
}

impl Aggregate {
    fn of(n: usize, rounds: &[RoundRecord]) -> Self {
        let t = rounds.len() as f64;
        let mut agg = Aggregate {
            mean_allocation: vec![0.0; n * n],
            mean_payments: vec![0.0; n],
            mean_utilities: vec![0.0; n],
        };
        for r in rounds {
            add(&mut agg.mean_allocation, &r.allocation);
            add(&mut agg.mean_payments, &r.charges);
            add(&mut agg.mean_utilities, &r.utilities);
        }
        for v in agg
            .mean_allocation
            .iter_mut()
            .chain(&mut agg.mean_payments)
            .chain(&mut agg.mean_utilities)
        {
            *v /= t;
        }
        agg
    }

    pub fn allocation(&self, n: usize) -> Result<FractionalAllocation> {
        FractionalAllocation::from_matrix(n, self.mean_allocation.clone())
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub config: ScenarioConfig,
    pub rounds: Vec<RoundRecord>,
    pub aggregate: Aggregate,
}

impl SimulationTrace {
    pub fn n(&self) -> usize {
        self.config.n()
    }

    /// Bid profiles of every round.
    pub fn bid_profiles(&self) -> Vec<Vec<f64>> {
        self.rounds.iter().map(|r| r.bids.clone()).collect()
    }

    pub fn total_charges(&self, i: usize) -> f64 {
        self.rounds.iter().map(|r| r.charges[i]).sum()
    }

    pub fn total_utility(&self, i: usize) -> f64 {
        self.rounds.iter().map(|r| r.utilities[i]).sum()
    }

    /// Checks shapes and the round invariants.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.n();
        for (k, r) in self.rounds.iter().enumerate() {
            let bad = |m: String| Err(ApexError::Inconsistent(format!("round {k}: {m}")));
            if r.t != k {
                return bad(format!("round index {}", r.t));
            }
            for (what, len) in [
                ("bids", r.bids.len()),
                ("charges", r.charges.len()),
                ("utilities", r.utilities.len()),
                ("budget_remaining", r.budget_remaining.len()),
                ("clamped", r.clamped.len()),
            ] {
                check_len(what, n, len)?;
            }
            check_len("allocation", n * n, r.allocation.len())?;
            if r.budget_remaining.iter().any(|b| *b < 0.0) {
                return bad("negative remaining budget".into());
            }
            if r.charges.iter().any(|c| *c < -BUDGET_TOL) {
                return bad("negative charge".into());
            }
        }
        if self.rounds.len() != self.config.rounds {
            return Err(ApexError::Inconsistent(format!(
                "trace has {} rounds, config says {}",
                self.rounds.len(),
                self.config.rounds
            )));
        }
        Ok(())
    }
}

/// Allocation, charges and utilities of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub allocation: Vec<f64>,
    pub charges: Vec<f64>,
    pub utilities: Vec<f64>,
}

/// Runs one round of the mechanism. Utilities are measured with `truth`,
/// which may differ from the reported `u`.
fn play_round(
    u: &UtilityMatrix,
    truth: &UtilityMatrix,
    bids: &[f64],
    params: Option<&RegularizerParams>,
) -> Result<RoundOutcome> {
    let n = u.n();
    let (allocation, charges) = match params {
        None => {
            let out = vcg_outcome(u, Some(bids))?;
            let x = FractionalAllocation::from_permutation(&out.assignment.pi);
            (x.as_slice().to_vec(), out.payments)
        }
        // Cold start every round so that any round can be replayed bit for bit.
        Some(p) => {
            let (opt, pay) = regularized_outcome(u, bids, p, None)?;
            (opt.x.as_slice().to_vec(), pay)
        }
    };
    let utilities = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| truth.get(i, j) * allocation[i * n + j])
                .sum()
        })
        .collect();
    Ok(RoundOutcome {
        allocation,
        charges,
        utilities,
    })
}

pub fn run_simulation(config: &ScenarioConfig) -> Result<SimulationTrace> {
    config.validate()?;
    let n = config.n();
    let t_total = config.rounds;
    let cap = config.lambda_cap();
    let params = config.regularizer()?;
    let mut players = strategy::build(config, params.as_ref())?;

    let mut remaining = config.budgets.clone();
    let mut rounds = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let mut bids: Vec<f64> = players
            .iter_mut()
            .map(|s| s.bid(t).clamp(0.0, cap))
            .collect();
        let mut clamped = vec![false; n];
        let outcome = loop {
            let out = play_round(&config.u, &config.u, &bids, params.as_ref())?;
            let over: Vec<usize> = (0..n)
                .filter(|&i| bids[i] > 0.0 && out.charges[i] > remaining[i] + BUDGET_TOL)
                .collect();
            if over.is_empty() {
                break out;
            }
            for i in over {
                bids[i] = 0.0;
                clamped[i] = true;
            }
        };
        for i in 0..n {
            remaining[i] = (remaining[i] - outcome.charges[i]).max(0.0);
            players[i].observe(t, outcome.charges[i], outcome.utilities[i]);
        }
        rounds.push(RoundRecord {
            t,
            bids,
            allocation: outcome.allocation,
            charges: outcome.charges,
            utilities: outcome.utilities,
            budget_remaining: remaining.clone(),
            clamped,
        });
    }
    let aggregate = Aggregate::of(n, &rounds);
    Ok(SimulationTrace {
        config: config.clone(),
        rounds,
        aggregate,
    })
}

/// Round `t` replayed with player `i` bidding `bid` and, optionally,
/// reporting `row` instead of its true utilities. Opponent bids are the
/// recorded ones; the returned utilities use the true matrix.
pub fn counterfactual_round(
    trace: &SimulationTrace,
    t: usize,
    i: usize,
    bid: f64,
    row: Option<&[f64]>,
) -> Result<RoundOutcome> {
    let n = trace.n();
    let record = trace.rounds.get(t).ok_or(ApexError::OutOfRange {
        what: "round",
        index: t,
        len: trace.rounds.len(),
    })?;
    if i >= n {
        return Err(ApexError::OutOfRange {
            what: "player",
            index: i,
            len: n,
        });
    }
    let cap = trace.config.lambda_cap();
    if !(0.0..=cap).contains(&bid) {
        return Err(ApexError::InvalidWeight {
            index: i,
            value: bid,
        });
    }
    let truth = &trace.config.u;
    let reported = match row {
        Some(r) => truth.with_row(i, r)?,
        None => truth.clone(),
    };
    let mut bids = record.bids.clone();
    bids[i] = bid;
    play_round(
        &reported,
        truth,
        &bids,
        trace.config.regularizer()?.as_ref(),
    )
}

#[cfg(test)]
mod tests;
