use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ScenarioConfig;
use crate::error::{ApexError, Result};
use crate::regularized::{best_response, total_spend, RegularizerParams};

/// How a player chooses its bid each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategySpec {
    Constant {
        lambda: f64,
    },
    /// Bids `script[t % script.len()]`.
    Replay {
        script: Vec<f64>,
    },
    /// Multiplies the bid by `step` while cumulative spend is below
    /// `target_rate` per round, and divides by it otherwise.
    BwkPacer {
        #[serde(default = "default_initial")]
        initial: f64,
        /// Defaults to `budget / T`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_rate: Option<f64>,
        #[serde(default = "default_step")]
        step: f64,
    },
    /// The constant bid that is a best response to everyone else's planned
    /// bids, solved jointly with the other best responders before the run.
    BestResponse,
}

fn default_initial() -> f64 {
    1.0
}

fn default_step() -> f64 {
    1.05
}

impl StrategySpec {
    pub(crate) fn validate(&self, player: usize, cap: f64) -> Result<()> {
        let in_range = |v: f64| (0.0..=cap).contains(&v);
        let bad = |what: String| {
            Err(ApexError::InvalidParameter(format!(
                "player {player}: {what}"
            )))
        };
        match self {
            StrategySpec::Constant { lambda } if !in_range(*lambda) => {
                bad(format!("constant bid {lambda} outside [0, {cap}]"))
            }
            StrategySpec::Replay { script } if script.is_empty() => {
                bad("empty replay script".into())
            }
            StrategySpec::Replay { script } => match script.iter().find(|v| !in_range(**v)) {
                Some(v) => bad(format!("scripted bid {v} outside [0, {cap}]")),
                None => Ok(()),
            },
            StrategySpec::BwkPacer {
                initial,
                target_rate,
                step,
            } => {
                if !in_range(*initial) {
                    bad(format!("initial bid {initial} outside [0, {cap}]"))
                } else if target_rate.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
                    bad(format!("pacer target rate {target_rate:?} must be > 0"))
                } else if !(*step > 1.0 && step.is_finite()) {
                    bad(format!("pacer step {step} must be > 1"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// A bidding rule. Strategies see only their own charges and utilities.
pub trait Strategy {
    fn bid(&mut self, t: usize) -> f64;
    fn observe(&mut self, _t: usize, _charge: f64, _utility: f64) {}
}

pub struct Constant(pub f64);

impl Strategy for Constant {
    fn bid(&mut self, _t: usize) -> f64 {
        self.0
    }
}

pub struct Replay(pub Vec<f64>);

impl Strategy for Replay {
    fn bid(&mut self, t: usize) -> f64 {
        self.0[t % self.0.len()]
    }
}

pub struct BwkPacer {
    lambda: f64,
    step: f64,
    rate: f64,
    cap: f64,
    spent: f64,
}

impl BwkPacer {
    pub fn new(initial: f64, step: f64, rate: f64, cap: f64) -> Self {
        Self {
            lambda: initial,
            step,
            rate,
            cap,
            spent: 0.0,
        }
    }
}

impl Strategy for BwkPacer {
    fn bid(&mut self, _t: usize) -> f64 {
        self.lambda
    }

    fn observe(&mut self, t: usize, charge: f64, _utility: f64) {
        self.spent += charge;
        if self.spent > self.rate * (t + 1) as f64 {
            self.lambda /= self.step;
        } else {
            self.lambda = (self.lambda * self.step).min(self.cap);
        }
    }
}

/// Relative margin kept below the budget by best responders, so that the
/// tolerance of the joint solve cannot overdraw it.
const RESPONSE_MARGIN: f64 = 1e-8;
/// Spend tolerance of the joint solve, relative to the largest budget.
const RESPONSE_TOL: f64 = 1e-11;
const RESPONSE_MAX_ITER: usize = 100;

pub(crate) fn build(
    config: &ScenarioConfig,
    params: Option<&RegularizerParams>,
) -> Result<Vec<Box<dyn Strategy>>> {
    let cap = config.lambda_cap();
    let rounds = config.rounds as f64;
    let responses = match params {
        Some(p) if config.strategies.contains(&StrategySpec::BestResponse) => {
            Some(joint_best_response(config, p)?)
        }
        _ => None,
    };
    let players = config
        .strategies
        .iter()
        .enumerate()
        .map(|(i, spec)| -> Box<dyn Strategy> {
            match spec {
                StrategySpec::Constant { lambda } => Box::new(Constant(*lambda)),
                StrategySpec::Replay { script } => Box::new(Replay(script.clone())),
                StrategySpec::BwkPacer {
                    initial,
                    target_rate,
                    step,
                } => Box::new(BwkPacer::new(
                    *initial,
                    *step,
                    target_rate.unwrap_or(config.budgets[i] / rounds),
                    cap,
                )),
                StrategySpec::BestResponse => {
                    Box::new(Constant(responses.as_ref().expect("solved above")[i]))
                }
            }
        })
        .collect();
    Ok(players)
}

/// Constant bids at which every best responder spends its whole budget
/// against the others' planned bids, or is capped at `lambda_bar` while
/// underspending. The planned profile repeats with the common period of
/// the replay scripts.
///
/// Best-response sweeps contract far too slowly when several players want
/// the same item, and at small `beta` the spend equations are too stiff for
/// Newton from a cold start. So Newton is run along a path of decreasing
/// `beta`, each level starting from the previous solution.
fn joint_best_response(config: &ScenarioConfig, params: &RegularizerParams) -> Result<Vec<f64>> {
    let n = config.n();
    let cap = params.lambda_bar;
    let mut scripts: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, spec) in config.strategies.iter().enumerate() {
        scripts.push(match spec {
            StrategySpec::Constant { lambda } => vec![*lambda],
            StrategySpec::Replay { script } => script.clone(),
            StrategySpec::BestResponse => vec![1.0f64.min(cap)],
            StrategySpec::BwkPacer { .. } => {
                return Err(ApexError::Unsupported(format!(
                    "player {i}: best responses against an adaptive pacer are not defined"
                )))
            }
        });
    }
    let rounds = config.rounds;
    let period = scripts
        .iter()
        .map(Vec::len)
        .fold(1, |a, b| lcm(a, b).min(rounds));
    let period = if rounds % period == 0 { period } else { rounds };
    let responders: Vec<usize> = (0..n)
        .filter(|&i| config.strategies[i] == StrategySpec::BestResponse)
        .collect();
    let targets: Vec<f64> = responders
        .iter()
        .map(|&i| config.budgets[i] * period as f64 / rounds as f64 * (1.0 - RESPONSE_MARGIN))
        .collect();
    let tol = RESPONSE_TOL * targets.iter().fold(1.0f64, |m, t| m.max(*t));
    let joint = Joint {
        u: &config.u,
        scripts,
        responders,
        targets,
        period,
    };

    let mut level = RegularizerParams {
        beta: params.beta.max(START_BETA),
        ..*params
    };
    let mut bids = joint.sweep(&level)?;
    let mut factor = BETA_FACTOR;
    loop {
        let last = level.beta == params.beta;
        let level_tol = if last { tol } else { tol.max(1e-8) };
        match joint.newton(&bids, &level, level_tol)? {
            Ok(solved) if last => return Ok(joint.full(&solved).iter().map(|s| s[0]).collect()),
            Ok(solved) => {
                bids = solved;
                factor = (factor * 2.0).min(BETA_FACTOR);
                level.beta = (level.beta / factor).max(params.beta);
            }
            Err(residual) => {
                // Retreat halfway (in log beta) towards the last solved level.
                let solved_beta = level.beta * factor;
                factor = factor.sqrt();
                if factor < 1.0 + 1e-3 {
                    return Err(ApexError::NoConvergence {
                        what: "joint best response",
                        residual,
                        iterations: RESPONSE_MAX_ITER,
                    });
                }
                level.beta = (solved_beta / factor).max(params.beta);
            }
        }
    }
}

/// Largest `beta` on the continuation path.
const START_BETA: f64 = 1e-2;
/// Largest ratio between consecutive `beta` levels.
const BETA_FACTOR: f64 = 10.0;

struct Joint<'a> {
    u: &'a crate::assignment::UtilityMatrix,
    scripts: Vec<Vec<f64>>,
    responders: Vec<usize>,
    /// Spend per period.
    targets: Vec<f64>,
    period: usize,
}

impl Joint<'_> {
    fn full(&self, bids: &[f64]) -> Vec<Vec<f64>> {
        let mut s = self.scripts.clone();
        for (k, &i) in self.responders.iter().enumerate() {
            s[i] = vec![bids[k]];
        }
        s
    }

    fn profiles(&self, bids: &[f64]) -> Vec<Vec<f64>> {
        let s = self.full(bids);
        (0..self.period)
            .map(|t| s.iter().map(|s| s[t % s.len()]).collect())
            .collect()
    }

    fn excess(&self, bids: &[f64], params: &RegularizerParams) -> Result<Vec<f64>> {
        let p = self.profiles(bids);
        self.responders
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(k, (&i, target))| Ok(total_spend(&p, self.u, i, params, bids[k])? - target))
            .collect()
    }

    /// Zero exactly at a solution: spend on target, or capped and underspending.
    fn residual(&self, bids: &[f64], g: &[f64], cap: f64) -> Vec<f64> {
        bids.iter()
            .zip(g)
            .map(|(b, g)| if *b >= cap { g.max(0.0) } else { *g })
            .collect()
    }

    /// One Gauss-Seidel sweep of exact best responses from the planned bids.
    fn sweep(&self, params: &RegularizerParams) -> Result<Vec<f64>> {
        let mut bids: Vec<f64> = self
            .responders
            .iter()
            .map(|&i| self.scripts[i][0])
            .collect();
        for (k, &i) in self.responders.iter().enumerate() {
            bids[k] = best_response(&self.profiles(&bids), self.u, i, params, self.targets[k])?;
        }
        Ok(bids)
    }

    /// Projected Newton with a forward-difference Jacobian. The outer error
    /// is the residual left when no step makes progress.
    fn newton(
        &self,
        start: &[f64],
        params: &RegularizerParams,
        tol: f64,
    ) -> Result<std::result::Result<Vec<f64>, f64>> {
        let cap = params.lambda_bar;
        let m = start.len();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut bids = start.to_vec();
        let mut g = self.excess(&bids, params)?;
        let mut r = self.residual(&bids, &g, cap);
        for _ in 0..RESPONSE_MAX_ITER {
            if r.iter().all(|v| v.abs() <= tol) {
                return Ok(Ok(bids));
            }
            let free: Vec<usize> = (0..m)
                .filter(|&k| !(bids[k] >= cap && g[k] <= 0.0))
                .collect();
            let mut jac = DMatrix::zeros(free.len(), free.len());
            for (c, &k) in free.iter().enumerate() {
                let h = 1e-7 * bids[k].max(1.0);
                let h = if bids[k] + h > cap { -h } else { h };
                let mut shifted = bids.clone();
                shifted[k] += h;
                let gs = self.excess(&shifted, params)?;
                for (row, &l) in free.iter().enumerate() {
                    jac[(row, c)] = (gs[l] - g[l]) / h;
                }
            }
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -g[k]));
            let Some(step) = jac.lu().solve(&rhs) else {
                break;
            };
            let current = norm(&r);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = bids.clone();
                for (c, &k) in free.iter().enumerate() {
                    trial[k] = (bids[k] + alpha * step[c]).clamp(0.0, cap);
                }
                let gt = self.excess(&trial, params)?;
                let rt = self.residual(&trial, &gt, cap);
                if norm(&rt) < (1.0 - 1e-4 * alpha) * current {
                    (bids, g, r) = (trial, gt, rt);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r.iter().all(|v| v.abs() <= tol) {
            return Ok(Ok(bids));
        }
        Ok(Err(r.iter().fold(0.0, |a, v| a.max(v.abs()))))
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
