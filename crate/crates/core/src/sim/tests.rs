use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::{
    aggregate_and_verify, audit_strong_regret, counterfactual_round, read_trace, run_simulation,
    write_trace, Backend, RoundOutcome, ScenarioConfig, SimulationTrace, StrategySpec,
};
use crate::assignment::{FractionalAllocation, UtilityMatrix};
use crate::error::ApexError;
use crate::hz::envy_check;

fn two_by_two() -> UtilityMatrix {
    UtilityMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()
}

/// Player 1 bids 3 throughout; player 2 cycles 4, 1.5, 1.5.
fn oscillation(rounds: usize) -> ScenarioConfig {
    ScenarioConfig {
        u: two_by_two(),
        rounds,
        budgets: vec![rounds as f64; 2],
        backend: Backend::ExactVcg,
        strategies: vec![
            StrategySpec::Replay { script: vec![3.0] },
            StrategySpec::Replay {
                script: vec![4.0, 1.5, 1.5],
            },
        ],
        seed: 0,
        lambda_bar: Some(5.0),
    }
}

fn constant(lambda: &[f64]) -> Vec<StrategySpec> {
    lambda
        .iter()
        .map(|&lambda| StrategySpec::Constant { lambda })
        .collect()
}

fn normalized(n: usize, raw: &[f64]) -> UtilityMatrix {
    let mut u = Vec::with_capacity(n * n);
    for row in raw.chunks(n) {
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        u.extend(row.iter().map(|v| (v - lo) / (hi - lo)));
    }
    UtilityMatrix::new(n, u).unwrap()
}

fn regularized_config(
    u: UtilityMatrix,
    rounds: usize,
    strategies: Vec<StrategySpec>,
) -> ScenarioConfig {
    let n = u.n();
    ScenarioConfig {
        u,
        rounds,
        budgets: vec![rounds as f64; n],
        backend: Backend::Regularized { beta: None },
        strategies,
        seed: 7,
        lambda_bar: Some(20.0),
    }
}

#[test]
fn identity_rounds_are_free() {
    let config = ScenarioConfig {
        u: UtilityMatrix::identity(3),
        rounds: 5,
        budgets: vec![1.0; 3],
        backend: Backend::ExactVcg,
        strategies: constant(&[1.0, 2.0, 3.0]),
        seed: 0,
        lambda_bar: None,
    };
    let trace = run_simulation(&config).unwrap();
    let id = FractionalAllocation::from_permutation(&[0, 1, 2]);
    for r in &trace.rounds {
        assert_eq!(r.allocation, id.as_slice());
        assert!(r.charges.iter().all(|c| *c == 0.0));
        assert!(r.clamped.iter().all(|c| !c));
    }
    assert_eq!(trace.aggregate.mean_allocation, id.as_slice());
}

#[test]
fn oscillation_averages_to_one_token_per_round() {
    let trace = run_simulation(&oscillation(300)).unwrap();
    let agg = &trace.aggregate;
    for (got, want) in agg.mean_payments.iter().zip([1.0, 1.0]) {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
    }
    for (got, want) in agg
        .mean_allocation
        .iter()
        .zip([2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0])
    {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
    }
    assert!(trace.rounds.iter().all(|r| r.clamped.iter().all(|c| !c)));

    let x = agg.allocation(2).unwrap();
    let envy = envy_check(&trace.config.u, &x);
    assert!(envy.iter().any(|e| e.envious == 1 && e.envied == 0));
}

#[test]
fn oscillation_has_no_profitable_deviation() {
    let trace = run_simulation(&oscillation(300)).unwrap();
    let one = audit_strong_regret(&trace, 0, None).unwrap();
    assert!(one.normalized.abs() <= 1e-6, "{one:?}");
    assert_abs_diff_eq!(one.best_response_utility, 200.0, epsilon = 1e-9);
    assert!(one.certified_lower_bound);

    let two = audit_strong_regret(&trace, 1, None).unwrap();
    assert!(two.normalized.abs() <= 1e-6, "{two:?}");
    assert_abs_diff_eq!(two.best_response_utility, 100.0, epsilon = 1e-9);
    let mix = two.mixture.expect("player 2 mixes losing and winning bids");
    assert!(mix.low < 3.0 && mix.high > 3.0);
    assert_abs_diff_eq!(mix.weight_low, 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(two.best_response_spend, 300.0, epsilon = 1e-9);
}

#[test]
fn idle_bidder_has_regret() {
    let config = ScenarioConfig {
        strategies: constant(&[0.0, 1.0]),
        ..oscillation(10)
    };
    let trace = run_simulation(&config).unwrap();
    let report = audit_strong_regret(&trace, 0, None).unwrap();
    assert_eq!(report.realized_utility, 0.0);
    assert_abs_diff_eq!(report.best_response_utility, 10.0, epsilon = 1e-12);
    assert!(report.strong_regret > 0.0);
    assert!(report.best_response_spend <= 10.0 + 1e-9);
}

#[test]
fn counterfactual_reproduces_and_excludes() {
    let trace = run_simulation(&oscillation(6)).unwrap();
    for t in 0..6 {
        for i in 0..2 {
            let r = &trace.rounds[t];
            let same = counterfactual_round(&trace, t, i, r.bids[i], None).unwrap();
            assert_eq!(same.allocation, r.allocation);
            assert_eq!(same.charges, r.charges);
            assert_eq!(same.utilities, r.utilities);
            let out = counterfactual_round(&trace, t, i, 0.0, None).unwrap();
            assert_eq!(out.charges[i], 0.0);
        }
    }
    // Player 2 lowers its winning bid of 4 to 2 and loses item A.
    let out = counterfactual_round(&trace, 0, 1, 2.0, None).unwrap();
    assert_eq!(out.allocation, vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(out.charges[1], 0.0);
    assert_abs_diff_eq!(out.charges[0], 2.0, epsilon = 1e-12);

    assert!(counterfactual_round(&trace, 6, 0, 1.0, None).is_err());
    assert!(counterfactual_round(&trace, 0, 2, 1.0, None).is_err());
    assert!(counterfactual_round(&trace, 0, 0, 6.0, None).is_err());
}

#[test]
fn regularized_counterfactual_is_bit_exact() {
    let u = normalized(3, &[0.0, 0.4, 1.0, 1.0, 0.0, 0.7, 0.2, 1.0, 0.0]);
    let config = regularized_config(u, 3, constant(&[1.0, 2.0, 0.5]));
    let trace = run_simulation(&config).unwrap();
    let r = &trace.rounds[1];
    let same = counterfactual_round(&trace, 1, 2, r.bids[2], None).unwrap();
    assert_eq!(same.allocation, r.allocation);
    assert_eq!(same.charges, r.charges);
    let zero = counterfactual_round(&trace, 1, 2, 0.0, None).unwrap();
    assert_eq!(zero.charges[2], 0.0);
}

#[test]
fn best_responders_stay_within_budget() {
    // Everyone's favorite is item 0.
    let u = normalized(3, &[1.0, 0.5, 0.0, 1.0, 0.0, 0.3, 1.0, 0.2, 0.0]);
    let strategies = vec![StrategySpec::BestResponse; 3];
    let trace = run_simulation(&regularized_config(u, 20, strategies)).unwrap();
    for i in 0..3 {
        assert!(trace.rounds.iter().all(|r| !r.clamped[i]));
        assert!(trace.total_charges(i) <= 20.0 + 1e-9);
        let capped = trace.rounds[0].bids[i] == 20.0;
        assert!(
            capped || trace.total_charges(i) > 20.0 * (1.0 - 1e-6),
            "{:?}",
            trace.rounds[0]
        );
    }
    let report = aggregate_and_verify(&trace, 0.1).unwrap();
    assert!(report.concentration < 1e-6, "{}", report.concentration);
    assert!(report.certificate.pass, "{:?}", report.certificate);
    for i in 0..3 {
        let audit = audit_strong_regret(&trace, i, None).unwrap();
        assert!(audit.normalized.abs() < 1e-6, "{audit:?}");
        assert!(!audit.certified_lower_bound);
    }
}

#[test]
fn oscillating_player_is_far_from_its_best_response() {
    let u = normalized(3, &[0.0, 0.3, 1.0, 1.0, 0.5, 0.0, 0.0, 1.0, 0.6]);
    let strategies = vec![
        StrategySpec::Replay {
            script: vec![0.05, 15.0],
        },
        StrategySpec::BestResponse,
        StrategySpec::BestResponse,
    ];
    let trace = run_simulation(&regularized_config(u, 10, strategies)).unwrap();
    let report = aggregate_and_verify(&trace, 0.1).unwrap();
    assert!(report.concentration > 1.0, "{}", report.concentration);
    let audit = audit_strong_regret(&trace, 0, None).unwrap();
    assert!(audit.strong_regret > 1e-3, "{audit:?}");
}

#[test]
fn aggregate_rejects_exact_traces() {
    let trace = run_simulation(&oscillation(3)).unwrap();
    assert!(matches!(
        aggregate_and_verify(&trace, 0.1),
        Err(ApexError::Unsupported(_))
    ));
}

#[test]
fn pacer_tracks_its_spend_rate() {
    let config = ScenarioConfig {
        u: two_by_two(),
        rounds: 400,
        budgets: vec![100.0, 400.0],
        backend: Backend::ExactVcg,
        strategies: vec![
            StrategySpec::BwkPacer {
                initial: 1.0,
                target_rate: None,
                step: 1.05,
            },
            StrategySpec::Constant { lambda: 1.0 },
        ],
        seed: 0,
        lambda_bar: Some(10.0),
    };
    let trace = run_simulation(&config).unwrap();
    let spent = trace.total_charges(0);
    assert!(spent <= 100.0 + 1e-9);
    assert!(spent > 90.0, "pacer spent only {spent}");
}

#[test]
fn clamping_zeroes_the_bid() {
    let config = ScenarioConfig {
        budgets: vec![2.0, 100.0],
        strategies: constant(&[4.0, 1.5]),
        ..oscillation(5)
    };
    let trace = run_simulation(&config).unwrap();
    let flagged: Vec<usize> = trace
        .rounds
        .iter()
        .filter(|r| r.clamped[0])
        .map(|r| r.t)
        .collect();
    assert_eq!(flagged, vec![1, 2, 3, 4]);
    for r in &trace.rounds {
        if r.clamped[0] {
            assert_eq!(r.bids[0], 0.0);
            assert_eq!(r.charges[0], 0.0);
        }
    }
    assert!(trace.total_charges(0) <= 2.0 + 1e-9);
}

#[test]
fn trace_round_trips() {
    let trace = run_simulation(&oscillation(6)).unwrap();
    let mut buf = Vec::new();
    write_trace(&trace, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .contains("\"budget_remaining\""));
    assert_eq!(read_trace(&text).unwrap(), trace);

    let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    assert!(matches!(
        read_trace(&truncated),
        Err(ApexError::Trace { .. })
    ));
    let garbled = text.replacen("\"t\":2", "\"t\":\"two\"", 1);
    assert!(matches!(
        read_trace(&garbled),
        Err(ApexError::Trace { line: 4, .. })
    ));
}

#[test]
fn config_validation() {
    let mut bad = oscillation(3);
    bad.rounds = 0;
    assert!(run_simulation(&bad).is_err());
    let mut bad = oscillation(3);
    bad.budgets[1] = 0.0;
    assert!(run_simulation(&bad).is_err());
    let mut bad = oscillation(3);
    bad.strategies[0] = StrategySpec::Replay { script: vec![9.0] };
    assert!(run_simulation(&bad).is_err());
    let mut bad = oscillation(3);
    bad.strategies[0] = StrategySpec::BestResponse;
    assert!(matches!(
        run_simulation(&bad),
        Err(ApexError::Unsupported(_))
    ));
    let mut bad = oscillation(3);
    bad.backend = Backend::Regularized { beta: None };
    bad.u = UtilityMatrix::from_rows(&[[2.0, 0.0], [1.0, 0.0]]).unwrap();
    assert!(run_simulation(&bad).is_err());
}

fn exact_trace(
    n: usize,
    rounds: usize,
    raw: Vec<f64>,
    bids: Vec<f64>,
    budget: f64,
) -> SimulationTrace {
    let strategies = (0..n)
        .map(|i| StrategySpec::Replay {
            script: bids[i * rounds..(i + 1) * rounds].to_vec(),
        })
        .collect();
    let config = ScenarioConfig {
        u: UtilityMatrix::new(n, raw).unwrap(),
        rounds,
        budgets: vec![budget; n],
        backend: Backend::ExactVcg,
        strategies,
        seed: 0,
        lambda_bar: Some(3.0),
    };
    run_simulation(&config).unwrap()
}

fn exact_trace_strategy() -> impl proptest::strategy::Strategy<Value = SimulationTrace> {
    (2usize..=3, 2usize..=5).prop_flat_map(|(n, rounds)| {
        (
            proptest::collection::vec(0.0..1.0f64, n * n),
            proptest::collection::vec(0.0..3.0f64, n * rounds),
            0.5..3.0f64,
        )
            .prop_map(move |(raw, bids, b)| exact_trace(n, rounds, raw, bids, b * rounds as f64))
    })
}

fn linear_welfare(u: &UtilityMatrix, bids: &[f64], x: &[f64]) -> f64 {
    let n = u.n();
    (0..n * n)
        .map(|k| bids[k / n] * u.get(k / n, k % n) * x[k])
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budgets_are_never_overdrawn(trace in exact_trace_strategy()) {
        for i in 0..trace.n() {
            prop_assert!(trace.total_charges(i) <= trace.config.budgets[i] + 1e-9);
            for r in &trace.rounds {
                prop_assert!(r.charges[i] >= -1e-9);
                if r.clamped[i] {
                    prop_assert!(r.charges[i].abs() <= 1e-12);
                }
            }
        }
        let mean: Vec<f64> = (0..trace.n())
            .map(|i| trace.total_charges(i) / trace.rounds.len() as f64)
            .collect();
        for (a, b) in mean.iter().zip(&trace.aggregate.mean_payments) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let x = trace.aggregate.allocation(trace.n()).unwrap();
        prop_assert!(x.bistochastic_error() <= 1e-8);
    }

    #[test]
    fn exact_runs_are_deterministic(trace in exact_trace_strategy()) {
        let again = run_simulation(&trace.config).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_trace(&trace, &mut a).unwrap();
        write_trace(&again, &mut b).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn exact_backend_is_monotone(trace in exact_trace_strategy(), t in 0usize..5, i in 0usize..3, alt in 0.0..3.0f64) {
        let t = t % trace.rounds.len();
        let i = i % trace.n();
        let u = &trace.config.u;
        let r = &trace.rounds[t];
        let other = counterfactual_round(&trace, t, i, alt, None).unwrap();
        let mut alt_bids = r.bids.clone();
        alt_bids[i] = alt;
        let lhs = linear_welfare(u, &r.bids, &r.allocation) - linear_welfare(u, &r.bids, &other.allocation);
        let rhs = linear_welfare(u, &alt_bids, &r.allocation) - linear_welfare(u, &alt_bids, &other.allocation);
        prop_assert!(lhs >= rhs - 1e-8, "{lhs} < {rhs}");
    }

    #[test]
    fn exact_menus_are_monotone(trace in exact_trace_strategy(), t in 0usize..5, i in 0usize..3) {
        let t = t % trace.rounds.len();
        let i = i % trace.n();
        let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in 0..=30 {
            let out = counterfactual_round(&trace, t, i, 0.1 * k as f64, None).unwrap();
            prop_assert!(out.charges[i] >= prev.0 - 1e-9 && out.utilities[i] >= prev.1 - 1e-9);
            prev = (out.charges[i], out.utilities[i]);
        }
    }

    #[test]
    fn truthful_reports_dominate(
        trace in exact_trace_strategy(),
        t in 0usize..5,
        i in 0usize..3,
        lie in proptest::collection::vec(0.0..1.0f64, 3),
        bid in 0.0..3.0f64,
    ) {
        let t = t % trace.rounds.len();
        let n = trace.n();
        let i = i % n;
        let bids = &trace.rounds[t].bids;
        // Truthful at the recorded bid, in token units.
        let honest = counterfactual_round(&trace, t, i, bids[i], None).unwrap();
        let liar = counterfactual_round(&trace, t, i, bid, Some(&lie[..n])).unwrap();
        let score = |o: &RoundOutcome| bids[i] * o.utilities[i] - o.charges[i];
        prop_assert!(score(&honest) >= score(&liar) - 1e-8);
    }

    #[test]
    fn exact_audit_beats_every_constant_bid(trace in exact_trace_strategy(), i in 0usize..3) {
        let i = i % trace.n();
        let report = audit_strong_regret(&trace, i, None).unwrap();
        let budget = trace.config.budgets[i];
        prop_assert!(report.best_response_spend <= budget + 1e-9);
        for k in 0..=60 {
            let bid = 0.05 * k as f64;
            let (mut spend, mut utility) = (0.0, 0.0);
            for t in 0..trace.rounds.len() {
                let out = counterfactual_round(&trace, t, i, bid, None).unwrap();
                spend += out.charges[i];
                utility += out.utilities[i];
            }
            if spend <= budget {
                prop_assert!(report.best_response_utility >= utility - 1e-9, "bid {bid}: {utility} > {report:?}");
            }
        }
        if report.mixture.is_none() {
            let (mut spend, mut utility) = (0.0, 0.0);
            for t in 0..trace.rounds.len() {
                let out = counterfactual_round(&trace, t, i, report.best_response_lambda, None).unwrap();
                spend += out.charges[i];
                utility += out.utilities[i];
            }
            prop_assert!((spend - report.best_response_spend).abs() <= 1e-9);
            prop_assert!((utility - report.best_response_utility).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn regularized_menus_and_monotonicity(
        raw in proptest::collection::vec(0.0..1.0f64, 9),
        bids in proptest::collection::vec(0.1..5.0f64, 3),
        i in 0usize..3,
        alt in 0.0..5.0f64,
    ) {
        let u = normalized(3, &raw);
        let config = regularized_config(u.clone(), 1, constant(&bids));
        let trace = run_simulation(&config).unwrap();
        let r = &trace.rounds[0];
        let other = counterfactual_round(&trace, 0, i, alt, None).unwrap();
        let mut alt_bids = r.bids.clone();
        alt_bids[i] = alt;
        let lhs = linear_welfare(&u, &r.bids, &r.allocation) - linear_welfare(&u, &r.bids, &other.allocation);
        let rhs = linear_welfare(&u, &alt_bids, &r.allocation) - linear_welfare(&u, &alt_bids, &other.allocation);
        prop_assert!(lhs >= rhs - 1e-8, "{lhs} < {rhs}");

        let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in 0..=20 {
            let out = counterfactual_round(&trace, 0, i, 0.25 * k as f64, None).unwrap();
            prop_assert!(out.charges[i] >= prev.0 - 1e-9 && out.utilities[i] >= prev.1 - 1e-9);
            prev = (out.charges[i], out.utilities[i]);
        }
    }
}
