use super::*;
use crate::assignment::vcg_outcome;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn market_4x4() -> UtilityMatrix {
    UtilityMatrix::from_rows(&[
        [11.0, 9.0, 14.0, 0.0],
        [11.0, 9.0, 14.0, 0.0],
        [0.0, 0.0, 10.0, 0.0],
        [0.0, 0.0, 10.0, 0.0],
    ])
    .unwrap()
}

fn contested() -> UtilityMatrix {
    UtilityMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()
}

fn half_half() -> FractionalAllocation {
    FractionalAllocation::new(
        4,
        vec![
            0.5, 0.5, 0.0, 0.0, //
            0.5, 0.5, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.5, //
            0.0, 0.0, 0.5, 0.5,
        ],
    )
    .unwrap()
}

fn allocation_y() -> FractionalAllocation {
    FractionalAllocation::new(
        4,
        vec![
            0.5, 0.35, 0.15, 0.0, //
            0.5, 0.35, 0.15, 0.0, //
            0.0, 0.15, 0.35, 0.5, //
            0.0, 0.15, 0.35, 0.5,
        ],
    )
    .unwrap()
}

fn oscillation_average() -> FractionalAllocation {
    FractionalAllocation::new(2, vec![2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap()
}

#[test]
fn lambda_max_examples() {
    assert_eq!(lambda_max(&contested()).value, 3.0);
    // Smallest within-row gap is 11 - 9 = 2.
    assert_eq!(lambda_max(&market_4x4()).value, 3.0);
    let flat = UtilityMatrix::new(3, vec![0.7; 9]).unwrap();
    assert_eq!(
        lambda_max(&flat),
        LambdaMax {
            value: 1.0,
            degenerate: true
        }
    );
}

#[test]
fn smoothed_payments_contested_pair() {
    let e = expected_vcg_payments(&contested(), &[2.0, 2.0], 0.01, 4096, 1).unwrap();
    for p in &e.phi {
        assert!((p - 1.0).abs() < 0.1, "{p}");
    }
    assert!((e.x_eps.get(0, 0) - 0.5).abs() < 0.05);
    assert!((e.c_eps.0[0] - 2.0).abs() < 0.05);
    assert!(e.x_eps.bistochastic_error() < 1e-12);
}

#[test]
fn smoothed_payments_without_ties_are_exact() {
    // Player 1 wins A over the whole box; its payment is the opponent's bid.
    let u = contested();
    let e = expected_vcg_payments(&u, &[3.0, 1.0], 0.01, 64, 9).unwrap();
    let centre = vcg_outcome(&u, Some(&[3.005, 1.005])).unwrap();
    for i in 0..2 {
        assert_abs_diff_eq!(e.phi[i], centre.payments[i], epsilon = 1e-9);
    }
    let u = UtilityMatrix::from_rows(&[[0.9, 0.2, 0.0], [0.5, 1.0, 0.3], [0.8, 0.0, 0.6]]).unwrap();
    let lambda = [2.0, 1.5, 1.0];
    let e = expected_vcg_payments(&u, &lambda, 1e-3, 16, 3).unwrap();
    let centre = vcg_outcome(&u, Some(&[2.0005, 1.5005, 1.0005])).unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(e.phi[i], centre.payments[i], epsilon = 1e-9);
    }
}

#[test]
fn smoothed_payments_vanish_with_zero_bids() {
    let u = market_4x4();
    for eps in [1e-2, 1e-4] {
        let e = expected_vcg_payments(&u, &[0.0; 4], eps, 64, 2).unwrap();
        for p in e.phi {
            assert!((0.0..=eps * 4.0 * 14.0).contains(&p));
        }
    }
}

#[test]
fn smoothed_payments_validate_inputs() {
    let u = contested();
    assert!(expected_vcg_payments(&u, &[1.0, 1.0], 0.0, 8, 0).is_err());
    assert!(expected_vcg_payments(&u, &[1.0, 1.0], 0.1, 0, 0).is_err());
    assert!(expected_vcg_payments(&u, &[-1.0, 1.0], 0.1, 8, 0).is_err());
    assert!(expected_vcg_payments(&u, &[1.0], 0.1, 8, 0).is_err());
}

#[test]
fn smoothed_payments_are_deterministic() {
    let u = market_4x4();
    let l = [0.6, 0.55, 0.3, 0.25];
    let a = expected_vcg_payments(&u, &l, 0.05, 128, 17).unwrap();
    let b = expected_vcg_payments(&u, &l, 0.05, 128, 17).unwrap();
    let c = expected_vcg_payments(&u, &l, 0.05, 128, 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.phi, c.phi);
}

#[test]
fn psi_examples() {
    let id = UtilityMatrix::identity(3);
    let cap = lambda_max(&id).value;
    let out = psi_step(&id, &[0.5, 2.0, 3.9], 0.01, cap, 32, 0).unwrap();
    assert_eq!(out, vec![1.5, 3.0, cap]);
    // Fixed point when payments are exactly one token; lower clamp.
    assert_eq!(psi_from(&[0.7, 1.2], &[1.0, 1.0], 3.0), vec![0.7, 1.2]);
    assert_eq!(psi_from(&[0.0], &[1.005], 3.0), vec![0.0]);
}

#[test]
fn bundle_examples() {
    let b = best_affordable_bundle(&[11.0, 9.0, 14.0, 0.0], &[1.1, 0.9, 2.0, 0.0], 1.0).unwrap();
    assert_abs_diff_eq!(b.value, 10.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.y[0], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(b.y[1], 0.5, epsilon = 1e-12);

    let free = best_affordable_bundle(&[0.2, 0.9, 0.4], &[0.0; 3], 1.0).unwrap();
    assert_eq!(free.y, vec![0.0, 1.0, 0.0]);
    assert_eq!(free.value, 0.9);
    let rich = best_affordable_bundle(&[0.2, 0.9, 0.4], &[3.0, 5.0, 1.0], 5.0).unwrap();
    assert_eq!(rich.y, vec![0.0, 1.0, 0.0]);

    assert!(matches!(
        best_affordable_bundle(&[1.0, 0.0], &[2.0, 1.5], 1.0),
        Err(ApexError::Unaffordable { .. })
    ));
    assert!(best_affordable_bundle(&[1.0, 0.0], &[0.0, 1.5], 0.0).is_err());
}

#[test]
fn half_half_equilibrium_passes() {
    let cert = verify_ce(
        &market_4x4(),
        None,
        &half_half(),
        &[1.1, 0.9, 2.0, 0.0],
        None,
        1e-9,
    )
    .unwrap();
    assert!(cert.pass, "{cert:?}");
    assert_eq!(cert.properties[0], Some(true));
    assert_eq!(cert.properties[1], None);
    assert_eq!(cert.properties[2], None);
}

#[test]
fn vcg_supported_equilibrium_passes_all_five() {
    let lambda = [4.0 / 7.0, 4.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0];
    let prices = [8.0 / 7.0, 0.0, 20.0 / 7.0, 0.0];
    let cert = verify_ce(
        &market_4x4(),
        Some(&lambda),
        &allocation_y(),
        &prices,
        None,
        1e-9,
    )
    .unwrap();
    assert!(cert.pass, "{cert:?}");
    assert!(cert.properties.iter().all(|p| *p == Some(true)));
    for p in &cert.players {
        assert_abs_diff_eq!(p.budget_spent, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn half_half_is_not_supported_by_vcg() {
    // The first equilibrium's allocation is a lottery of welfare-optimal
    // assignments at the second equilibrium's weights, but its prices are not
    // the VCG prices there.
    let lambda = [4.0 / 7.0, 4.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0];
    let cert = verify_ce(
        &market_4x4(),
        Some(&lambda),
        &half_half(),
        &[1.1, 0.9, 2.0, 0.0],
        None,
        1e-9,
    )
    .unwrap();
    assert!(!cert.pass);
    assert_eq!(cert.properties[1], Some(false));
    assert_eq!(cert.properties[2], Some(true));
}

#[test]
fn oscillation_average_is_never_an_equilibrium() {
    let u = contested();
    let x = oscillation_average();
    for k in 0..=40 {
        let c = [k as f64 * 0.1, 0.0];
        let cert = verify_ce(&u, None, &x, &c, None, 1e-9).unwrap();
        assert!(!cert.pass, "prices {c:?}");
        if c[0] <= 2.0 {
            // Affordable share of A beats the realized third.
            assert_eq!(cert.properties[4], Some(false));
            assert!(cert.players[1].gap > 1e-9);
        }
    }
}

#[test]
fn envy_examples() {
    let u = contested();
    let envy = envy_check(&u, &oscillation_average());
    assert_eq!(envy.len(), 1);
    assert_eq!((envy[0].envious, envy[0].envied), (1, 0));
    assert!(envy_check(&market_4x4(), &FractionalAllocation::uniform(4)).is_empty());
    let id = UtilityMatrix::identity(3);
    assert!(envy_check(&id, &FractionalAllocation::from_permutation(&[0, 1, 2])).is_empty());
}

#[test]
fn verify_rejects_malformed_inputs() {
    let u = contested();
    let x = FractionalAllocation::uniform(2);
    assert!(verify_ce(&u, None, &x, &[1.0], None, 0.1).is_err());
    assert!(verify_ce(&u, None, &x, &[1.0, 0.0], Some(&[1.0, 0.0]), 0.1).is_err());
    assert!(verify_ce(&u, Some(&[1.0]), &x, &[1.0, 0.0], None, 0.1).is_err());
    assert!(verify_ce(
        &u,
        None,
        &FractionalAllocation::uniform(3),
        &[1.0, 0.0],
        None,
        0.1
    )
    .is_err());
}

#[test]
fn identity_equilibrium() {
    let id = UtilityMatrix::identity(3);
    let sol = find_hz_equilibrium(&id, &HzOptions::default()).unwrap();
    assert!(sol.converged);
    assert_eq!(sol.lambda_star, vec![sol.lambda_bar; 3]);
    assert!(sol.prices.0.iter().all(|c| *c == 0.0));
    for i in 0..3 {
        assert_abs_diff_eq!(sol.allocation.get(i, i), 1.0, epsilon = 1e-12);
    }
    let damped = HzOptions {
        method: FixedPointMethod::Damped,
        ..HzOptions::default()
    };
    let sol = find_hz_equilibrium(&id, &damped).unwrap();
    assert!(sol.converged);
    // Steps of alpha toward the cap of 4 from a start of 1.
    assert!(sol.iterations <= 30, "{}", sol.iterations);
}

#[test]
fn contested_pair_equilibrium() {
    let sol = find_hz_equilibrium(&contested(), &HzOptions::default()).unwrap();
    assert!(sol.converged, "{sol:?}");
    for l in &sol.lambda_star {
        assert!((l - 2.0).abs() <= 0.2, "{l}");
    }
    assert!((sol.prices.0[0] - 2.0).abs() <= 0.2);
    for v in sol.allocation.as_slice() {
        assert!((v - 0.5).abs() <= 0.05);
    }
}

#[test]
fn options_are_validated() {
    let u = contested();
    let bad = |o: HzOptions| find_hz_equilibrium(&u, &o).is_err();
    assert!(bad(HzOptions {
        alpha: 0.0,
        ..HzOptions::default()
    }));
    assert!(bad(HzOptions {
        alpha: 1.5,
        ..HzOptions::default()
    }));
    assert!(bad(HzOptions {
        tol: 0.0,
        ..HzOptions::default()
    }));
    assert!(bad(HzOptions {
        eps: -1.0,
        ..HzOptions::default()
    }));
    assert!(bad(HzOptions {
        lambda_bar: Some(-1.0),
        ..HzOptions::default()
    }));
    let capped = find_hz_equilibrium(
        &u,
        &HzOptions {
            max_iter: 0,
            ..HzOptions::default()
        },
    )
    .unwrap();
    assert_eq!(capped.iterations, 0);
    assert!(!capped.converged);
}

fn small_instance() -> impl Strategy<Value = (UtilityMatrix, Vec<f64>)> {
    (2..=4usize).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..1.0f64, n * n)
                .prop_map(move |u| UtilityMatrix::new(n, u).unwrap()),
            prop::collection::vec(0.0..3.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smoothed_evaluation_is_consistent((u, lambda) in small_instance(), seed in 0u64..1000) {
        let n = u.n();
        let eps = 0.05;
        let samples = 64;
        let e = expected_vcg_payments(&u, &lambda, eps, samples, seed).unwrap();
        prop_assert!(e.x_eps.bistochastic_error() < 1e-9);
        for i in 0..n {
            prop_assert!(e.phi[i] >= 0.0);
            let implied: f64 = (0..n).map(|j| e.x_eps.get(i, j) * e.c_eps.0[j]).sum();
            let bound = eps * n as f64 + 3.0 * n as f64 / (samples as f64).sqrt();
            prop_assert!((e.phi[i] - implied).abs() <= bound);
        }
    }

    #[test]
    fn smoothed_payments_are_continuous((u, lambda) in small_instance(), who in 0usize..4, frac in 0.0..1.0f64) {
        let n = u.n();
        let who = who % n;
        let eps = 0.05;
        let cap = lambda_max(&u).value.max(3.0 + eps);
        let shift = frac * eps / 10.0;
        let mut moved = lambda.clone();
        moved[who] += shift;
        let a = expected_vcg_payments(&u, &lambda, eps, 64, 5).unwrap();
        let b = expected_vcg_payments(&u, &moved, eps, 64, 5).unwrap();
        for i in 0..n {
            prop_assert!((a.phi[i] - b.phi[i]).abs() <= shift / eps * cap * n as f64 + 1e-9);
        }
    }

    #[test]
    fn psi_stays_in_box((u, lambda) in small_instance(), cap in 1.0..5.0f64) {
        let out = psi_step(&u, &lambda, 0.05, cap, 16, 1).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=cap).contains(v)));
    }

    #[test]
    fn bundle_beats_every_affordable_mix(
        u_row in prop::collection::vec(0.0..10.0f64, 4),
        prices in prop::collection::vec(0.0..3.0f64, 4),
        budget in 0.1..3.0f64,
        mix in prop::collection::vec(0.0..1.0f64, 4),
    ) {
        prop_assume!(prices.iter().copied().fold(f64::INFINITY, f64::min) <= budget);
        let best = best_affordable_bundle(&u_row, &prices, budget).unwrap();
        let total: f64 = best.y.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let cost: f64 = best.y.iter().zip(&prices).map(|(y, c)| y * c).sum();
        prop_assert!(cost <= budget + 1e-12);
        let s: f64 = mix.iter().sum::<f64>().max(1e-12);
        let y: Vec<f64> = mix.iter().map(|v| v / s).collect();
        let cost: f64 = y.iter().zip(&prices).map(|(y, c)| y * c).sum();
        if cost <= budget {
            let value: f64 = y.iter().zip(&u_row).map(|(y, u)| y * u).sum();
            prop_assert!(value <= best.value + 1e-9);
        }
    }
}
