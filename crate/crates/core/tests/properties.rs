use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;

use fedprice::bound::convergence_gap_bound;
use fedprice::data::{gen_synthetic, read_dataset, write_dataset, SyntheticParams};
use fedprice::fltrain::{aggregate, ModelState};
use fedprice::game::{client_best_response, server_solve, verify_equilibrium, SolverOptions};
use fedprice::{make_population, ClientProfile, GameConstants};

fn population() -> impl Strategy<Value = (Vec<ClientProfile>, GameConstants)> {
    (2usize..8)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1.0..500.0f64, n),
                prop::collection::vec(0.5..10.0f64, n),
                prop::collection::vec(0.5..20.0f64, n),
                prop::collection::vec(0.0..50.0f64, n),
                0.1..20.0f64,
                1u32..100,
            )
        })
        .prop_map(|(d, g, c, v, alpha, rounds)| {
            let n = d.len();
            (
                make_population(&d, &g, &c, &v, &vec![1.0; n]).unwrap(),
                GameConstants::new(alpha, 0.0, rounds, 5),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_response_is_monotone_in_price((p, k) in population(), a in -5.0..20.0f64, b in -5.0..20.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let me = &p[0];
        prop_assert!(client_best_response(lo, me, &k) <= client_best_response(hi, me, &k) + 1e-12);
    }

    #[test]
    fn equilibria_spend_the_budget_and_satisfy_kkt((p, k) in population(), budget in 0.5..200.0f64) {
        let r = match server_solve(&p, &k, budget, &SolverOptions::default()) {
            Ok(r) => r,
            Err(fedprice::Error::InfeasibleBudget { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let rep = verify_equilibrium(&r, &p, &k, budget);
        if !r.caps_binding {
            prop_assert!(rep.budget_residual <= 1e-6 * budget.max(1.0));
        }
        prop_assert!(rep.kkt_residual.is_none_or(|x| x <= 1e-6));
        prop_assert!(rep.threshold_consistent());
        prop_assert!(r.q_star.iter().all(|&q| q >= k.q_floor && q <= 1.0));
    }

    #[test]
    fn raising_any_participation_never_raises_the_bound((p, k) in population(), i in 0usize..8, q in 0.05..1.0f64, bump in 0.0..0.5f64) {
        let i = i % p.len();
        let base = vec![q; p.len()];
        let mut up = base.clone();
        up[i] = (q + bump).min(1.0);
        prop_assert!(convergence_gap_bound(&up, &p, &k).unwrap() <= convergence_gap_bound(&base, &p, &k).unwrap());
    }

    #[test]
    fn full_participation_aggregate_is_the_weighted_average(d in prop::collection::vec(1.0..100.0f64, 1..6), seed in 0u64..1000) {
        let n = d.len();
        let p = make_population(&d, &vec![1.0; n], &vec![1.0; n], &vec![0.0; n], &vec![1.0; n]).unwrap();
        let prev = ModelState::zeros(2, 3);
        let updates: BTreeMap<usize, Array2<f64>> = (0..n)
            .map(|i| (i, Array2::from_elem((2, 4), (seed as f64 + i as f64).sin())))
            .collect();
        let w = aggregate(&prev, &updates, &vec![1.0; n], &p).unwrap();
        let expected: f64 = p.iter().enumerate().map(|(i, c)| c.weight * (seed as f64 + i as f64).sin()).sum();
        prop_assert!(w.w.iter().all(|x| (x - expected).abs() <= 1e-12));
    }

    #[test]
    fn container_round_trips_any_generated_dataset(clients in 1usize..5, dim in 1usize..6, classes in 2usize..4, per in 10usize..30, seed in 0u64..100) {
        let ds = gen_synthetic(&SyntheticParams {
            clients,
            dim,
            classes,
            total_samples: clients * per,
            seed,
            ..Default::default()
        }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }
}
