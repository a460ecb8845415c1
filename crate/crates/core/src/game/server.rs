//! Stage I: budget-constrained choice of participation targets.
//!
//! For a fixed multiplier `lambda`, the budget Lagrangian separates across
//! clients and each per-client term is convex in `q_n`, minimized by
//! [`kkt_participation`]. Total spend along that path is non-increasing in
//! `lambda`, so bisecting for `spend = B` yields a point that is optimal for
//! the constrained problem.

use crate::bound::convergence_gap_bound;
use crate::domain::{ClientProfile, EquilibriumResult, GameConstants, ParticipationVector, PricingVector};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

use super::client::{bound_scale, inverse_price, kkt_participation};
use super::SolverOptions;

/// Server spend `sum_n P_n(q_n) q_n` with prices from [`inverse_price`].
pub fn total_spend(q: &[f64], profiles: &[ClientProfile], constants: &GameConstants) -> Result<f64> {
    if q.len() != profiles.len() {
        return Err(Error::LengthMismatch {
            what: "participation vector",
            expected: profiles.len(),
            found: q.len(),
        });
    }
    let terms = q
        .iter()
        .zip(profiles)
        .map(|(&qn, p)| inverse_price(qn, p, constants).map(|price| price * qn))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms))
}

/// `1 / (3 lambda*)`: interior clients valuing the model above this pay the server.
pub fn payment_threshold(lambda_star: f64) -> f64 {
    1.0 / (3.0 * lambda_star)
}

/// Closed-form equilibrium price of an interior client at multiplier `lambda_star`.
pub fn price_closed_form(
    lambda_star: f64,
    profile: &ClientProfile,
    constants: &GameConstants,
) -> Result<f64> {
    if !(lambda_star > 0.0) {
        return Err(Error::InvalidParameter(format!("multiplier {lambda_star} must be positive")));
    }
    let v = profile.intrinsic_pref;
    let gap = 1.0 / lambda_star - v;
    if !(gap > 0.0) {
        return Err(Error::Domain {
            index: profile.index,
            q: f64::NAN,
            reason: "client is not interior: 1/lambda <= v",
        });
    }
    let c = profile.cost_coeff;
    let scale = (2.0 * constants.alpha * c * c * profile.data_quality_sq() / constants.rounds as f64).cbrt();
    Ok(scale * (gap.cbrt() - 2.0 * (v.powf(1.5) / gap).powf(2.0 / 3.0)))
}

fn kkt_vector(lambda: f64, profiles: &[ClientProfile], constants: &GameConstants) -> Result<Vec<f64>> {
    profiles
        .iter()
        .map(|p| kkt_participation(lambda, p, constants))
        .collect()
}

/// Assembles the reported equilibrium from participation targets.
pub(crate) fn assemble_result(
    q: Vec<f64>,
    lambda_star: f64,
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    caps_binding: bool,
    solver: &str,
    iterations: usize,
) -> Result<EquilibriumResult> {
    let prices = q
        .iter()
        .zip(profiles)
        .map(|(&qn, p)| inverse_price(qn, p, constants))
        .collect::<Result<Vec<_>>>()?;
    let payments: Vec<f64> = prices.iter().zip(&q).map(|(p, q)| p * q).collect();
    let interior = q
        .iter()
        .zip(profiles)
        .map(|(&qn, p)| qn > constants.q_floor && qn < p.q_max)
        .collect();
    Ok(EquilibriumResult {
        spend: compensated_sum(payments.iter().copied()),
        bound_value: convergence_gap_bound(&q, profiles, constants)?,
        q_star: ParticipationVector(q),
        p_star: PricingVector(prices),
        lambda_star,
        v_threshold: payment_threshold(lambda_star),
        budget,
        payments,
        interior,
        caps_binding,
        solver: solver.to_string(),
        iterations,
    })
}

/// Checks the budget against the caps and the floor.
///
/// Returns `Some(q_max vector)` when the budget buys every cap.
pub(crate) fn screen_budget(
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
) -> Result<Option<Vec<f64>>> {
    if !budget.is_finite() {
        return Err(Error::InvalidParameter(format!("budget {budget} must be finite")));
    }
    let caps: Vec<f64> = profiles.iter().map(|p| p.q_max).collect();
    if total_spend(&caps, profiles, constants)? <= budget {
        return Ok(Some(caps));
    }
    let floors = vec![constants.q_floor; profiles.len()];
    let minimal = total_spend(&floors, profiles, constants)?;
    if minimal > budget {
        return Err(Error::InfeasibleBudget { budget, minimal });
    }
    Ok(None)
}

/// Largest multiplier at which every client sits at its cap.
pub(crate) fn cap_multiplier(profiles: &[ClientProfile], constants: &GameConstants) -> f64 {
    let worst = profiles
        .iter()
        .map(|p| 4.0 * p.cost_coeff * p.q_max.powi(3) / bound_scale(p, constants) + p.intrinsic_pref)
        .fold(0.0_f64, f64::max);
    1.0 / worst
}

/// Solves the server problem by bisection on the budget multiplier.
pub fn server_solve(
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<EquilibriumResult> {
    constants.validate_for(profiles)?;
    opts.validate()?;
    let lambda_caps = cap_multiplier(profiles, constants);
    if let Some(caps) = screen_budget(profiles, constants, budget)? {
        return assemble_result(caps, lambda_caps, profiles, constants, budget, true, "lambda-bisection", 0);
    }

    // Below lambda_caps every client is at its cap (spend > B); above
    // lambda_floor every client is at the floor (spend <= B).
    let lambda_floor = profiles
        .iter()
        .map(|p| bound_scale(p, constants) / (4.0 * p.cost_coeff * constants.q_floor.powi(3)))
        .fold(0.0_f64, f64::max)
        .max(lambda_caps)
        * 2.0;
    let spend_at = |lambda: f64| -> Result<(Vec<f64>, f64)> {
        let q = kkt_vector(lambda, profiles, constants)?;
        let s = total_spend(&q, profiles, constants)?;
        Ok((q, s))
    };

    let (mut lo, mut hi) = (lambda_caps, lambda_floor);
    let (_, s_lo) = spend_at(lo)?;
    let (_, s_hi) = spend_at(hi)?;
    if !(s_lo >= budget && s_hi <= budget) {
        return Err(Error::Bracket(format!(
            "lambda in [{lo:e}, {hi:e}] gives spend [{s_lo}, {s_hi}], budget {budget}"
        )));
    }

    let slack = opts.budget_slack(budget);
    let accept = slack.max(1e-6 * budget.abs().max(1.0));
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    while iterations < opts.max_iter {
        iterations += 1;
        let mid = (lo * hi).sqrt();
        let (q, s) = spend_at(mid)?;
        let better = best.as_ref().is_none_or(|(_, _, bs)| (s - budget).abs() < (bs - budget).abs());
        if better {
            best = Some((mid, q, s));
        }
        if (s - budget).abs() <= slack {
            break;
        }
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        // Spend can be very steep in lambda near a floor client, so a narrow
        // bracket ends the search only once the spend is acceptable.
        if ((hi - lo) <= opts.lambda_tol * hi && (s - budget).abs() <= accept) || !(lo < (lo * hi).sqrt() && (lo * hi).sqrt() < hi) {
            break;
        }
    }
    let (lambda, q, s) = best.expect("at least one bisection step");
    log::debug!("lambda bisection: {iterations} iterations, lambda {lambda:e}, spend {s}");
    if (s - budget).abs() > accept {
        return Err(Error::Bracket(format!(
            "bisection stalled at lambda {lambda:e} with spend {s} for budget {budget}"
        )));
    }
    assemble_result(q, lambda, profiles, constants, budget, false, "lambda-bisection", iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_population;

    fn k_unit() -> GameConstants {
        GameConstants::new(1.0, 0.0, 1, 1)
    }

    #[test]
    fn spend_examples() {
        let p = make_population(&[1.0], &[1.0], &[1.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(total_spend(&[1.0], &p, &k_unit()).unwrap(), 2.0);
        let p2 = make_population(&[1.0, 3.0], &[1.0, 1.0], &[2.0, 0.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let s = total_spend(&[0.3, 0.6], &p2, &k_unit()).unwrap();
        assert!((s - (2.0 * 2.0 * 0.09 + 2.0 * 0.5 * 0.36)).abs() < 1e-12);
        assert!(total_spend(&[0.001, 0.5], &p2, &k_unit()).is_err());
    }

    #[test]
    fn threshold_values() {
        assert_eq!(payment_threshold(1.0), 1.0 / 3.0);
        assert_eq!(payment_threshold(1.0 / 3.0), 1.0);
    }

    #[test]
    fn budget_buying_full_participation() {
        let p = make_population(&[1.0], &[1.0], &[1.0], &[0.0], &[1.0]).unwrap();
        let r = server_solve(&p, &k_unit(), 2.0, &SolverOptions::default()).unwrap();
        assert_eq!(r.q_star.0, vec![1.0]);
        assert_eq!(r.p_star.0, vec![2.0]);
        assert_eq!(r.spend, 2.0);
        assert!(r.caps_binding);
    }

    #[test]
    fn slack_budget_saturates_caps() {
        let p = make_population(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 3.0], &[0.5, 0.0], &[0.8, 0.6]).unwrap();
        let r = server_solve(&p, &k_unit(), 100.0, &SolverOptions::default()).unwrap();
        assert_eq!(r.q_star.0, vec![0.8, 0.6]);
        assert!(r.spend <= 100.0);
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let p = make_population(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        match server_solve(&p, &k_unit(), 1e-6, &SolverOptions::default()) {
            Err(Error::InfeasibleBudget { minimal, .. }) => {
                assert!((minimal - 4.0 * 1e-4).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tight_budget_and_consistent_result() {
        let p = make_population(&[1.0, 1.0], &[2.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let r = server_solve(&p, &k_unit(), 1.0, &SolverOptions::default()).unwrap();
        assert!((r.spend - 1.0).abs() <= 1e-9);
        assert_eq!(r.bound_value, convergence_gap_bound(&r.q_star, &p, &k_unit()).unwrap());
        assert!(r.interior.iter().all(|&b| b));
    }

    #[test]
    fn closed_form_price_zero_at_threshold() {
        let lambda = 0.05;
        let p = make_population(&[1.0], &[2.0], &[3.0], &[payment_threshold(lambda)], &[1.0]).unwrap();
        let price = price_closed_form(lambda, &p[0], &k_unit()).unwrap();
        assert!(price.abs() < 1e-12, "{price}");
        let p0 = make_population(&[1.0], &[2.0], &[3.0], &[0.0], &[1.0]).unwrap();
        assert!(price_closed_form(lambda, &p0[0], &k_unit()).unwrap() > 0.0);
        let hi = make_population(&[1.0], &[2.0], &[3.0], &[25.0], &[1.0]).unwrap();
        assert!(price_closed_form(lambda, &hi[0], &k_unit()).is_err());
    }
}
