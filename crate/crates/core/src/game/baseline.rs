//! Reference pricing schemes: one price for everyone, or prices proportional
//! to datasize. Both scale a nonnegative price shape until the budget is spent.

use serde::{Deserialize, Serialize};

use crate::domain::{ClientProfile, GameConstants, ParticipationVector, PricingVector};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

use super::client::client_best_response;
use super::SolverOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    /// Multiplier applied to the price shape (the uniform price itself for
    /// the uniform scheme).
    pub scale: f64,
    pub prices: PricingVector,
    pub q: ParticipationVector,
    pub spend: f64,
    pub iterations: usize,
}

fn respond(shape: &[f64], scale: f64, profiles: &[ClientProfile], constants: &GameConstants) -> (Vec<f64>, Vec<f64>, f64) {
    let prices: Vec<f64> = shape.iter().map(|s| s * scale).collect();
    let q: Vec<f64> = prices
        .iter()
        .zip(profiles)
        .map(|(&p, prof)| client_best_response(p, prof, constants))
        .collect();
    let spend = compensated_sum(prices.iter().zip(&q).map(|(p, q)| p * q));
    (prices, q, spend)
}

fn exhaust_budget(
    shape: &[f64],
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<BaselineOutcome> {
    constants.validate_for(profiles)?;
    opts.validate()?;
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::InvalidParameter(format!("budget {budget} must be nonnegative")));
    }
    let outcome = |scale: f64, iterations: usize| {
        let (prices, q, spend) = respond(shape, scale, profiles, constants);
        BaselineOutcome {
            scale,
            prices: PricingVector(prices),
            q: ParticipationVector(q),
            spend,
            iterations,
        }
    };
    if budget == 0.0 {
        return Ok(outcome(0.0, 0));
    }
    let slack = opts.budget_slack(budget);
    let mut hi = 1.0;
    let mut iterations = 0;
    while respond(shape, hi, profiles, constants).2 < budget {
        hi *= 2.0;
        iterations += 1;
        if !hi.is_finite() || iterations > opts.max_iter {
            return Err(Error::Bracket(format!("no price scale reaches budget {budget}")));
        }
    }
    let mut lo = 0.0;
    let mut best = (f64::INFINITY, hi);
    while iterations < opts.max_iter {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let spend = respond(shape, mid, profiles, constants).2;
        let gap = (spend - budget).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if gap <= slack || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if spend < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > 1e-6 * budget.max(1.0) {
        return Err(Error::Bracket(format!(
            "price scale bisection stalled {} away from budget {budget}",
            best.0
        )));
    }
    Ok(outcome(best.1, iterations))
}

/// One price for every client, scaled to spend the budget.
pub fn baseline_uniform(
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<BaselineOutcome> {
    exhaust_budget(&vec![1.0; profiles.len()], profiles, constants, budget, opts)
}

/// Prices proportional to datasize, scaled to spend the budget.
///
/// The reported scale multiplies `d_n / max_m d_m`, so equal datasizes give
/// exactly the uniform outcome.
pub fn baseline_weighted(
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<BaselineOutcome> {
    let d_max = profiles.iter().map(|p| p.datasize).fold(0.0_f64, f64::max);
    let shape: Vec<f64> = profiles.iter().map(|p| p.datasize / d_max).collect();
    exhaust_budget(&shape, profiles, constants, budget, opts)
}
