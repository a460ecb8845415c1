//! Variance and convergence-gap bounds for unbiased aggregation under
//! independent participation levels.
//!
//! Per-client terms are summed in index order with compensated summation so
//! equal inputs give bit-identical outputs.

use crate::domain::{ClientProfile, GameConstants};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

fn check_inputs(q: &[f64], profiles: &[ClientProfile]) -> Result<()> {
    if q.len() != profiles.len() {
        return Err(Error::LengthMismatch {
            what: "participation vector",
            expected: profiles.len(),
            found: q.len(),
        });
    }
    for (i, &qn) in q.iter().enumerate() {
        if !(qn > 0.0) {
            return Err(Error::Domain {
                index: i,
                q: qn,
                reason: "bound requires strictly positive participation",
            });
        }
    }
    Ok(())
}

/// `sum_n (1 - q_n) a_n^2 G_n^2 / q_n`.
pub fn participation_penalty(q: &[f64], profiles: &[ClientProfile]) -> Result<f64> {
    check_inputs(q, profiles)?;
    Ok(penalty_unchecked(q, profiles))
}

pub(crate) fn penalty_unchecked(q: &[f64], profiles: &[ClientProfile]) -> f64 {
    compensated_sum(
        q.iter()
            .zip(profiles)
            .map(|(&qn, p)| (1.0 - qn) * p.data_quality_sq() / qn),
    )
}

/// Upper bound on `E||w^{r+1} - w_bar^{r+1}||^2` for learning rate `eta`.
pub fn variance_bound(
    q: &[f64],
    profiles: &[ClientProfile],
    eta: f64,
    local_steps: u32,
) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate {eta} must be positive")));
    }
    let step = eta * local_steps as f64;
    Ok(4.0 * participation_penalty(q, profiles)? * step * step)
}

/// Bound on `E[F(w^R(q))] - F*`: `(alpha * penalty(q) + beta) / R`.
pub fn convergence_gap_bound(
    q: &[f64],
    profiles: &[ClientProfile],
    constants: &GameConstants,
) -> Result<f64> {
    let penalty = participation_penalty(q, profiles)?;
    Ok((constants.alpha * penalty + constants.beta) / constants.rounds as f64)
}

/// Analytic gradient of [`convergence_gap_bound`] with respect to `q`.
pub fn bound_gradient(
    q: &[f64],
    profiles: &[ClientProfile],
    constants: &GameConstants,
) -> Result<Vec<f64>> {
    check_inputs(q, profiles)?;
    let scale = constants.alpha_over_rounds();
    Ok(q.iter()
        .zip(profiles)
        .map(|(&qn, p)| -scale * p.data_quality_sq() / (qn * qn))
        .collect())
}
