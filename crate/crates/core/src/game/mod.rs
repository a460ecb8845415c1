//! Two-stage participation-level game solved by backward induction.
//!
//! Stage II: each client picks the participation probability maximizing
//! payment minus quadratic cost plus its intrinsic value of the bound.
//! Stage I: the server chooses participation targets under its budget and
//! prices them through the clients' inverse best response.

mod baseline;
mod client;
mod msearch;
mod server;
mod verify;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baseline::{baseline_uniform, baseline_weighted, BaselineOutcome};
pub use client::{client_best_response, client_utility, inverse_price, kkt_participation};
pub use msearch::server_solve_m_search;
pub use server::{payment_threshold, price_closed_form, server_solve, total_spend};
pub use verify::{verify_equilibrium, EquilibriumReport};

/// Tolerances shared by the server solvers and baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative multiplier width at which bisection may stop once the spend
    /// is within `1e-6 max(1, B)`; otherwise it runs to float resolution.
    pub lambda_tol: f64,
    /// M-search step as a fraction of the `[0, sum c q_max^2]` range.
    pub m_step: f64,
    /// Rerun the M-search on the two cells around the best grid point.
    pub m_refine: bool,
    pub max_iter: usize,
    /// Budget residual tolerance, relative to `max(1, B)`.
    pub budget_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lambda_tol: 1e-10,
            m_step: 1e-3,
            m_refine: true,
            max_iter: 1000,
            budget_tol: 1e-9,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tol > 0.0 && self.m_step > 0.0 && self.m_step <= 1.0 && self.budget_tol > 0.0)
            || self.max_iter == 0
        {
            return Err(Error::InvalidParameter(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn budget_slack(&self, budget: f64) -> f64 {
        self.budget_tol * budget.abs().max(1.0)
    }
}
