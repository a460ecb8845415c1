//! Post-solve diagnostics for equilibrium properties.

use serde::{Deserialize, Serialize};

use crate::domain::{ClientProfile, EquilibriumResult, GameConstants};
use crate::numeric::rel_diff;

use super::client::bound_scale;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub interior_count: usize,
    /// Largest relative spread of `4 c q^3 / K + v` over interior clients
    /// (`K = (alpha/R) a^2 G^2`); `None` with fewer than two interior clients.
    pub kkt_residual: Option<f64>,
    /// `|spend - B|`; zero is not expected when every cap binds.
    pub budget_residual: f64,
    pub budget_tight_required: bool,
    /// Interior clients whose price sign disagrees with `v^t - v`.
    pub threshold_violations: Vec<usize>,
    /// Interior pairs `(i, j)` whose price ordering breaks the
    /// cost-quality/value ordering rule.
    pub ordering_violations: Vec<(usize, usize)>,
    pub ordering_pairs_checked: usize,
    pub negative_payments: usize,
}

impl EquilibriumReport {
    pub fn threshold_consistent(&self) -> bool {
        self.threshold_violations.is_empty()
    }

    pub fn ordering_consistent(&self) -> bool {
        self.ordering_violations.is_empty()
    }
}

/// Relative margin below which `v_n` is treated as sitting on the threshold.
const THRESHOLD_MARGIN: f64 = 1e-9;

/// `1/lambda` implied by an interior client's participation.
pub(crate) fn implied_inverse_multiplier(q: f64, profile: &ClientProfile, constants: &GameConstants) -> f64 {
    4.0 * profile.cost_coeff * q.powi(3) / bound_scale(profile, constants) + profile.intrinsic_pref
}

pub fn verify_equilibrium(
    result: &EquilibriumResult,
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
) -> EquilibriumReport {
    let interior: Vec<usize> = result.interior_indices().collect();

    let kkt_residual = (interior.len() >= 2).then(|| {
        let vals: Vec<f64> = interior
            .iter()
            .map(|&i| implied_inverse_multiplier(result.q_star[i], &profiles[i], constants))
            .collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        rel_diff(max, min, f64::MIN_POSITIVE)
    });

    let vt = result.v_threshold;
    let threshold_violations = interior
        .iter()
        .copied()
        .filter(|&i| {
            let v = profiles[i].intrinsic_pref;
            let price = result.p_star[i];
            if rel_diff(v, vt, f64::MIN_POSITIVE) <= THRESHOLD_MARGIN {
                return false;
            }
            if v < vt {
                price <= 0.0
            } else {
                price >= 0.0
            }
        })
        .collect();

    let mut ordering_violations = Vec::new();
    let mut ordering_pairs_checked = 0;
    for &i in &interior {
        for &j in &interior {
            let (pi, pj) = (&profiles[i], &profiles[j]);
            let strength = |p: &ClientProfile| p.cost_coeff * p.weight * p.grad_bound;
            if !(strength(pi) > strength(pj)) {
                continue;
            }
            let (vi, vj) = (pi.intrinsic_pref, pj.intrinsic_pref);
            let (xi, xj) = (result.p_star[i], result.p_star[j]);
            let ok = if vi < vj && vj < vt {
                xi > xj && xj > 0.0
            } else if vi > vj && vj > vt {
                xi < xj && xj < 0.0
            } else {
                continue;
            };
            ordering_pairs_checked += 1;
            if !ok {
                ordering_violations.push((i, j));
            }
        }
    }

    EquilibriumReport {
        interior_count: interior.len(),
        kkt_residual,
        budget_residual: (result.spend - budget).abs(),
        budget_tight_required: !result.caps_binding,
        threshold_violations,
        ordering_violations,
        ordering_pairs_checked,
        negative_payments: result.negative_payment_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_population;
    use crate::game::{server_solve, SolverOptions};

    #[test]
    fn high_value_client_pays_the_server() {
        let p = make_population(
            &[3.0, 2.0, 1.0],
            &[1.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0],
            &[0.0, 0.05, 2.0],
            &[1.0, 1.0, 1.0],
        )
        .unwrap();
        let k = GameConstants::new(1.0, 0.0, 1, 1).with_q_floor(1e-3);
        let r = server_solve(&p, &k, 0.5, &SolverOptions::default()).unwrap();
        let rep = verify_equilibrium(&r, &p, &k, 0.5);
        assert!(rep.threshold_consistent());
        assert!(rep.kkt_residual.unwrap() <= 1e-6);
        assert!(rep.budget_residual <= 1e-6);
        let above: Vec<usize> = (0..3)
            .filter(|&i| r.interior[i] && p[i].intrinsic_pref > r.v_threshold)
            .collect();
        assert!(!above.is_empty(), "lambda {} vt {}", r.lambda_star, r.v_threshold);
        for i in above {
            assert!(r.payments[i] < 0.0);
        }
    }
}
