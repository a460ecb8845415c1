//! Cross-check solver: linear search over `M = sum_n c_n q_n^2`.
//!
//! Fixing `M` turns the budget constraint into `2M - sum_n K_n v_n / q_n <= B`
//! with `K_n = (alpha/R) a_n^2 G_n^2`. Each fixed-`M` subproblem is solved by
//! nested bisection: the inner loop finds the multiplier `nu` of the equality
//! `sum c q^2 = M`, the outer loop raises the budget multiplier `rho` until
//! the budget inequality holds. Per-client minimizers of
//! `K (1 - rho v) / q + nu c q^2` are closed-form cube roots.

use rayon::prelude::*;

use crate::domain::{ClientProfile, EquilibriumResult, GameConstants};
use crate::error::Result;
use crate::numeric::compensated_sum;

use super::client::bound_scale;
use super::server::{assemble_result, cap_multiplier, screen_budget, total_spend};
use super::SolverOptions;

const SOLVER: &str = "m-search";

struct Instance<'a> {
    profiles: &'a [ClientProfile],
    constants: &'a GameConstants,
    scales: Vec<f64>,
    budget: f64,
    slack: f64,
}

struct FixedM {
    q: Vec<f64>,
    objective: f64,
}

impl Instance<'_> {
    fn q_at(&self, nu: f64, rho: f64) -> Vec<f64> {
        let floor = self.constants.q_floor;
        self.profiles
            .iter()
            .zip(&self.scales)
            .map(|(p, &k)| {
                let w = 1.0 - rho * p.intrinsic_pref;
                if w <= 0.0 {
                    floor
                } else {
                    (k * w / (2.0 * nu * p.cost_coeff)).cbrt().clamp(floor, p.q_max)
                }
            })
            .collect()
    }

    fn energy(&self, q: &[f64]) -> f64 {
        compensated_sum(q.iter().zip(self.profiles).map(|(q, p)| p.cost_coeff * q * q))
    }

    /// Participation meeting `sum c q^2 = m` at budget multiplier `rho`, if reachable.
    fn match_energy(&self, m: f64, rho: f64) -> Option<Vec<f64>> {
        let floor = self.constants.q_floor;
        let active: Vec<(f64, &ClientProfile)> = self
            .profiles
            .iter()
            .zip(&self.scales)
            .filter_map(|(p, &k)| {
                let w = 1.0 - rho * p.intrinsic_pref;
                (w > 0.0).then_some((k * w, p))
            })
            .collect();
        let tol = 1e-12 * m.max(1e-12);
        if active.is_empty() {
            let q = self.q_at(1.0, rho);
            return ((self.energy(&q) - m).abs() <= tol).then_some(q);
        }
        let mut lo = active
            .iter()
            .map(|(kw, p)| kw / (2.0 * p.cost_coeff * p.q_max.powi(3)))
            .fold(f64::INFINITY, f64::min);
        let mut hi = active
            .iter()
            .map(|(kw, p)| kw / (2.0 * p.cost_coeff * floor.powi(3)))
            .fold(0.0_f64, f64::max);
        let e_max = self.energy(&self.q_at(lo, rho));
        let e_min = self.energy(&self.q_at(hi, rho));
        if m > e_max + tol || m < e_min - tol {
            return None;
        }
        // Energy is non-increasing in nu.
        let mut best = self.q_at(lo, rho);
        let mut best_gap = (e_max - m).abs();
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let q = self.q_at(mid, rho);
            let e = self.energy(&q);
            let gap = (e - m).abs();
            if gap < best_gap {
                best_gap = gap;
                best = q;
            }
            if gap <= tol || hi - lo <= 1e-15 * hi {
                break;
            }
            if e > m {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(best)
    }

    fn spend(&self, q: &[f64]) -> f64 {
        total_spend(q, self.profiles, self.constants).expect("q within [q_floor, q_max]")
    }

    fn objective(&self, q: &[f64]) -> f64 {
        compensated_sum(q.iter().zip(&self.scales).map(|(q, k)| k * (1.0 - q) / q))
    }

    fn solve_fixed_m(&self, m: f64) -> Option<FixedM> {
        let within_budget = |q: &[f64]| self.spend(q) <= self.budget + self.slack;
        let finish = |q: Vec<f64>| FixedM {
            objective: self.objective(&q),
            q,
        };
        if let Some(q) = self.match_energy(m, 0.0) {
            if within_budget(&q) {
                return Some(finish(q));
            }
        }
        let v_min = self
            .profiles
            .iter()
            .map(|p| p.intrinsic_pref)
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        if !v_min.is_finite() {
            return None;
        }
        // Raising rho moves energy toward low-value clients and lowers spend.
        let (mut lo, mut hi) = (0.0, (1.0 / v_min) * (1.0 + 1e-9));
        let mut hi_q = self.match_energy(m, hi);
        if matches!(&hi_q, Some(q) if !within_budget(q)) {
            return None;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            match self.match_energy(m, mid) {
                Some(q) if !within_budget(&q) => lo = mid,
                other => {
                    hi = mid;
                    hi_q = other;
                }
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        hi_q.filter(|q| within_budget(q)).map(finish)
    }
}

/// Best fixed-`M` solution over an evenly spaced grid on `[start, end]`.
fn scan(inst: &Instance<'_>, start: f64, end: f64, points: usize) -> Option<(f64, FixedM)> {
    let grid: Vec<f64> = (0..=points)
        .map(|i| start + (end - start) * i as f64 / points as f64)
        .collect();
    let solved: Vec<Option<FixedM>> = grid.par_iter().map(|&m| inst.solve_fixed_m(m)).collect();
    let mut best: Option<(f64, FixedM)> = None;
    for (m, sol) in grid.into_iter().zip(solved) {
        if let Some(sol) = sol {
            if best.as_ref().is_none_or(|(_, b)| sol.objective < b.objective) {
                best = Some((m, sol));
            }
        }
    }
    best
}

/// Solves the server problem by linear search over `M`; an independent check
/// on [`super::server_solve`].
pub fn server_solve_m_search(
    profiles: &[ClientProfile],
    constants: &GameConstants,
    budget: f64,
    opts: &SolverOptions,
) -> Result<EquilibriumResult> {
    constants.validate_for(profiles)?;
    opts.validate()?;
    if let Some(caps) = screen_budget(profiles, constants, budget)? {
        let lambda = cap_multiplier(profiles, constants);
        return assemble_result(caps, lambda, profiles, constants, budget, true, SOLVER, 0);
    }
    let inst = Instance {
        profiles,
        constants,
        scales: profiles.iter().map(|p| bound_scale(p, constants)).collect(),
        budget,
        slack: opts.budget_slack(budget),
    };
    let range = compensated_sum(profiles.iter().map(|p| p.cost_coeff * p.q_max * p.q_max));
    let points = (1.0 / opts.m_step).round().max(1.0) as usize;
    let step = range / points as f64;
    let mut evaluated = points + 1;
    let (mut m_best, mut best) = scan(&inst, 0.0, range, points).ok_or_else(|| {
        crate::Error::Bracket(format!("no feasible M on the grid of {points} steps over [0, {range}]"))
    })?;
    if opts.m_refine {
        let (a, b) = ((m_best - step).max(0.0), (m_best + step).min(range));
        if let Some((m, sol)) = scan(&inst, a, b, points) {
            if sol.objective <= best.objective {
                m_best = m;
                best = sol;
            }
        }
        evaluated += points + 1;
    }
    log::debug!("m-search: best M {m_best} after {evaluated} evaluations");

    let lambda = implied_multiplier(&best.q, profiles, constants)
        .unwrap_or_else(|| cap_multiplier(profiles, constants));
    assemble_result(best.q, lambda, profiles, constants, budget, false, SOLVER, evaluated)
}

/// Mean of `4 c q^3 / K + v` over interior clients, inverted.
fn implied_multiplier(q: &[f64], profiles: &[ClientProfile], constants: &GameConstants) -> Option<f64> {
    let inv: Vec<f64> = q
        .iter()
        .zip(profiles)
        .filter(|(&qn, p)| qn > constants.q_floor && qn < p.q_max)
        .map(|(&qn, p)| 4.0 * p.cost_coeff * qn.powi(3) / bound_scale(p, constants) + p.intrinsic_pref)
        .collect();
    if inv.is_empty() {
        return None;
    }
    Some(inv.len() as f64 / compensated_sum(inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_population;
    use crate::game::server_solve;

    #[test]
    fn trivial_instance_agrees_with_bisection() {
        let p = make_population(&[1.0], &[1.0], &[1.0], &[0.0], &[1.0]).unwrap();
        let k = GameConstants::new(1.0, 0.0, 1, 1);
        let opts = SolverOptions::default();
        let a = server_solve(&p, &k, 2.0, &opts).unwrap();
        let b = server_solve_m_search(&p, &k, 2.0, &opts).unwrap();
        assert!((a.q_star[0] - b.q_star[0]).abs() < 1e-4);
        assert!((a.p_star[0] - b.p_star[0]).abs() < 1e-4);
        let a = server_solve(&p, &k, 0.5, &opts).unwrap();
        let b = server_solve_m_search(&p, &k, 0.5, &opts).unwrap();
        assert!((a.q_star[0] - b.q_star[0]).abs() < 1e-4, "{:?} {:?}", a.q_star, b.q_star);
        assert!((a.p_star[0] - b.p_star[0]).abs() < 1e-4);
    }

    #[test]
    fn agrees_with_bisection_when_values_bind() {
        let p = make_population(
            &[2.0, 1.0, 1.0],
            &[1.0, 2.0, 1.5],
            &[1.0, 2.0, 0.5],
            &[0.0, 3.0, 8.0],
            &[1.0, 1.0, 1.0],
        )
        .unwrap();
        let k = GameConstants::new(2.0, 0.0, 1, 1);
        let opts = SolverOptions::default();
        let a = server_solve(&p, &k, 1.0, &opts).unwrap();
        let b = server_solve_m_search(&p, &k, 1.0, &opts).unwrap();
        let rel = (a.bound_value - b.bound_value).abs() / a.bound_value;
        assert!(rel < 1e-3, "{} vs {}", a.bound_value, b.bound_value);
        assert!(b.spend <= 1.0 + 1e-6);
    }
}
