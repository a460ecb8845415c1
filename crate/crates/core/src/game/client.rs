//! Stage II: client utilities, best responses and their inverse.

use crate::domain::{ClientProfile, GameConstants};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// `(alpha / R) a_n^2 G_n^2`.
pub(crate) fn bound_scale(profile: &ClientProfile, constants: &GameConstants) -> f64 {
    constants.alpha_over_rounds() * profile.data_quality_sq()
}

/// Utility of client `index` choosing `q_n` at price `price`, with the other
/// clients' participation read from `q` (entry `index` is replaced by `q_n`).
///
/// `value_offset` carries the q-independent part of the intrinsic value,
/// `v_n (F(w_n*) - F* - beta / R)`. Returns negative infinity when the client
/// values the model and some participation level is zero.
///
/// # Panics
/// If `index` is out of range or `q` and `profiles` differ in length.
pub fn client_utility(
    index: usize,
    q_n: f64,
    price: f64,
    profiles: &[ClientProfile],
    constants: &GameConstants,
    q: &[f64],
    value_offset: f64,
) -> f64 {
    assert_eq!(q.len(), profiles.len(), "participation vector length");
    let me = &profiles[index];
    let monetary = price * q_n - me.cost_coeff * q_n * q_n;
    if me.intrinsic_pref == 0.0 {
        return monetary + value_offset;
    }
    let mut any_zero = false;
    let penalty = compensated_sum(profiles.iter().enumerate().map(|(m, p)| {
        let qm = if m == index { q_n } else { q[m] };
        if qm <= 0.0 {
            any_zero = true;
            0.0
        } else {
            (1.0 - qm) * p.data_quality_sq() / qm
        }
    }));
    if any_zero {
        return f64::NEG_INFINITY;
    }
    monetary - me.intrinsic_pref * constants.alpha_over_rounds() * penalty + value_offset
}

/// First-order residual `P + v K / q^2 - 2 c q`, decreasing in `q`.
fn foc_residual(price: f64, vk: f64, cost: f64, q: f64) -> f64 {
    price + vk / (q * q) - 2.0 * cost * q
}

const BEST_RESPONSE_TOL: f64 = 1e-12;

/// The unique maximizer of the client's concave utility on `[0, q_max]`.
pub fn client_best_response(price: f64, profile: &ClientProfile, constants: &GameConstants) -> f64 {
    let c = profile.cost_coeff;
    let vk = profile.intrinsic_pref * bound_scale(profile, constants);
    let q_max = profile.q_max;
    if vk == 0.0 {
        // Utility is P q - c q^2: linear first-order condition.
        return if price <= 0.0 {
            0.0
        } else {
            (price / (2.0 * c)).min(q_max)
        };
    }
    if foc_residual(price, vk, c, q_max) >= 0.0 {
        return q_max;
    }
    // The residual diverges to +inf at 0, so a positive lower bracket exists.
    let mut lo = constants.q_floor * 1e-3;
    while foc_residual(price, vk, c, lo) <= 0.0 {
        lo *= 0.5;
    }
    let mut hi = q_max;
    while hi - lo > BEST_RESPONSE_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if foc_residual(price, vk, c, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Price at which `q_n` is the client's interior best response:
/// `P = 2 c q - v (alpha / R) a^2 G^2 / q^2`.
pub fn inverse_price(q_n: f64, profile: &ClientProfile, constants: &GameConstants) -> Result<f64> {
    if !(q_n >= constants.q_floor) {
        return Err(Error::Domain {
            index: profile.index,
            q: q_n,
            reason: "below q_floor",
        });
    }
    Ok(2.0 * profile.cost_coeff * q_n
        - profile.intrinsic_pref * bound_scale(profile, constants) / (q_n * q_n))
}

/// Participation minimizing the budget Lagrangian at multiplier `lambda`,
/// clipped to `[q_floor, q_max]`.
pub fn kkt_participation(lambda: f64, profile: &ClientProfile, constants: &GameConstants) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("multiplier {lambda} must be positive")));
    }
    let inv = 1.0 / lambda;
    if inv <= profile.intrinsic_pref {
        return Ok(constants.q_floor);
    }
    let root = (bound_scale(profile, constants) * (inv - profile.intrinsic_pref)
        / (4.0 * profile.cost_coeff))
        .cbrt();
    Ok(root.clamp(constants.q_floor, profile.q_max))
}
