//! Domain types shared by the bound, game, training and calibration modules.

use std::ops::Deref;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// One client of the participation game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub index: usize,
    /// Sample count `d_n`.
    pub datasize: f64,
    /// Aggregation weight `a_n = d_n / sum_m d_m`.
    pub weight: f64,
    /// Per-client bound `G_n` on the stochastic gradient norm.
    pub grad_bound: f64,
    /// Quadratic cost coefficient `c_n`.
    pub cost_coeff: f64,
    /// Preference `v_n` for global-model improvement.
    pub intrinsic_pref: f64,
    /// Participation cap `q_max`.
    pub q_max: f64,
}

impl ClientProfile {
    /// `a_n^2 G_n^2`, the client's contribution scale in the bound.
    pub fn data_quality_sq(&self) -> f64 {
        let ag = self.weight * self.grad_bound;
        ag * ag
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidClient {
            index: self.index,
            reason,
        };
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(bad(format!("weight {} not in (0, 1]", self.weight)));
        }
        if !(self.grad_bound > 0.0 && self.grad_bound.is_finite()) {
            return Err(bad(format!("gradient bound {} must be positive", self.grad_bound)));
        }
        if !(self.cost_coeff > 0.0 && self.cost_coeff.is_finite()) {
            return Err(bad(format!("cost coefficient {} must be positive", self.cost_coeff)));
        }
        if !(self.intrinsic_pref >= 0.0 && self.intrinsic_pref.is_finite()) {
            return Err(bad(format!(
                "intrinsic preference {} must be nonnegative",
                self.intrinsic_pref
            )));
        }
        if !(self.q_max > 0.0 && self.q_max <= 1.0) {
            return Err(bad(format!("q_max {} not in (0, 1]", self.q_max)));
        }
        Ok(())
    }
}

/// Builds a population, normalizing weights from datasizes.
pub fn make_population(
    datasizes: &[f64],
    grad_bounds: &[f64],
    cost_coeffs: &[f64],
    intrinsic_prefs: &[f64],
    q_maxes: &[f64],
) -> Result<Vec<ClientProfile>> {
    let n = datasizes.len();
    if n == 0 {
        return Err(Error::InvalidParameter("population must have at least one client".into()));
    }
    for (what, len) in [
        ("grad_bounds", grad_bounds.len()),
        ("cost_coeffs", cost_coeffs.len()),
        ("intrinsic_prefs", intrinsic_prefs.len()),
        ("q_maxes", q_maxes.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    if let Some(index) = datasizes.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidClient {
            index,
            reason: format!("datasize {} must be positive", datasizes[index]),
        });
    }
    let total = compensated_sum(datasizes.iter().copied());
    let profiles: Vec<ClientProfile> = (0..n)
        .map(|i| ClientProfile {
            index: i,
            datasize: datasizes[i],
            weight: datasizes[i] / total,
            grad_bound: grad_bounds[i],
            cost_coeff: cost_coeffs[i],
            intrinsic_pref: intrinsic_prefs[i],
            q_max: q_maxes[i],
        })
        .collect();
    validate_population(&profiles)?;
    Ok(profiles)
}

/// Checks per-client invariants and that weights sum to one.
pub fn validate_population(profiles: &[ClientProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::InvalidParameter("population must have at least one client".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    let total = compensated_sum(profiles.iter().map(|p| p.weight));
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "client weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Constituents of the additive bound constant, for deriving `beta` (and
/// optionally `alpha`) from problem constants instead of supplying them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstituents {
    pub smoothness: f64,
    pub strong_convexity: f64,
    /// Per-client stochastic gradient variance bounds `sigma_n^2`.
    pub grad_variance: Vec<f64>,
    /// Heterogeneity gap `F* - sum a_n F_n*`.
    pub heterogeneity_gap: f64,
    /// `||w_0 - w*||^2`.
    pub init_distance_sq: f64,
}

impl BoundConstituents {
    pub fn alpha(&self, local_steps: u32) -> f64 {
        let (l, mu) = (self.smoothness, self.strong_convexity);
        8.0 * l * local_steps as f64 / (mu * mu)
    }

    pub fn beta(&self, profiles: &[ClientProfile], local_steps: u32) -> Result<f64> {
        if self.grad_variance.len() != profiles.len() {
            return Err(Error::LengthMismatch {
                what: "grad_variance",
                expected: profiles.len(),
                found: self.grad_variance.len(),
            });
        }
        let (l, mu) = (self.smoothness, self.strong_convexity);
        let e = local_steps as f64;
        let a0 = compensated_sum(
            profiles
                .iter()
                .zip(&self.grad_variance)
                .map(|(p, s2)| p.weight * p.weight * s2),
        ) + 8.0
            * compensated_sum(profiles.iter().map(|p| p.weight * p.grad_bound * p.grad_bound))
            * (e - 1.0)
            * (e - 1.0);
        Ok(2.0 * l / (mu * mu * e) * a0
            + 12.0 * l * l / (mu * mu * e) * self.heterogeneity_gap
            + 4.0 * l * l / (mu * e) * self.init_distance_sq)
    }
}

/// Constants of the convergence bound and the solver floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConstants {
    pub alpha: f64,
    pub beta: f64,
    pub rounds: u32,
    pub local_steps: u32,
    /// Lower clamp on participation used by the solvers.
    pub q_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constituents: Option<BoundConstituents>,
}

impl GameConstants {
    pub fn new(alpha: f64, beta: f64, rounds: u32, local_steps: u32) -> Self {
        Self {
            alpha,
            beta,
            rounds,
            local_steps,
            q_floor: 0.01,
            constituents: None,
        }
    }

    pub fn with_q_floor(mut self, q_floor: f64) -> Self {
        self.q_floor = q_floor;
        self
    }

    /// Replaces `beta` with the value implied by `constituents`.
    pub fn with_derived_beta(
        mut self,
        constituents: BoundConstituents,
        profiles: &[ClientProfile],
    ) -> Result<Self> {
        self.beta = constituents.beta(profiles, self.local_steps)?;
        self.constituents = Some(constituents);
        Ok(self)
    }

    pub fn alpha_over_rounds(&self) -> f64 {
        self.alpha / self.rounds as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta {} must be nonnegative", self.beta)));
        }
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::InvalidParameter("rounds and local steps must be at least 1".into()));
        }
        if !(self.q_floor > 0.0 && self.q_floor < 1.0) {
            return Err(Error::InvalidParameter(format!("q_floor {} not in (0, 1)", self.q_floor)));
        }
        Ok(())
    }

    /// Validates the constants together with a population (`q_floor < min q_max`).
    pub fn validate_for(&self, profiles: &[ClientProfile]) -> Result<()> {
        self.validate()?;
        validate_population(profiles)?;
        if let Some(p) = profiles.iter().find(|p| p.q_max <= self.q_floor) {
            return Err(Error::InvalidClient {
                index: p.index,
                reason: format!("q_max {} must exceed q_floor {}", p.q_max, self.q_floor),
            });
        }
        Ok(())
    }
}

macro_rules! vector_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl $name {
            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

vector_newtype!(ParticipationVector);
vector_newtype!(PricingVector);

impl ParticipationVector {
    pub fn uniform(n: usize, q: f64) -> Self {
        Self(vec![q; n])
    }

    /// Checks `0 <= q_n <= q_max` for user-supplied vectors.
    pub fn validate(&self, profiles: &[ClientProfile]) -> Result<()> {
        if self.len() != profiles.len() {
            return Err(Error::LengthMismatch {
                what: "participation vector",
                expected: profiles.len(),
                found: self.len(),
            });
        }
        for (p, &q) in profiles.iter().zip(self.iter()) {
            if !(0.0..=p.q_max).contains(&q) {
                return Err(Error::Domain {
                    index: p.index,
                    q,
                    reason: "must lie in [0, q_max]",
                });
            }
        }
        Ok(())
    }
}

/// A solved game instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub q_star: ParticipationVector,
    pub p_star: PricingVector,
    /// Budget multiplier; when every cap binds this is the largest multiplier
    /// that keeps all clients at their caps.
    pub lambda_star: f64,
    /// Payment-direction threshold `1 / (3 lambda*)`.
    pub v_threshold: f64,
    pub spend: f64,
    pub budget: f64,
    pub bound_value: f64,
    pub payments: Vec<f64>,
    pub interior: Vec<bool>,
    /// True when the budget buys every client its cap.
    pub caps_binding: bool,
    pub solver: String,
    pub iterations: usize,
}

impl EquilibriumResult {
    pub fn interior_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.interior
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn negative_payment_count(&self) -> usize {
        self.p_star.iter().filter(|&&p| p < 0.0).count()
    }
}

/// Labeled samples: row-major features and class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl Shard {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::CountMismatch {
                images: x.nrows(),
                labels: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn empty(features: usize) -> Self {
        Self {
            x: Array2::zeros((0, features)),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Concatenates shards in order.
    pub fn concat<'a, I: IntoIterator<Item = &'a Shard>>(features: usize, shards: I) -> Shard {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for s in shards {
            rows.extend(s.x.iter().copied());
            y.extend_from_slice(&s.y);
        }
        let x = Array2::from_shape_vec((y.len(), features), rows)
            .expect("shards share the feature dimension");
        Shard { x, y }
    }
}

/// Per-client training shards plus a shared test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub shards: Vec<Shard>,
    pub test: Shard,
    pub classes: usize,
    pub features: usize,
    /// Declared total: training shards plus the test pool.
    pub total_samples: usize,
}

impl FederatedDataset {
    pub fn new(shards: Vec<Shard>, test: Shard, classes: usize, features: usize) -> Result<Self> {
        let total_samples = shards.iter().map(Shard::len).sum::<usize>() + test.len();
        let ds = Self {
            shards,
            test,
            classes,
            features,
            total_samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.classes == 0 || self.features == 0 {
            return Err(Error::InvalidParameter("classes and features must be positive".into()));
        }
        for (i, s) in self.shards.iter().enumerate().chain(std::iter::once((usize::MAX, &self.test))) {
            if i != usize::MAX && s.is_empty() {
                return Err(Error::EmptyShard(i));
            }
            if s.features() != self.features {
                return Err(Error::Format(format!(
                    "shard has {} features, expected {}",
                    s.features(),
                    self.features
                )));
            }
            if let Some(&bad) = s.y.iter().find(|&&c| c >= self.classes) {
                return Err(Error::Format(format!(
                    "label {bad} outside [0, {})",
                    self.classes
                )));
            }
        }
        let sum = self.shards.iter().map(Shard::len).sum::<usize>() + self.test.len();
        if sum != self.total_samples {
            return Err(Error::Format(format!(
                "shard sizes sum to {sum}, declared total is {}",
                self.total_samples
            )));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Shard::len).collect()
    }

    /// `a_n = d_n / sum d` over training shards.
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.shards.iter().map(Shard::len).sum();
        self.shards
            .iter()
            .map(|s| s.len() as f64 / total as f64)
            .collect()
    }

    /// All training samples in client order.
    pub fn pooled(&self) -> Shard {
        Shard::concat(self.features, &self.shards)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn equal_datasizes_split_weight_evenly() {
        let p = make_population(&[1.0, 1.0], &ones(2), &ones(2), &[0.0, 0.0], &ones(2)).unwrap();
        assert_eq!(p[0].weight, 0.5);
        assert_eq!(p[1].weight, 0.5);
    }

    #[test]
    fn weights_are_direct_ratios() {
        let p = make_population(&[3.0, 1.0], &ones(2), &ones(2), &[0.0, 0.0], &ones(2)).unwrap();
        assert_eq!(p[0].weight, 0.75);
        assert_eq!(p[1].weight, 0.25);
    }

    #[test]
    fn zero_datasize_names_the_client() {
        let err = make_population(&[1.0, 2.0, 0.0], &ones(3), &ones(3), &ones(3), &ones(3))
            .unwrap_err();
        match err {
            Error::InvalidClient { index, .. } => assert_eq!(index, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let err = make_population(&[1.0, 2.0], &ones(3), &ones(2), &ones(2), &ones(2)).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { what: "grad_bounds", .. }));
    }

    #[test]
    fn invalid_profile_fields_rejected() {
        assert!(make_population(&[1.0], &[0.0], &[1.0], &[0.0], &[1.0]).is_err());
        assert!(make_population(&[1.0], &[1.0], &[-1.0], &[0.0], &[1.0]).is_err());
        assert!(make_population(&[1.0], &[1.0], &[1.0], &[-0.5], &[1.0]).is_err());
        assert!(make_population(&[1.0], &[1.0], &[1.0], &[0.0], &[1.5]).is_err());
    }

    #[test]
    fn q_floor_must_sit_below_caps() {
        let p = make_population(&[1.0], &[1.0], &[1.0], &[0.0], &[0.01]).unwrap();
        let k = GameConstants::new(1.0, 0.0, 1, 1);
        assert!(k.validate_for(&p).is_err());
        assert!(k.clone().with_q_floor(0.005).validate_for(&p).is_ok());
    }

    #[test]
    fn derived_beta_matches_hand_computation() {
        let p = make_population(&[1.0, 1.0], &[1.0, 2.0], &ones(2), &[0.0, 0.0], &ones(2)).unwrap();
        let c = BoundConstituents {
            smoothness: 2.0,
            strong_convexity: 1.0,
            grad_variance: vec![1.0, 1.0],
            heterogeneity_gap: 0.5,
            init_distance_sq: 3.0,
        };
        // E = 2: A0 = 0.25 + 0.25 + 8 * (0.5 + 2.0) * 1 = 20.5
        // beta = 2*2/2 * 20.5 + 12*4/2 * 0.5 + 4*4/2 * 3 = 41 + 12 + 24 = 77
        let k = GameConstants::new(1.0, 0.0, 10, 2).with_derived_beta(c.clone(), &p).unwrap();
        assert!((k.beta - 77.0).abs() < 1e-12);
        assert_eq!(c.alpha(2), 32.0);
    }

    #[test]
    fn participation_vector_domain() {
        let p = make_population(&[1.0, 1.0], &ones(2), &ones(2), &[0.0, 0.0], &[1.0, 0.5]).unwrap();
        assert!(ParticipationVector(vec![0.0, 0.5]).validate(&p).is_ok());
        assert!(ParticipationVector(vec![0.2, 0.6]).validate(&p).is_err());
        assert!(ParticipationVector(vec![0.2]).validate(&p).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels_and_empty_shards() {
        let s = Shard::new(Array2::zeros((2, 3)), vec![0, 1]).unwrap();
        assert!(FederatedDataset::new(vec![s.clone()], Shard::empty(3), 2, 3).is_ok());
        assert!(FederatedDataset::new(vec![s.clone()], Shard::empty(3), 1, 3).is_err());
        assert!(matches!(
            FederatedDataset::new(vec![s, Shard::empty(3)], Shard::empty(3), 2, 3),
            Err(Error::EmptyShard(1))
        ));
    }

    proptest! {
        #[test]
        fn weights_always_normalize(sizes in proptest::collection::vec(1.0f64..1e6, 1..50)) {
            let n = sizes.len();
            let p = make_population(&sizes, &ones(n), &ones(n), &vec![0.0; n], &ones(n)).unwrap();
            let total: f64 = compensated_sum(p.iter().map(|c| c.weight));
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}
