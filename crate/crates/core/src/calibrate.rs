//! Estimates of the game parameters that come from training itself: per-client
//! gradient bounds, the bound coefficient alpha, and local-optimum losses.

use std::collections::BTreeMap;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::penalty_unchecked;
use crate::domain::{ClientProfile, FederatedDataset, Shard};
use crate::error::{Error, Result};
use crate::fltrain::{aggregate, global_objective, gradient, local_rng, local_sgd_traced, ModelState, TrainConfig};

/// Floor applied to gradient-bound estimates of degenerate shards.
pub const GRAD_BOUND_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradEstimator {
    /// Largest observed norm.
    Max,
    /// Empirical quantile of the observed norms, `level` in `(0, 1]`.
    Quantile { level: f64 },
}

impl GradEstimator {
    fn apply(&self, mut norms: Vec<f64>) -> f64 {
        match *self {
            GradEstimator::Max => norms.iter().copied().fold(0.0, f64::max),
            GradEstimator::Quantile { level } => {
                norms.sort_by(f64::total_cmp);
                let k = ((level * norms.len() as f64).ceil() as usize).clamp(1, norms.len());
                norms[k - 1]
            }
        }
    }
}

/// Runs `pilot_rounds` rounds with every client participating and returns,
/// per client, the chosen statistic of its local stochastic gradient norms.
pub fn estimate_grad_bounds(
    ds: &FederatedDataset,
    cfg: &TrainConfig,
    pilot_rounds: u32,
    seed: u64,
    estimator: GradEstimator,
) -> Result<Vec<f64>> {
    if pilot_rounds == 0 {
        return Err(Error::InvalidParameter("pilot needs at least one round".into()));
    }
    if let GradEstimator::Quantile { level } = estimator {
        if !(level > 0.0 && level <= 1.0) {
            return Err(Error::InvalidParameter(format!("quantile level {level} not in (0, 1]")));
        }
    }
    let n = ds.num_clients();
    let full = vec![1.0; n];
    TrainConfig {
        participation: full.clone(),
        ..cfg.clone()
    }
    .validate(n)?;
    if let Some(i) = ds.shards.iter().position(Shard::is_empty) {
        return Err(Error::EmptyShard(i));
    }
    let profiles = pilot_profiles(ds);
    let mut model = ModelState::for_dataset(ds);
    let mut norms: Vec<Vec<f64>> = vec![Vec::new(); n];
    for r in 0..pilot_rounds as usize {
        let lr = cfg.lr.rate(r, cfg.local_steps);
        let results: Vec<(usize, Array2<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|c| {
                let mut rng = local_rng(seed, r, c);
                let mut trace = Vec::with_capacity(cfg.local_steps as usize);
                local_sgd_traced(&model.w, &ds.shards[c], cfg.local_steps, cfg.batch, lr, cfg.l2, &mut rng, Some(&mut trace))
                    .map(|w| (c, w, trace))
            })
            .collect::<Result<_>>()?;
        let mut updates = BTreeMap::new();
        for (c, w, trace) in results {
            norms[c].extend(trace);
            updates.insert(c, w);
        }
        model = aggregate(&model, &updates, &full, &profiles)?;
    }
    Ok(norms
        .into_iter()
        .enumerate()
        .map(|(c, trace)| {
            let g = estimator.apply(trace);
            if g < GRAD_BOUND_FLOOR || !g.is_finite() {
                log::warn!("client {c}: gradient bound estimate {g} floored at {GRAD_BOUND_FLOOR}");
                GRAD_BOUND_FLOOR
            } else {
                g
            }
        })
        .collect())
}

/// Profiles carrying only the datasize weights, enough for aggregation.
fn pilot_profiles(ds: &FederatedDataset) -> Vec<ClientProfile> {
    ds.weights()
        .into_iter()
        .zip(ds.shard_sizes())
        .enumerate()
        .map(|(index, (weight, d))| ClientProfile {
            index,
            datasize: d as f64,
            weight,
            grad_bound: 1.0,
            cost_coeff: 1.0,
            intrinsic_pref: 0.0,
            q_max: 1.0,
        })
        .collect()
}

/// Final loss of one pilot run under a given participation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotObservation {
    pub participation: Vec<f64>,
    /// Runs are only compared with runs sharing the seed.
    pub seed: u64,
    pub loss: f64,
}

/// Least-squares slope through the origin of loss differences against
/// differences of `(1/R) sum_n (1 - q_n) a_n^2 G_n^2 / q_n`, over all pairs
/// of observations with a common seed. Clamped at zero.
pub fn estimate_alpha(pilots: &[PilotObservation], profiles: &[ClientProfile], rounds: u32) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::InvalidParameter("rounds must be at least 1".into()));
    }
    let mut regressors = Vec::with_capacity(pilots.len());
    for p in pilots {
        if p.participation.len() != profiles.len() {
            return Err(Error::LengthMismatch {
                what: "pilot participation vector",
                expected: profiles.len(),
                found: p.participation.len(),
            });
        }
        if let Some(i) = p.participation.iter().position(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::Domain {
                index: i,
                q: p.participation[i],
                reason: "pilot participation must lie in (0, 1]",
            });
        }
        regressors.push(penalty_unchecked(&p.participation, profiles) / rounds as f64);
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    let mut usable = false;
    for i in 0..pilots.len() {
        for j in i + 1..pilots.len() {
            if pilots[i].seed != pilots[j].seed {
                continue;
            }
            let dx = regressors[i] - regressors[j];
            if dx.abs() < 1e-12 {
                continue;
            }
            usable = true;
            sxy += dx * (pilots[i].loss - pilots[j].loss);
            sxx += dx * dx;
        }
    }
    if !usable {
        return Err(Error::IllConditioned(
            "no pair of same-seed pilots differs in the bound regressor by 1e-12 or more".into(),
        ));
    }
    Ok((sxy / sxx).max(0.0))
}

/// Stopping rule for local-optimum training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimumOptions {
    /// Target gradient norm of the regularized objective.
    pub grad_tol: f64,
    pub max_iter: u64,
}

impl Default for OptimumOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOptima {
    /// Regularized global objective at each client's own minimizer.
    pub per_client: Vec<f64>,
    /// Regularized global objective at the pooled minimizer, a proxy for the
    /// true minimum.
    pub pooled_proxy: f64,
}

impl LocalOptima {
    /// `v_n (F(w_n*) - F* - beta/R)`, the participation-independent part of
    /// each client's intrinsic value.
    pub fn value_offsets(&self, profiles: &[ClientProfile], beta_over_rounds: f64) -> Vec<f64> {
        profiles
            .iter()
            .zip(&self.per_client)
            .map(|(p, f)| p.intrinsic_pref * (f - self.pooled_proxy - beta_over_rounds))
            .collect()
    }
}

struct RegularizedLoss<'a> {
    shard: &'a Shard,
    shape: (usize, usize),
    l2: f64,
}

impl RegularizedLoss<'_> {
    fn weights(&self, p: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec(self.shape, p.to_vec()).expect("parameter length matches shape")
    }
}

impl CostFunction for RegularizedLoss<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let w = self.weights(p);
        let norm_sq: f64 = p.iter().map(|v| v * v).sum();
        Ok(crate::fltrain::shard_loss(&w, self.shard) + 0.5 * self.l2 * norm_sq)
    }
}

impl Gradient for RegularizedLoss<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let w = self.weights(p);
        Ok(gradient(&w, self.shard.x.view(), &self.shard.y, self.l2).into_raw_vec_and_offset().0)
    }
}

/// Minimizes the regularized cross-entropy of one shard with L-BFGS from `w = 0`.
pub fn minimize_shard(shard: &Shard, classes: usize, l2: f64, opts: &OptimumOptions) -> Result<ModelState> {
    if shard.is_empty() {
        return Err(Error::EmptyShard(usize::MAX));
    }
    let shape = (classes, shard.features() + 1);
    let problem = RegularizedLoss { shard, shape, l2 };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(opts.grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let start = vec![0.0; shape.0 * shape.1];
    let run = Executor::new(problem, solver)
        .configure(|state| state.param(start).max_iters(opts.max_iter))
        .run();
    let problem = RegularizedLoss { shard, shape, l2 };
    let (param, iterations) = match run {
        Ok(res) => {
            let st = res.state();
            (st.get_best_param().cloned().unwrap_or_default(), st.get_iter())
        }
        Err(e) => return Err(Error::IllConditioned(format!("local optimizer failed: {e}"))),
    };
    let g = problem.gradient(&param).expect("gradient is infallible");
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(grad_norm <= opts.grad_tol * 10.0) {
        return Err(Error::NonConvergence {
            iterations: iterations as usize,
            grad_norm,
        });
    }
    Ok(ModelState {
        w: problem.weights(&param),
        round: 0,
    })
}

/// Trains each client's model on its own shard and a model on the pooled
/// training data, then evaluates the regularized global objective at each.
pub fn local_optimum_losses(ds: &FederatedDataset, l2: f64, opts: &OptimumOptions) -> Result<LocalOptima> {
    ds.validate()?;
    let per_client = ds
        .shards
        .par_iter()
        .map(|s| minimize_shard(s, ds.classes, l2, opts).and_then(|w| global_objective(&w, ds, l2)))
        .collect::<Result<Vec<f64>>>()?;
    let pooled = minimize_shard(&ds.pooled(), ds.classes, l2, opts)?;
    Ok(LocalOptima {
        per_client,
        pooled_proxy: global_objective(&pooled, ds, l2)?,
    })
}
