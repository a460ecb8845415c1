//! Simulated federated training of multinomial logistic regression with
//! independent Bernoulli client participation and inverse-probability
//! weighted aggregation.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ClientProfile, FederatedDataset, Shard};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// Global model: `classes x (features + 1)` weights, bias in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: Array2<f64>,
    pub round: usize,
}

impl ModelState {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            w: Array2::zeros((classes, features + 1)),
            round: 0,
        }
    }

    pub fn for_dataset(ds: &FederatedDataset) -> Self {
        Self::zeros(ds.classes, ds.features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `eta_r = 2 / (max(8 L, mu E) + mu r)`.
    Theoretical { smoothness: f64, strong_convexity: f64 },
    /// `eta_r = initial * decay^r`.
    Exponential { initial: f64, decay: f64 },
}

impl LrSchedule {
    pub fn rate(&self, round: usize, local_steps: u32) -> f64 {
        match *self {
            LrSchedule::Theoretical {
                smoothness,
                strong_convexity,
            } => {
                let mu = strong_convexity;
                2.0 / ((8.0 * smoothness).max(mu * local_steps as f64) + mu * round as f64)
            }
            LrSchedule::Exponential { initial, decay } => initial * decay.powi(round as i32),
        }
    }

    /// Theoretical schedule with `mu = l2` and `L = mu + max ||[x, 1]||^2 / 4`.
    pub fn theoretical_for(ds: &FederatedDataset, l2: f64) -> Self {
        let max_sq = ds
            .shards
            .iter()
            .flat_map(|s| s.x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect::<Vec<_>>())
            .fold(0.0_f64, f64::max);
        LrSchedule::Theoretical {
            smoothness: l2 + max_sq / 4.0,
            strong_convexity: l2,
        }
    }
}

/// Simulated round duration: `base + per_step * (largest participant shard * E / batch)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimTiming {
    pub base: f64,
    pub per_step: f64,
}

impl Default for SimTiming {
    fn default() -> Self {
        Self {
            base: 1.0,
            per_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_steps: u32,
    /// Minibatch size; a batch at least as large as a shard uses the full shard.
    pub batch: usize,
    pub lr: LrSchedule,
    pub l2: f64,
    pub rounds: u32,
    pub seed: u64,
    pub participation: Vec<f64>,
    /// Evaluate every `eval_stride` rounds (and always at the last round).
    pub eval_stride: usize,
    pub timing: SimTiming,
}

impl TrainConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.batch == 0 || self.rounds == 0 || self.eval_stride == 0 {
            return Err(Error::InvalidParameter("batch, rounds and eval_stride must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("l2 {} must be nonnegative", self.l2)));
        }
        if self.participation.len() != clients {
            return Err(Error::LengthMismatch {
                what: "participation vector",
                expected: clients,
                found: self.participation.len(),
            });
        }
        if let Some(i) = self.participation.iter().position(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Domain {
                index: i,
                q: self.participation[i],
                reason: "participation must lie in [0, 1]",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub sim_time: f64,
}

fn logits(w: &Array2<f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = x.ncols();
    let mut z = x.dot(&w.slice(s![.., ..d]).t());
    z += &w.column(d);
    z
}

/// Row-wise softmax in place; returns per-row log-sum-exp.
fn softmax_rows(z: &mut Array2<f64>) -> Array1<f64> {
    let mut lse = Array1::zeros(z.nrows());
    for (mut row, out) in z.rows_mut().into_iter().zip(lse.iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row /= sum;
        *out = m + sum.ln();
    }
    lse
}

/// Mean cross-entropy of `w` on a shard.
pub fn shard_loss(w: &Array2<f64>, shard: &Shard) -> f64 {
    if shard.is_empty() {
        return f64::NAN;
    }
    let z = logits(w, shard.x.view());
    let terms = z.rows().into_iter().zip(&shard.y).map(|(row, &y)| {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        lse - row[y]
    });
    compensated_sum(terms) / shard.len() as f64
}

/// Gradient of mean cross-entropy plus `l2/2 ||w||^2` over the given rows.
pub(crate) fn gradient(w: &Array2<f64>, x: ArrayView2<'_, f64>, y: &[usize], l2: f64) -> Array2<f64> {
    let (b, d) = (x.nrows(), x.ncols());
    let mut p = logits(w, x);
    softmax_rows(&mut p);
    for (mut row, &label) in p.rows_mut().into_iter().zip(y) {
        row[label] -= 1.0;
    }
    let mut g = Array2::zeros(w.raw_dim());
    let scale = 1.0 / b as f64;
    g.slice_mut(s![.., ..d]).assign(&(p.t().dot(&x) * scale));
    g.column_mut(d).assign(&(p.sum_axis(Axis(0)) * scale));
    if l2 > 0.0 {
        g.scaled_add(l2, w);
    }
    g
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs `local_steps` minibatch SGD steps and optionally records each
/// stochastic gradient norm.
pub(crate) fn local_sgd_traced<R: Rng + ?Sized>(
    w: &Array2<f64>,
    shard: &Shard,
    local_steps: u32,
    batch: usize,
    lr: f64,
    l2: f64,
    rng: &mut R,
    mut norms: Option<&mut Vec<f64>>,
) -> Result<Array2<f64>> {
    if shard.is_empty() {
        return Err(Error::EmptyShard(usize::MAX));
    }
    let mut w = w.clone();
    let full = batch >= shard.len();
    let mut idx = vec![0usize; batch.min(shard.len())];
    for _ in 0..local_steps {
        let g = if full {
            gradient(&w, shard.x.view(), &shard.y, l2)
        } else {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..shard.len());
            }
            let xb = shard.x.select(Axis(0), &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| shard.y[i]).collect();
            gradient(&w, xb.view(), &yb, l2)
        };
        if let Some(n) = norms.as_deref_mut() {
            n.push(frobenius(&g));
        }
        if lr != 0.0 {
            w.scaled_add(-lr, &g);
        }
    }
    Ok(w)
}

/// `local_steps` minibatch SGD steps (batches drawn with replacement) on the
/// regularized cross-entropy of one shard.
pub fn local_sgd<R: Rng + ?Sized>(
    w: &ModelState,
    shard: &Shard,
    local_steps: u32,
    batch: usize,
    lr: f64,
    l2: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    local_sgd_traced(&w.w, shard, local_steps, batch, lr, l2, rng, None)
}

/// Includes each client independently with probability `q_n`.
pub fn sample_participants<R: Rng + ?Sized>(q: &[f64], rng: &mut R) -> Vec<usize> {
    q.iter()
        .enumerate()
        .filter_map(|(n, &qn)| (rng.random::<f64>() < qn).then_some(n))
        .collect()
}

/// `w + sum_{n in S} (a_n / q_n) (w_n - w)`, reduced in client order.
pub fn aggregate(
    prev: &ModelState,
    updates: &BTreeMap<usize, Array2<f64>>,
    q: &[f64],
    profiles: &[ClientProfile],
) -> Result<ModelState> {
    let mut w = prev.w.clone();
    for (&n, wn) in updates {
        let (Some(&qn), Some(p)) = (q.get(n), profiles.get(n)) else {
            return Err(Error::InvalidParameter(format!("update from unknown client {n}")));
        };
        if !(qn > 0.0) {
            return Err(Error::Domain {
                index: n,
                q: qn,
                reason: "cannot reweight an update from a client with zero participation",
            });
        }
        if wn.raw_dim() != prev.w.raw_dim() {
            return Err(Error::InvalidParameter(format!("client {n} update has the wrong shape")));
        }
        let coef = p.weight / qn;
        w.zip_mut_with(&(wn - &prev.w), |acc, d| *acc += coef * d);
    }
    Ok(ModelState {
        w,
        round: prev.round + 1,
    })
}

/// `sum_n a_n F_n(w)` with `a_n` from shard sizes; cross-entropy only.
pub fn global_loss(w: &ModelState, ds: &FederatedDataset) -> Result<f64> {
    if ds.shards.is_empty() || ds.shards.iter().all(Shard::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let weights = ds.weights();
    Ok(compensated_sum(
        ds.shards
            .iter()
            .zip(weights)
            .filter(|(s, _)| !s.is_empty())
            .map(|(s, a)| a * shard_loss(&w.w, s)),
    ))
}

/// Global loss plus `l2/2 ||w||^2`.
pub fn global_objective(w: &ModelState, ds: &FederatedDataset, l2: f64) -> Result<f64> {
    let norm_sq: f64 = w.w.iter().map(|v| v * v).sum();
    Ok(global_loss(w, ds)? + 0.5 * l2 * norm_sq)
}

/// Fraction of argmax predictions matching labels.
pub fn test_accuracy(w: &ModelState, test: &Shard) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let z = logits(&w.w, test.x.view());
    let correct = z
        .rows()
        .into_iter()
        .zip(&test.y)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Deterministic per-(round, client) generator for local SGD.
pub(crate) fn local_rng(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) | (client as u64 + 1));
    rng
}

fn evaluate(model: &ModelState, ds: &FederatedDataset) -> Result<(f64, f64)> {
    let loss = global_loss(model, ds)?;
    let acc = if ds.test.is_empty() {
        f64::NAN
    } else {
        test_accuracy(model, &ds.test)?
    };
    Ok((loss, acc))
}

/// Runs `cfg.rounds` rounds of sampling, local SGD and aggregation.
///
/// The returned series starts with the initial model at round 0. Rounds with
/// no participants leave the model unchanged.
pub fn train(ds: &FederatedDataset, cfg: &TrainConfig, profiles: &[ClientProfile]) -> Result<Vec<RoundMetrics>> {
    let n = ds.num_clients();
    cfg.validate(n)?;
    if profiles.len() != n {
        return Err(Error::LengthMismatch {
            what: "profiles",
            expected: n,
            found: profiles.len(),
        });
    }
    if let Some(i) = ds.shards.iter().position(Shard::is_empty) {
        return Err(Error::EmptyShard(i));
    }
    let mut model = ModelState::for_dataset(ds);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sim_time = 0.0;
    let (loss, accuracy) = evaluate(&model, ds)?;
    let mut metrics = vec![RoundMetrics {
        round: 0,
        participants: Vec::new(),
        loss,
        accuracy,
        sim_time,
    }];
    for r in 0..cfg.rounds as usize {
        let participants = sample_participants(&cfg.participation, &mut sampler);
        let lr = cfg.lr.rate(r, cfg.local_steps);
        let updates: Vec<(usize, Array2<f64>)> = participants
            .par_iter()
            .map(|&c| {
                let mut rng = local_rng(cfg.seed, r, c);
                local_sgd(&model, &ds.shards[c], cfg.local_steps, cfg.batch, lr, cfg.l2, &mut rng)
                    .map(|w| (c, w))
            })
            .collect::<Result<_>>()?;
        let updates: BTreeMap<usize, Array2<f64>> = updates.into_iter().collect();
        model = aggregate(&model, &updates, &cfg.participation, profiles)?;

        let largest = participants.iter().map(|&c| ds.shards[c].len()).max().unwrap_or(0);
        sim_time += cfg.timing.base
            + cfg.timing.per_step * (largest as f64 * cfg.local_steps as f64 / cfg.batch as f64);

        let round = r + 1;
        if round % cfg.eval_stride == 0 || round == cfg.rounds as usize {
            let (loss, accuracy) = evaluate(&model, ds)?;
            metrics.push(RoundMetrics {
                round,
                participants,
                loss,
                accuracy,
                sim_time,
            });
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_population;
    use ndarray::array;

    fn toy_shard() -> Shard {
        Shard::new(
            array![[2.0, 0.1], [1.5, -0.2], [1.8, 0.3], [-2.0, 0.2], [-1.7, -0.1], [-1.9, 0.0]],
            vec![0, 0, 0, 1, 1, 1],
        )
        .unwrap()
    }

    fn toy_dataset() -> FederatedDataset {
        let a = Shard::new(array![[1.0, 0.0], [0.9, 0.2], [-1.0, 0.1]], vec![0, 0, 1]).unwrap();
        let b = Shard::new(array![[-0.8, -0.3], [-1.2, 0.4]], vec![1, 1]).unwrap();
        FederatedDataset::new(vec![a, b], toy_shard(), 2, 2).unwrap()
    }

    fn profiles_for(ds: &FederatedDataset) -> Vec<ClientProfile> {
        let d: Vec<f64> = ds.shard_sizes().iter().map(|&s| s as f64).collect();
        let n = d.len();
        make_population(&d, &vec![1.0; n], &vec![1.0; n], &vec![0.0; n], &vec![1.0; n]).unwrap()
    }

    #[test]
    fn zero_rate_or_zero_steps_leave_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelState::zeros(2, 2);
        m.w[[0, 1]] = 0.7;
        let s = toy_shard();
        assert_eq!(local_sgd(&m, &s, 5, 2, 0.0, 0.1, &mut rng).unwrap(), m.w);
        assert_eq!(local_sgd(&m, &s, 0, 2, 0.5, 0.1, &mut rng).unwrap(), m.w);
    }

    #[test]
    fn sgd_reduces_separable_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelState::zeros(2, 2);
        let s = toy_shard();
        let before = shard_loss(&m.w, &s);
        let w = local_sgd(&m, &s, 20, 3, 0.5, 1e-4, &mut rng).unwrap();
        assert!(shard_loss(&w, &s) < before);
    }

    #[test]
    fn empty_shard_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(local_sgd(&ModelState::zeros(2, 2), &Shard::empty(2), 1, 1, 0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = toy_shard();
        let mut w = ModelState::zeros(2, 2).w;
        w[[0, 0]] = 0.3;
        w[[1, 2]] = -0.2;
        let l2 = 0.05;
        let g = gradient(&w, s.x.view(), &s.y, l2);
        let f = |w: &Array2<f64>| shard_loss(w, &s) + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut up = w.clone();
                let mut dn = w.clone();
                up[[i, j]] += h;
                dn[[i, j]] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn participation_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_participants(&[1.0; 4], &mut rng), vec![0, 1, 2, 3]);
            assert!(sample_participants(&[0.0; 4], &mut rng).is_empty());
        }
    }

    #[test]
    fn inclusion_frequency_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = [0.1, 0.35, 0.5, 0.9];
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            for n in sample_participants(&q, &mut rng) {
                counts[n] += 1;
            }
        }
        for (c, qn) in counts.iter().zip(q) {
            let sigma = (qn * (1.0 - qn) / draws as f64).sqrt();
            assert!((*c as f64 / draws as f64 - qn).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn full_participation_aggregate_is_weighted_average() {
        let ds = toy_dataset();
        let p = profiles_for(&ds);
        let prev = ModelState::zeros(2, 2);
        let updates: BTreeMap<usize, Array2<f64>> =
            [(0, Array2::from_elem((2, 3), 1.0)), (1, Array2::from_elem((2, 3), -2.0))].into();
        let next = aggregate(&prev, &updates, &[1.0, 1.0], &p).unwrap();
        let expected = 0.6 * 1.0 + 0.4 * -2.0;
        assert!(next.w.iter().all(|&v| (v - expected).abs() < 1e-15));
        assert_eq!(next.round, 1);
    }

    #[test]
    fn empty_aggregate_keeps_model() {
        let ds = toy_dataset();
        let prev = ModelState {
            w: Array2::from_elem((2, 3), 0.25),
            round: 4,
        };
        let next = aggregate(&prev, &BTreeMap::new(), &[0.5, 0.5], &profiles_for(&ds)).unwrap();
        assert_eq!(next.w, prev.w);
    }

    #[test]
    fn zero_probability_update_rejected() {
        let ds = toy_dataset();
        let updates: BTreeMap<usize, Array2<f64>> = [(1, Array2::zeros((2, 3)))].into();
        let err = aggregate(&ModelState::zeros(2, 2), &updates, &[0.5, 0.0], &profiles_for(&ds)).unwrap_err();
        assert!(matches!(err, Error::Domain { index: 1, .. }));
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let x = Array2::from_shape_fn((12, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let y: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let shard = Shard::new(x, y).unwrap();
        let ds = FederatedDataset::new(vec![shard.clone()], shard, 4, 3).unwrap();
        let loss = global_loss(&ModelState::zeros(4, 3), &ds).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn global_loss_equals_pooled_mean() {
        let ds = toy_dataset();
        let mut m = ModelState::zeros(2, 2);
        m.w[[0, 0]] = 0.4;
        m.w[[1, 1]] = -0.9;
        m.w[[1, 2]] = 0.3;
        let pooled = shard_loss(&m.w, &ds.pooled());
        assert!((global_loss(&m, &ds).unwrap() - pooled).abs() < 1e-14);
        let acc = test_accuracy(&m, &ds.test).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
