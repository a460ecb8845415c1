//! Non-i.i.d. synthetic classification data with tunable client spread.
//!
//! Generating recipe, per client `n`, with `s = min(alpha, 1)` and
//! `t = min(beta, 1)`:
//! - model entries `W_n, b_n = u_n + s * Xi_n + sqrt(1 - s^2) * Xi_0` with
//!   `u_n ~ N(0, alpha^2)` and unit normals `Xi_n` (own) and `Xi_0` (shared);
//! - feature mean entries `m_n = v_n + t * Z_n + sqrt(1 - t^2) * Z_0` with
//!   `v_n ~ N(0, beta^2)`;
//! - `x ~ N(m_n, diag(j^-1.2))`, `y = argmax(W_n x + b_n + noise)`.
//!
//! For `alpha, beta >= 1` every entry is `N(u_n, 1)` / `N(v_n, 1)`
//! independently across clients; `alpha = beta = 0` makes every client
//! share the same generating parameters.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{FederatedDataset, Shard};
use crate::error::{Error, Result};

use super::{hold_out, power_law_sizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub clients: usize,
    pub dim: usize,
    pub classes: usize,
    /// Spread of per-client model parameters.
    pub alpha: f64,
    /// Spread of per-client feature means.
    pub beta: f64,
    /// Samples over all clients, test pool included.
    pub total_samples: usize,
    pub power_exponent: f64,
    pub test_fraction: f64,
    /// Standard deviation of Gaussian noise added to logits before the argmax.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            clients: 40,
            dim: 60,
            classes: 10,
            alpha: 1.0,
            beta: 1.0,
            total_samples: 22_377,
            power_exponent: 1.5,
            test_fraction: 0.1,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || StandardNormal.sample(rng))
}

pub fn gen_synthetic(params: &SyntheticParams) -> Result<FederatedDataset> {
    let p = params;
    if p.clients == 0 || p.dim == 0 || p.classes < 2 {
        return Err(Error::InvalidParameter("need clients >= 1, dim >= 1 and classes >= 2".into()));
    }
    if !(p.alpha >= 0.0 && p.beta >= 0.0 && p.label_noise >= 0.0) {
        return Err(Error::InvalidParameter("alpha, beta and label_noise must be nonnegative".into()));
    }
    if !(0.0..1.0).contains(&p.test_fraction) {
        return Err(Error::InvalidParameter(format!("test fraction {} not in [0, 1)", p.test_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let sizes = power_law_sizes(p.clients, p.total_samples, p.power_exponent, &mut rng)?;

    let w0 = normal_matrix(&mut rng, p.classes, p.dim);
    let b0 = normal_vector(&mut rng, p.classes);
    let m0 = normal_vector(&mut rng, p.dim);
    let std_dev: Array1<f64> = (1..=p.dim).map(|j| (j as f64).powf(-0.6)).collect();
    let noise = Normal::new(0.0, p.label_noise).expect("nonnegative std");
    let (s, t) = (p.alpha.min(1.0), p.beta.min(1.0));
    let (s_shared, t_shared) = ((1.0 - s * s).sqrt(), (1.0 - t * t).sqrt());

    let mut shards = Vec::with_capacity(p.clients);
    for &size in &sizes {
        let u = p.alpha * std_normal(&mut rng);
        let w = &w0 * s_shared + &(normal_matrix(&mut rng, p.classes, p.dim) * s) + u;
        let b = &b0 * s_shared + &(normal_vector(&mut rng, p.classes) * s) + u;
        let v = p.beta * std_normal(&mut rng);
        let mean = &m0 * t_shared + &(normal_vector(&mut rng, p.dim) * t) + v;

        let mut x = Array2::zeros((size, p.dim));
        let mut y = Vec::with_capacity(size);
        for mut row in x.rows_mut() {
            let z = normal_vector(&mut rng, p.dim);
            row.assign(&(&mean + &(&z * &std_dev)));
            let logits = w.dot(&row) + &b;
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (k, &l) in logits.iter().enumerate() {
                let val = l + noise.sample(&mut rng);
                if val > best_val {
                    best_val = val;
                    best = k;
                }
            }
            y.push(best);
        }
        shards.push(Shard { x, y });
    }
    let (train, test) = hold_out(shards, p.test_fraction, p.dim);
    FederatedDataset::new(train, test, p.classes, p.dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticParams {
        SyntheticParams {
            clients: 5,
            dim: 8,
            classes: 4,
            total_samples: 600,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn sizes_sum_to_declared_total() {
        let ds = gen_synthetic(&SyntheticParams::default()).unwrap();
        assert_eq!(ds.total_samples, 22_377);
        assert_eq!(ds.shards.iter().map(Shard::len).sum::<usize>() + ds.test.len(), 22_377);
        assert_eq!(ds.num_clients(), 40);
        assert_eq!(ds.features, 60);
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_synthetic(&small(9)).unwrap(), gen_synthetic(&small(9)).unwrap());
        assert_ne!(gen_synthetic(&small(9)).unwrap(), gen_synthetic(&small(10)).unwrap());
    }

    #[test]
    fn zero_spread_gives_identical_client_distributions() {
        // Identical generating parameters: per-client feature means agree up
        // to sampling noise, while the default spread separates them.
        let spread = |alpha: f64, beta: f64| {
            let ds = gen_synthetic(&SyntheticParams {
                clients: 4,
                dim: 5,
                classes: 3,
                alpha,
                beta,
                total_samples: 8000,
                power_exponent: 0.0,
                seed: 3,
                ..Default::default()
            })
            .unwrap();
            let means: Vec<Array1<f64>> = ds
                .shards
                .iter()
                .map(|s| s.x.mean_axis(ndarray::Axis(0)).unwrap())
                .collect();
            means
                .iter()
                .flat_map(|a| means.iter().map(move |b| (a - b).mapv(f64::abs).sum()))
                .fold(0.0_f64, f64::max)
        };
        assert!(spread(0.0, 0.0) < 0.3, "{}", spread(0.0, 0.0));
        assert!(spread(1.0, 1.0) > 1.0);
    }

    #[test]
    fn holdout_is_ten_percent_per_client() {
        let ds = gen_synthetic(&small(1)).unwrap();
        assert!(ds.test.len() >= 55 && ds.test.len() <= 60);
        assert!(ds.shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn rejects_invalid_sizes() {
        assert!(gen_synthetic(&SyntheticParams { total_samples: 3, ..small(0) }).is_err());
        assert!(gen_synthetic(&SyntheticParams { clients: 0, ..small(0) }).is_err());
    }
}
