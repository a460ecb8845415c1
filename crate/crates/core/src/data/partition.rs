//! Label-limited, size-unbalanced partitioning of a labeled sample set.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FederatedDataset, Shard};
use crate::error::{Error, Result};

use super::{hold_out, largest_remainder, power_law_sizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub clients: usize,
    pub classes_min: usize,
    pub classes_max: usize,
    pub power_exponent: f64,
    /// Fraction of each shard moved to the shared test pool.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            clients: 40,
            classes_min: 1,
            classes_max: 6,
            power_exponent: 1.5,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Uniform subsample of `n` rows without replacement, kept in source order.
pub fn subsample(samples: &Shard, n: usize, seed: u64) -> Result<Shard> {
    if n > samples.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot subsample {n} of {} samples",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, samples.len(), n).into_vec();
    rows.sort_unstable();
    Ok(Shard {
        x: samples.x.select(ndarray::Axis(0), &rows),
        y: rows.iter().map(|&i| samples.y[i]).collect(),
    })
}

/// Picks `k_n` distinct classes per client from `needed` so that each of
/// them has at least one holder.
fn assign_classes(counts: &[usize], needed: &[usize], rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let slots: usize = counts.iter().sum();
    if slots < needed.len() {
        return Err(Error::InfeasiblePartition {
            class: needed[slots],
            needed: 1,
            available: 0,
        });
    }
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    let mut order: Vec<usize> = needed.to_vec();
    order.shuffle(rng);
    // Spread the classes that must be covered over clients with free slots,
    // one pass at a time so small class counts are filled first.
    let mut clients: Vec<usize> = (0..counts.len()).collect();
    clients.shuffle(rng);
    let mut pending = order.into_iter();
    'outer: loop {
        let mut progressed = false;
        for &n in &clients {
            if held[n].len() < counts[n] {
                match pending.next() {
                    Some(c) => {
                        held[n].push(c);
                        progressed = true;
                    }
                    None => break 'outer,
                }
            }
        }
        if !progressed {
            break;
        }
    }
    for (n, h) in held.iter_mut().enumerate() {
        let mut rest: Vec<usize> = needed.iter().copied().filter(|c| !h.contains(c)).collect();
        rest.shuffle(rng);
        let extra = counts[n] - h.len();
        h.extend(rest.into_iter().take(extra));
        h.sort_unstable();
    }
    Ok(held)
}

/// Shares of each class among its holders: iterative proportional fitting of
/// client targets (rows) against class supplies (columns).
fn class_shares(held: &[Vec<usize>], targets: &[usize], supply: &[usize]) -> Vec<Vec<f64>> {
    let mut x: Vec<Vec<f64>> = held
        .iter()
        .zip(targets)
        .map(|(h, &t)| vec![t as f64 / h.len() as f64; h.len()])
        .collect();
    for _ in 0..100 {
        let mut col = vec![0.0; supply.len()];
        for (h, row) in held.iter().zip(&x) {
            for (&c, v) in h.iter().zip(row) {
                col[c] += v;
            }
        }
        for (h, row) in held.iter().zip(x.iter_mut()) {
            for (&c, v) in h.iter().zip(row.iter_mut()) {
                *v *= supply[c] as f64 / col[c];
            }
        }
        for (row, &t) in x.iter_mut().zip(targets) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v *= t as f64 / s);
            }
        }
    }
    x
}

/// Splits `samples` over clients holding a random number of classes in
/// `[classes_min, classes_max]`, with power-law shard sizes.
///
/// Every sample lands in exactly one training shard or the test pool. Shard
/// sizes follow the power-law targets as closely as the class supplies allow.
pub fn partition_label_limited(samples: &Shard, classes: usize, params: &PartitionParams) -> Result<FederatedDataset> {
    let p = params;
    if p.clients == 0 || p.classes_min == 0 || p.classes_min > p.classes_max || p.classes_max > classes {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= classes_min <= classes_max <= {classes} and at least one client"
        )));
    }
    if !(0.0..1.0).contains(&p.test_fraction) {
        return Err(Error::InvalidParameter(format!("test fraction {} not in [0, 1)", p.test_fraction)));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in samples.y.iter().enumerate() {
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::Format(format!("label {c} outside [0, {classes})")))?
            .push(i);
    }
    let supply: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let present: Vec<usize> = (0..classes).filter(|&c| supply[c] > 0).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let counts: Vec<usize> = (0..p.clients)
        .map(|_| rng.random_range(p.classes_min..=p.classes_max).min(present.len()))
        .collect();
    let held = assign_classes(&counts, &present, &mut rng)?;
    for &c in &present {
        let holders = held.iter().filter(|h| h.contains(&c)).count();
        if supply[c] < holders {
            return Err(Error::InfeasiblePartition {
                class: c,
                needed: holders,
                available: supply[c],
            });
        }
    }
    let targets = power_law_sizes(p.clients, samples.len(), p.power_exponent, &mut rng)?;
    let shares = class_shares(&held, &targets, &supply);

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); p.clients];
    for c in 0..classes {
        let holders: Vec<(usize, f64)> = held
            .iter()
            .enumerate()
            .filter_map(|(n, h)| h.iter().position(|&k| k == c).map(|j| (n, shares[n][j])))
            .collect();
        let weights: Vec<f64> = holders.iter().map(|&(_, w)| w).collect();
        let parts = largest_remainder(supply[c] - holders.len(), &weights);
        let mut pool = by_class[c].clone();
        pool.shuffle(&mut rng);
        let mut start = 0;
        for (&(n, _), part) in holders.iter().zip(parts) {
            rows[n].extend_from_slice(&pool[start..start + part + 1]);
            start += part + 1;
        }
    }
    let shards: Vec<Shard> = rows
        .into_iter()
        .map(|mut r| {
            r.shuffle(&mut rng);
            Shard {
                x: samples.x.select(ndarray::Axis(0), &r),
                y: r.iter().map(|&i| samples.y[i]).collect(),
            }
        })
        .collect();
    let (train, test) = hold_out(shards, p.test_fraction, samples.features());
    FederatedDataset::new(train, test, classes, samples.features())
}
