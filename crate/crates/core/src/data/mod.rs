//! Federated dataset generation, ingestion and persistence.

mod container;
mod idx;
mod partition;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::domain::Shard;
use crate::error::{Error, Result};

pub use container::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use idx::{filter_labels, load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition_label_limited, subsample, PartitionParams};
pub use synthetic::{gen_synthetic, SyntheticParams};

/// Power-law shard sizes summing exactly to `total`, every size at least 1.
///
/// Rank `k` (1-based) gets weight `k^-exponent`; ranks are assigned to
/// clients through a random permutation and the remainder after the
/// one-per-client reservation is split by largest remainder.
pub fn power_law_sizes<R: Rng + ?Sized>(clients: usize, total: usize, exponent: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 || total < clients {
        return Err(Error::InvalidParameter(format!(
            "cannot split {total} samples over {clients} clients with at least one each"
        )));
    }
    let weights: Vec<f64> = (1..=clients).map(|k| (k as f64).powf(-exponent)).collect();
    let by_rank = largest_remainder(total - clients, &weights);
    let mut ranks: Vec<usize> = (0..clients).collect();
    ranks.shuffle(rng);
    Ok(ranks.into_iter().map(|k| by_rank[k] + 1).collect())
}

/// Splits `total` into integer parts proportional to `weights`, exactly.
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let ideal: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Ties go to the lower index.
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Moves `floor(len * fraction)` rows of each shard (keeping at least one
/// training row) into a shared test pool.
pub(crate) fn hold_out(shards: Vec<Shard>, fraction: f64, features: usize) -> (Vec<Shard>, Shard) {
    let mut train = Vec::with_capacity(shards.len());
    let mut test_parts = Vec::with_capacity(shards.len());
    for s in shards {
        let held = ((s.len() as f64 * fraction).floor() as usize).min(s.len().saturating_sub(1));
        let keep = s.len() - held;
        let split = |range: std::ops::Range<usize>| {
            let rows: Vec<usize> = range.collect();
            Shard {
                x: s.x.select(ndarray::Axis(0), &rows),
                y: rows.iter().map(|&i| s.y[i]).collect(),
            }
        };
        test_parts.push(split(keep..s.len()));
        train.push(split(0..keep));
    }
    let test = Shard::concat(features, &test_parts);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.0, 0.0]), vec![4, 3]);
        let parts = largest_remainder(22_377, &[3.0, 1.0, 0.25, 7.5]);
        assert_eq!(parts.iter().sum::<usize>(), 22_377);
    }

    #[test]
    fn power_law_is_unbalanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for exponent in [1.5, 2.0, 3.0] {
            let mut sizes = power_law_sizes(40, 22_377, exponent, &mut rng).unwrap();
            assert_eq!(sizes.iter().sum::<usize>(), 22_377);
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            assert!(sizes.iter().all(|&s| s >= 1));
            assert!(sizes[0] as f64 / sizes[39] as f64 > 5.0);
        }
    }

    #[test]
    fn zero_exponent_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sizes = power_law_sizes(4, 40, 0.0, &mut rng).unwrap();
        assert_eq!(sizes, vec![10; 4]);
        assert!(power_law_sizes(5, 4, 1.0, &mut rng).is_err());
    }
}
