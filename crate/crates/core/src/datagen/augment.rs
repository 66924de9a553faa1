use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Role, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    Slice,
    Splice,
    WeightedAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub ops_enabled: Vec<AugmentOp>,
    pub count: usize,
    pub seed: u64,
    /// Shortest slice as a fraction of the pool length.
    pub min_slice_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops_enabled: vec![AugmentOp::Slice, AugmentOp::Splice, AugmentOp::WeightedAverage],
            count: 0,
            seed: 0,
            min_slice_fraction: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ops_enabled.is_empty() {
            return Err(Error::Config("augmentation needs at least one enabled op".into()));
        }
        if !(self.min_slice_fraction > 0.0 && self.min_slice_fraction < 1.0) {
            return Err(Error::Config(format!(
                "min_slice_fraction {} must lie in (0, 1)",
                self.min_slice_fraction
            )));
        }
        Ok(())
    }
}

/// Window `[start, start + len)` of `parent`, zero-padded at the tail back to
/// the parent's length.
pub fn slice_padded(parent: &[f64], start: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; parent.len()];
    out[..len].copy_from_slice(&parent[start..start + len]);
    out
}

/// `first[..cut]` followed by `second[cut..]`.
pub fn splice(first: &[f64], second: &[f64], cut: usize) -> Vec<f64> {
    first[..cut].iter().chain(&second[cut..]).copied().collect()
}

/// `w * first + (1 - w) * second`.
pub fn weighted_average(first: &[f64], second: &[f64], w: f64) -> Vec<f64> {
    first
        .iter()
        .zip(second)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect()
}

/// Builds `config.count` new unlabeled sequences from pairs/single parents of
/// `pool`, each with one uniformly chosen enabled op.
pub fn augment_unlabeled(pool: &Dataset, config: &AugmentConfig) -> Result<Dataset> {
    config.validate()?;
    if pool.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "augmentation needs at least 2 parents, pool has {}",
            pool.len()
        )));
    }
    let t = pool.uniform_length().ok_or_else(|| {
        Error::InvalidDataset("augmentation requires parents of one common length".into())
    })?;
    let min_len = ((config.min_slice_fraction * t as f64).ceil() as usize).clamp(1, t);
    let parents = pool.samples();

    let samples = (0..config.count)
        .map(|j| {
            let mut rng = seed::rng(seed::derive_seed(&[config.seed, j as u64]));
            let op = config.ops_enabled[rng.random_range(0..config.ops_enabled.len())];
            let a = rng.random_range(0..parents.len());
            let mut b = rng.random_range(0..parents.len() - 1);
            if b >= a {
                b += 1;
            }
            let (pa, pb) = (&parents[a].input, &parents[b].input);
            let values = match op {
                AugmentOp::Slice => {
                    let len = rng.random_range(min_len..=t);
                    let start = rng.random_range(0..=t - len);
                    slice_padded(pa, start, len)
                }
                AugmentOp::Splice => splice(pa, pb, rng.random_range(1..t)),
                AugmentOp::WeightedAverage => weighted_average(pa, pb, rng.random_range(0.0..1.0)),
            };
            TimeSeriesSample::unlabeled(format!("aug-{j:06}"), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(Role::UnlabeledPool, pool.dt, samples)?.with_scale(pool.scale, pool.norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Dataset {
        let samples = (0..4)
            .map(|i| {
                let v = (0..50).map(|k| ((k + i * 7) as f64 * 0.3).sin()).collect();
                TimeSeriesSample::unlabeled(format!("p{i}"), v).unwrap()
            })
            .collect();
        Dataset::new(Role::UnlabeledPool, 0.05, samples).unwrap()
    }

    #[test]
    fn unit_weight_copies_first_parent() {
        let p = pool();
        let a = &p.samples()[0].input;
        let b = &p.samples()[1].input;
        assert_eq!(&weighted_average(a, b, 1.0), a);
    }

    #[test]
    fn splice_matches_direct_slicing() {
        let p = pool();
        let a = &p.samples()[2].input;
        let b = &p.samples()[3].input;
        for cut in [1, 17, 49] {
            let out = splice(a, b, cut);
            assert_eq!(out.len(), 50);
            assert_eq!(&out[..cut], &a[..cut]);
            assert_eq!(&out[cut..], &b[cut..]);
        }
    }

    #[test]
    fn slice_is_zero_padded() {
        let p = pool();
        let a = &p.samples()[0].input;
        let out = slice_padded(a, 10, 30);
        assert_eq!(&out[..30], &a[10..40]);
        assert!(out[30..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_count_gives_empty_pool() {
        let cfg = AugmentConfig::default();
        let out = augment_unlabeled(&pool(), &cfg).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.role, Role::UnlabeledPool);
    }

    #[test]
    fn outputs_keep_length_and_step() {
        let cfg = AugmentConfig {
            count: 64,
            seed: 3,
            ..AugmentConfig::default()
        };
        let p = pool();
        let out = augment_unlabeled(&p, &cfg).unwrap();
        assert_eq!(out.len(), 64);
        assert_eq!(out.dt, p.dt);
        assert!(out.samples().iter().all(|s| s.len() == 50 && !s.is_labeled()));
        assert_eq!(out, augment_unlabeled(&p, &cfg).unwrap());
    }

    #[test]
    fn rejects_tiny_or_ragged_pool() {
        let cfg = AugmentConfig {
            count: 1,
            ..AugmentConfig::default()
        };
        let one = pool().select(&[0]);
        assert!(augment_unlabeled(&one, &cfg).is_err());
        let mut samples = pool().into_samples();
        samples[0].input.pop();
        let ragged = Dataset::new(Role::UnlabeledPool, 0.05, samples).unwrap();
        assert!(augment_unlabeled(&ragged, &cfg).is_err());
    }
}
