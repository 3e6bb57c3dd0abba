use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::member_seed;

/// `n` draws with replacement from `0..n`.
pub fn bag_sample(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Distinct indices in `indices` as a fraction of `n`.
pub fn unique_fraction(indices: &[usize], n: usize) -> f64 {
    indices.iter().collect::<HashSet<_>>().len() as f64 / n as f64
}

/// `1 - (1 - 1/n)^n`: expected unique fraction of a bag of size `n`.
pub fn expected_unique_fraction(n: usize) -> f64 {
    1.0 - (1.0 - 1.0 / n as f64).powf(n as f64)
}

/// `floor(fraction * n)` distinct indices drawn uniformly.
pub fn unique_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = (fraction * n as f64 + 1e-9).floor() as usize;
    Ok(sample(&mut ChaCha8Rng::seed_from_u64(seed), n, count).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Every member sees the full training set.
    Shared,
    /// Every member trains on its own bag; member initializations are shared.
    Bagged,
    /// Per-member bags and per-member initializations.
    Combined,
    /// Every member trains on its own duplicate-free subset.
    UniqueSubset { fraction: f64 },
}

impl SamplingMode {
    /// Whether members should start from distinct random initializations.
    pub fn per_member_init(&self) -> bool {
        !matches!(self, Self::Bagged)
    }

    pub fn parse(s: &str, fraction: f64) -> Result<Self> {
        Ok(match s {
            "shared" | "random-init" => Self::Shared,
            "bagged" | "bagging" => Self::Bagged,
            "combined" => Self::Combined,
            "unique" | "unique-subset" => Self::UniqueSubset { fraction },
            other => return Err(Error::InvalidArgument(format!("unknown sampling mode `{other}`"))),
        })
    }
}

/// Per-member training index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub mode: SamplingMode,
    pub seed: u64,
    pub members: Vec<Vec<usize>>,
}

impl SamplingPlan {
    pub fn new(mode: SamplingMode, n: usize, members: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dataset("cannot sample an empty dataset".into()));
        }
        let lists = (0..members)
            .map(|m| {
                let s = member_seed(seed, m);
                match mode {
                    SamplingMode::Shared => Ok((0..n).collect()),
                    SamplingMode::Bagged | SamplingMode::Combined => Ok(bag_sample(n, s)),
                    SamplingMode::UniqueSubset { fraction } => unique_subset(n, fraction, s),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { mode, seed, members: lists })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn large_bag_keeps_about_63_percent() {
        let f = unique_fraction(&bag_sample(100_000, 1), 100_000);
        assert!((f - 0.632).abs() < 0.005, "{f}");
    }

    #[test]
    fn tiny_bags() {
        assert_eq!(unique_fraction(&bag_sample(1, 3), 1), 1.0);
        let mean = (0..10_000u64).map(|s| unique_fraction(&bag_sample(2, s), 2)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.75).abs() < 0.01, "{mean}");
    }

    #[test]
    fn unique_subsets() {
        let s = unique_subset(50_000, 0.63, 0).unwrap();
        assert_eq!(s.len(), 31_500);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 31_500);
        let mut all = unique_subset(10, 1.0, 0).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(unique_subset(10, 0.5, 2).unwrap().len(), 5);
        assert!(unique_subset(10, 0.0, 2).is_err());
    }

    #[test]
    fn plan_modes() {
        let shared = SamplingPlan::new(SamplingMode::Shared, 5, 3, 0).unwrap();
        assert!(shared.members.iter().all(|l| l == &vec![0, 1, 2, 3, 4]));
        let bagged = SamplingPlan::new(SamplingMode::Bagged, 50, 2, 0).unwrap();
        assert_ne!(bagged.members[0], bagged.members[1]);
        assert!(bagged.members.iter().all(|l| l.len() == 50));
        assert!(!SamplingMode::Bagged.per_member_init());
        assert!(SamplingMode::Combined.per_member_init());
    }

    #[test]
    fn unique_fraction_converges_within_three_sigma() {
        let n = 1000;
        let p = expected_unique_fraction(n);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let fractions: Vec<f64> = (0..100).map(|seed| unique_fraction(&bag_sample(n, seed), n)).collect();
        let mean = fractions.iter().sum::<f64>() / 100.0;
        assert!((mean - p).abs() < 3.0 * sigma / 10.0, "{mean} vs {p}");
    }

    proptest! {
        #[test]
        fn samplers_are_pure(n in 1usize..200, seed in any::<u64>(), frac in 0.05f64..1.0) {
            prop_assert_eq!(bag_sample(n, seed), bag_sample(n, seed));
            let a = unique_subset(n, frac, seed).unwrap();
            prop_assert_eq!(&a, &unique_subset(n, frac, seed).unwrap());
            prop_assert_eq!(a.iter().collect::<HashSet<_>>().len(), a.len());
            prop_assert!(bag_sample(n, seed).iter().all(|&i| i < n));
        }
    }
}
