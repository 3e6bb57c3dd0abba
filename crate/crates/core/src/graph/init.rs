use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// Zero-mean Gaussian with this standard deviation.
    Gaussian(f64),
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    He,
}

/// How compiled graphs draw their initial parameters. Biases start at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub weights: WeightInit,
    /// Overrides keyed by base layer name (without replica suffixes).
    pub per_layer: BTreeMap<String, WeightInit>,
    /// Give every replica `<layer>@<m>` the same initial values as `<layer>`.
    pub shared_member_init: bool,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self { weights: WeightInit::Gaussian(0.01), per_layer: BTreeMap::new(), shared_member_init: false }
    }
}

impl InitPolicy {
    pub fn he() -> Self {
        Self { weights: WeightInit::He, ..Default::default() }
    }

    pub fn with_shared_member_init(mut self, shared: bool) -> Self {
        self.shared_member_init = shared;
        self
    }

    /// Weight and bias tensors for the layer `name`.
    pub fn init_params(&self, name: &str, shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
        let (base, suffixes) = split_replica_name(name);
        let suffixes = if self.shared_member_init { Vec::new() } else { suffixes };
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, base, &suffixes));
        let scheme = self.per_layer.get(base).copied().unwrap_or(self.weights);
        shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == 0 {
                    let std = match scheme {
                        WeightInit::Gaussian(s) => s,
                        WeightInit::He => (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt(),
                    };
                    Tensor::randn(shape, std, &mut rng)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect()
    }
}

/// Seed of ensemble member `m` given the ensemble seed.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    seed.wrapping_add((member as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Seed of the layer-local RNG. Replica suffixes are folded into the
/// ensemble seed first, so `fc@3` in a TreeNet draws exactly what `fc`
/// draws in a network compiled with `member_seed(seed, 3)`.
pub fn layer_seed(seed: u64, base: &str, suffixes: &[usize]) -> u64 {
    let seed = suffixes.iter().fold(seed, |s, &m| member_seed(s, m));
    seed ^ fnv1a(base.as_bytes())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// `conv4@0@1` -> (`conv4`, [0, 1]). Non-numeric suffixes stay in the base.
fn split_replica_name(name: &str) -> (&str, Vec<usize>) {
    let mut base = name;
    let mut suffixes = Vec::new();
    while let Some((head, tail)) = base.rsplit_once('@') {
        match tail.parse::<usize>() {
            Ok(m) => {
                suffixes.push(m);
                base = head;
            }
            Err(_) => break,
        }
    }
    suffixes.reverse();
    (base, suffixes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_names_split() {
        assert_eq!(split_replica_name("conv4@0@1"), ("conv4", vec![0, 1]));
        assert_eq!(split_replica_name("fc"), ("fc", vec![]));
        assert_eq!(split_replica_name("a@x"), ("a@x", vec![]));
    }

    #[test]
    fn replica_matches_member_network() {
        let p = InitPolicy::default();
        let shapes = [vec![3, 4], vec![3]];
        let a = p.init_params("fc@2", &shapes, 7);
        let b = p.init_params("fc", &shapes, member_seed(7, 2));
        assert!(a[0].bitwise_eq(&b[0]));
        let c = p.init_params("fc@1", &shapes, 7);
        assert!(!a[0].bitwise_eq(&c[0]));
        let shared = p.clone().with_shared_member_init(true);
        assert!(shared.init_params("fc@1", &shapes, 7)[0].bitwise_eq(&shared.init_params("fc@2", &shapes, 7)[0]));
    }
}
