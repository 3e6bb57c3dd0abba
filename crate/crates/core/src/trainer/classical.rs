use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Feed, TrainOptions, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::CompiledGraph;
use crate::losses::{member_example_losses, LossConfig, LossMode};
use crate::metrics::member_scores;
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMclConfig {
    /// Per-round training of each member on its partition.
    pub train: TrainOptions,
    pub rounds: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ClassicalMclConfig {
    fn default() -> Self {
        Self { train: TrainOptions::default(), rounds: 10, kmeans_iters: 100, seed: 0 }
    }
}

#[derive(Debug)]
pub struct ClassicalMclResult {
    pub graphs: Vec<CompiledGraph>,
    /// Member owning each example, aligned with the training indices.
    pub partition: Vec<usize>,
    pub rounds: usize,
    pub converged: bool,
    /// Members that owned no examples in some round and kept their parameters.
    pub empty_members: Vec<usize>,
}

/// Lloyd's algorithm on the flattened rows of `data` at `indices`, seeded
/// with `k` distinct examples. Returns the cluster of each index.
pub fn kmeans(data: &Dataset, indices: &[usize], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > indices.len() {
        return Err(Error::InvalidArgument(format!("k-means with k = {k} on {} examples", indices.len())));
    }
    let rows: Vec<&[f64]> = indices.iter().map(|&i| data.features().row(i)).collect();
    let dim = rows[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = sample(&mut rng, rows.len(), k).into_iter().map(|i| rows[i].to_vec()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let nearest = |centers: &[Vec<f64>], r: &[f64]| {
        let neg: Vec<f64> = centers.iter().map(|c| -dist(c, r)).collect();
        argmax(&neg)
    };
    let mut assign: Vec<usize> = rows.iter().map(|r| nearest(&centers, r)).collect();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in rows.iter().zip(&assign) {
            sums[c].iter_mut().zip(*r).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        for ((c, s), n) in centers.iter_mut().zip(sums).zip(&counts) {
            if *n > 0 {
                *c = s.into_iter().map(|v| v / *n as f64).collect();
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| nearest(&centers, r)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

/// Classical multiple choice learning with `k = 1`: each member is trained
/// on the examples it owns, then every example moves to its lowest-loss
/// member, until the partition stops changing. `graphs` hold one member
/// each; the partition starts from k-means clusters.
pub fn train_mcl_classical(
    mut graphs: Vec<CompiledGraph>,
    data: &Dataset,
    indices: &[usize],
    cfg: &ClassicalMclConfig,
) -> Result<ClassicalMclResult> {
    if let Some(g) = graphs.iter().find(|g| g.num_members() != 1) {
        return Err(Error::InvalidArgument(format!("classical MCL needs single-member graphs, got {}", g.num_members())));
    }
    let m = graphs.len();
    let mut partition = kmeans(data, indices, m, cfg.kmeans_iters, cfg.seed)?;
    let mut empty_members = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    let mut opts = cfg.train.clone();
    opts.loss = Some(LossConfig::new(LossMode::IndependentCe));
    while rounds < cfg.rounds {
        rounds += 1;
        for (member, slot) in graphs.iter_mut().enumerate() {
            let owned: Vec<usize> = indices.iter().zip(&partition).filter(|(_, &p)| p == member).map(|(&i, _)| i).collect();
            if owned.is_empty() {
                log::warn!("member {member} owns no examples in round {rounds}");
                if !empty_members.contains(&member) {
                    empty_members.push(member);
                }
                continue;
            }
            let g = slot.clone();
            let mut t = Trainer::new(vec![g], Feed::Shared(owned), opts.clone())?;
            t.run(data)?;
            *slot = t.graphs.pop().expect("one graph");
        }
        let scores = member_scores(&mut graphs, data, indices, 256)?;
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels()[i]).collect();
        let losses = member_example_losses(&scores, &labels)?;
        let next: Vec<usize> = (0..indices.len())
            .map(|e| {
                let neg: Vec<f64> = losses.iter().map(|l| -l[e]).collect();
                argmax(&neg)
            })
            .collect();
        if next == partition {
            converged = true;
            break;
        }
        partition = next;
    }
    Ok(ClassicalMclResult { graphs, partition, rounds, converged, empty_members })
}
