//! Ensemble evaluation: ensemble-mean and oracle accuracy, per-class
//! assignment distributions, and the random label-split baseline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{member_seed, CompiledGraph};
use crate::losses::{mcl_assign, member_example_losses};
use crate::tensor::{argmax, softmax, Tensor};
use crate::trainer::{Feed, TrainOptions, Trainer};

/// Seed of the tie-break stream used to pick each example's lowest-loss member.
pub const WINNER_SEED: u64 = 0x5EED;

fn check(probs: &[Tensor], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("no ensemble members".into()));
    }
    if let Some(p) = probs.iter().find(|p| p.batch() != labels.len()) {
        return Err(Error::InvalidArgument(format!("{} prediction rows for {} labels", p.batch(), labels.len())));
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Accuracy of the argmax of the member-averaged probabilities.
pub fn ensemble_mean_accuracy(probs: &[Tensor], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let classes = probs[0].row_len();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let mut mean = vec![0.0; classes];
            for p in probs {
                mean.iter_mut().zip(p.row(i)).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|v| *v /= probs.len() as f64);
            argmax(&mean) == y
        })
        .count();
    Ok(fraction(hits, labels.len()))
}

/// Fraction of examples some member classifies correctly.
pub fn oracle_accuracy(probs: &[Tensor], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|&(i, &y)| probs.iter().any(|p| p.argmax_row(i) == y)).count();
    Ok(fraction(hits, labels.len()))
}

/// Fraction of examples whose lowest-loss member classifies them correctly.
pub fn lowest_loss_oracle_accuracy(probs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let winners = min_loss_members(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|&(i, &y)| probs[winners[i]].argmax_row(i) == y).count();
    Ok(fraction(hits, labels.len()))
}

pub fn member_accuracies(probs: &[Tensor], labels: &[usize]) -> Result<Vec<f64>> {
    check(probs, labels)?;
    Ok(probs
        .iter()
        .map(|p| fraction(labels.iter().enumerate().filter(|&(i, &y)| p.argmax_row(i) == y).count(), labels.len()))
        .collect())
}

/// Lowest cross-entropy member of each example, ties broken as in MCL
/// assignment with a fixed seed. Works on probabilities or scores alike,
/// since log-softmax of log-probabilities is the identity.
pub fn min_loss_members(probs: &[Tensor], labels: &[usize]) -> Result<Vec<usize>> {
    check(probs, labels)?;
    let logs: Vec<Tensor> = probs.iter().map(|p| p.map(|v| v.max(f64::MIN_POSITIVE).ln())).collect();
    let losses = member_example_losses(&logs, labels)?;
    let a = mcl_assign(&losses, 1, &mut ChaCha8Rng::seed_from_u64(WINNER_SEED))?;
    Ok(a.first_winner())
}

/// `classes × members` matrix: row `c`, column `m` is the fraction of
/// class-`c` examples won by member `m`. Classes without examples get a
/// uniform row.
pub fn assignment_distribution(winners: &[usize], labels: &[usize], classes: usize, members: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0usize; members]; classes];
    winners.iter().zip(labels).for_each(|(&w, &y)| counts[y][w] += 1);
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![1.0 / members as f64; members]
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

/// Shannon entropy in bits.
pub fn entropy_bits(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).fold(0.0, |h, p| h - p * p.log2())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ensemble_mean_acc: f64,
    pub oracle_acc: f64,
    pub oracle_lowest_loss_acc: f64,
    pub member_accs: Vec<f64>,
    pub assignment_dist: Vec<Vec<f64>>,
    pub n_examples: usize,
}

impl MetricsRecord {
    pub fn from_probs(probs: &[Tensor], labels: &[usize], classes: usize) -> Result<Self> {
        let winners = min_loss_members(probs, labels)?;
        Ok(Self {
            ensemble_mean_acc: ensemble_mean_accuracy(probs, labels)?,
            oracle_acc: oracle_accuracy(probs, labels)?,
            oracle_lowest_loss_acc: lowest_loss_oracle_accuracy(probs, labels)?,
            member_accs: member_accuracies(probs, labels)?,
            assignment_dist: assignment_distribution(&winners, labels, classes, probs.len()),
            n_examples: labels.len(),
        })
    }

    pub fn best_member_acc(&self) -> f64 {
        self.member_accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_member_acc(&self) -> f64 {
        self.member_accs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn median_row_entropy(&self) -> f64 {
        median(&self.assignment_dist.iter().map(|r| entropy_bits(r)).collect::<Vec<_>>())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `class,member0,member1,...` rows.
    pub fn write_assignment_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let members = self.member_accs.len();
        let header: Vec<String> = std::iter::once("class".to_string()).chain((0..members).map(|m| format!("member{m}"))).collect();
        writeln!(f, "{}", header.join(","))?;
        for (c, row) in self.assignment_dist.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{c},{}", cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Member scores over `indices`, one tensor per member across all graphs,
/// rows aligned with `indices`.
pub fn member_scores(graphs: &mut [CompiledGraph], data: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<Tensor>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut classes = Vec::new();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, _) = data.gather(chunk)?;
        let mut m = 0;
        for g in graphs.iter_mut() {
            let out = g.forward(&x)?;
            g.clear_cache();
            for s in out.scores {
                if cols.len() <= m {
                    cols.push(Vec::new());
                    classes.push(s.row_len());
                }
                cols[m].extend_from_slice(s.data());
                m += 1;
            }
        }
    }
    cols.into_iter().zip(classes).map(|(c, k)| Tensor::new(vec![indices.len(), k], c)).collect()
}

pub fn ensemble_probs(graphs: &mut [CompiledGraph], data: &Dataset, indices: &[usize]) -> Result<Vec<Tensor>> {
    Ok(member_scores(graphs, data, indices, 256)?.iter().map(softmax).collect())
}

/// Evaluates every member of `graphs` on `indices` (all of `data` if `None`).
pub fn evaluate(graphs: &mut [CompiledGraph], data: &Dataset, indices: Option<&[usize]>) -> Result<MetricsRecord> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    let probs = ensemble_probs(graphs, data, idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    MetricsRecord::from_probs(&probs, &labels, data.classes())
}

/// Deals the shuffled classes round-robin into `members` groups.
pub fn random_label_split(classes: usize, members: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); members];
    order.into_iter().enumerate().for_each(|(i, c)| groups[i % members].push(c));
    groups.iter_mut().for_each(|g| g.sort());
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistSummary {
    pub oracle_accs: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl SpecialistSummary {
    fn new(oracle_accs: Vec<f64>) -> Self {
        let min = oracle_accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = oracle_accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = oracle_accs.iter().sum::<f64>() / oracle_accs.len() as f64;
        Self { oracle_accs, min, mean, max }
    }
}

/// Per trial: split the labels at random among `members` specialists, train
/// each (a full `classes`-way classifier built by `make_member`) only on its
/// labels' training examples, and score the oracle accuracy on `test`.
pub fn random_split_specialists(
    train: &Dataset,
    test: &Dataset,
    members: usize,
    trials: usize,
    seed: u64,
    opts: &TrainOptions,
    mut make_member: impl FnMut(u64) -> Result<CompiledGraph>,
) -> Result<SpecialistSummary> {
    if members == 0 || trials == 0 {
        return Err(Error::InvalidArgument("need at least one member and one trial".into()));
    }
    let mut accs = Vec::with_capacity(trials);
    for trial in 0..trials {
        let trial_seed = member_seed(seed, trial);
        let groups = random_label_split(train.classes(), members, trial_seed);
        let mut graphs = Vec::with_capacity(members);
        for (m, labels) in groups.iter().enumerate() {
            let g = make_member(member_seed(trial_seed, m))?;
            let own = train.indices_with_labels(labels);
            if own.is_empty() {
                graphs.push(g);
                continue;
            }
            let mut o = opts.clone();
            o.data_seed = member_seed(opts.data_seed ^ trial_seed, m);
            let mut t = Trainer::new(vec![g], Feed::Shared(own), o)?;
            t.run(train)?;
            graphs.extend(t.graphs);
        }
        accs.push(evaluate(&mut graphs, test, None)?.oracle_acc);
    }
    Ok(SpecialistSummary::new(accs))
}
