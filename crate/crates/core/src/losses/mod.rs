//! Ensemble objectives and their gradients with respect to member scores.
//!
//! Every function takes one score tensor `[batch, classes]` per member and
//! returns the scalar loss together with one upstream gradient per member.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax, Tensor};

/// Absolute tolerance under which two member losses count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Smallest averaged probability the probability-averaged loss will take a
/// logarithm of.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Each member minimizes its own cross-entropy; the total is their sum.
    IndependentCe,
    /// Cross-entropy of the softmax of the mean member scores.
    ScoreAveraged,
    /// Negative log of the mean member probability of the true class.
    ProbAveraged,
    /// Oracle set-loss over the `k` lowest-loss members.
    Mcl,
    /// Convex mix of the oracle set-loss and mean member cross-entropy.
    MclPlusCe,
}

impl LossMode {
    pub const ALL: [LossMode; 5] =
        [Self::IndependentCe, Self::ScoreAveraged, Self::ProbAveraged, Self::Mcl, Self::MclPlusCe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::IndependentCe => "independent-ce",
            Self::ScoreAveraged => "score-averaged",
            Self::ProbAveraged => "prob-averaged",
            Self::Mcl => "mcl",
            Self::MclPlusCe => "mcl-ce",
        }
    }

    pub fn is_averaged(&self) -> bool {
        matches!(self, Self::ScoreAveraged | Self::ProbAveraged)
    }

    pub fn uses_assignment(&self) -> bool {
        matches!(self, Self::Mcl | Self::MclPlusCe)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "independent-ce" | "independent" | "ce" => Self::IndependentCe,
            "score-averaged" | "score" => Self::ScoreAveraged,
            "prob-averaged" | "probability-averaged" | "prob" => Self::ProbAveraged,
            "mcl" => Self::Mcl,
            "mcl-ce" | "mcl+ce" | "mcl-plus-ce" => Self::MclPlusCe,
            other => return Err(Error::InvalidArgument(format!("unknown loss mode `{other}`"))),
        })
    }
}

/// Binary member × example indicators of which members an example trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    members: usize,
    batch: usize,
    k: usize,
    alpha: Vec<bool>,
}

impl AssignmentMatrix {
    pub fn all(members: usize, batch: usize) -> Self {
        Self { members, batch, k: members, alpha: vec![true; members * batch] }
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, member: usize, example: usize) -> bool {
        self.alpha[member * self.batch + example]
    }

    pub fn column_sum(&self, example: usize) -> usize {
        (0..self.members).filter(|&m| self.get(m, example)).count()
    }

    /// Number of examples assigned to `member`.
    pub fn wins(&self, member: usize) -> usize {
        self.alpha[member * self.batch..(member + 1) * self.batch].iter().filter(|&&a| a).count()
    }

    /// Lowest-index assigned member of each example.
    pub fn first_winner(&self) -> Vec<usize> {
        (0..self.batch).map(|i| (0..self.members).find(|&m| self.get(m, i)).unwrap_or(0)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Examples whose averaged probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to each member's scores.
    pub grads: Vec<Tensor>,
    pub assignment: Option<AssignmentMatrix>,
    /// Batch-mean cross-entropy of every member on its own.
    pub member_losses: Vec<f64>,
    pub diagnostics: LossDiagnostics,
}

/// Loss selection plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Winners per example for the MCL modes.
    pub k: usize,
    /// Weight of the MCL term in [`LossMode::MclPlusCe`].
    pub mix: f64,
    /// Divide the MCL loss by `k * batch` instead of `batch`.
    pub normalize_by_k: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mode: LossMode::IndependentCe, k: 1, mix: 0.5, normalize_by_k: false }
    }
}

impl LossConfig {
    pub fn new(mode: LossMode) -> Self {
        Self { mode, ..Default::default() }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, scores: &[Tensor], labels: &[usize], rng: &mut R) -> Result<LossOutput> {
        match self.mode {
            LossMode::IndependentCe => independent_ce_loss(scores, labels),
            LossMode::ScoreAveraged => score_averaged_loss(scores, labels),
            LossMode::ProbAveraged => prob_averaged_loss(scores, labels),
            LossMode::Mcl => mcl_loss(scores, labels, self.k, self.normalize_by_k, rng),
            LossMode::MclPlusCe => mcl_plus_ce_loss(scores, labels, self.k, self.mix, self.normalize_by_k, rng),
        }
    }
}

fn check_scores(scores: &[Tensor], labels: &[usize]) -> Result<usize> {
    let first = scores.first().ok_or_else(|| Error::InvalidArgument("no member scores".into()))?;
    if first.shape().len() != 2 {
        return Err(Error::InvalidShape {
            layer: "loss".into(),
            message: format!("scores must be [batch, classes], got {:?}", first.shape()),
        });
    }
    let classes = first.shape()[1];
    for s in scores {
        if s.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                layer: "loss".into(),
                expected: first.shape().to_vec(),
                actual: s.shape().to_vec(),
            });
        }
    }
    if labels.len() != first.batch() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {}",
            labels.len(),
            first.batch()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(classes)
}

/// `(p - onehot(y)) * scale` row by row.
fn softmax_grad(probs: &Tensor, labels: &[usize], scale: f64) -> Tensor {
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = g.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}

/// Per-example cross-entropy `-log p_y` of one member.
pub fn per_example_ce(scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_scores(std::slice::from_ref(scores), labels)?;
    let lp = log_softmax(scores);
    Ok(labels.iter().enumerate().map(|(i, &y)| -lp.row(i)[y]).collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Batch-mean cross-entropy of a single member.
pub fn ce_loss(scores: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let losses = per_example_ce(scores, labels)?;
    let b = labels.len() as f64;
    let loss = mean(&losses);
    Ok(LossOutput {
        loss,
        grads: vec![softmax_grad(&softmax(scores), labels, 1.0 / b)],
        assignment: None,
        member_losses: vec![loss],
        diagnostics: LossDiagnostics::default(),
    })
}

/// Sum over members of each member's batch-mean cross-entropy.
pub fn independent_ce_loss(scores: &[Tensor], labels: &[usize]) -> Result<LossOutput> {
    check_scores(scores, labels)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    let mut member_losses = Vec::with_capacity(scores.len());
    for s in scores {
        let out = ce_loss(s, labels)?;
        loss += out.loss;
        member_losses.push(out.loss);
        grads.extend(out.grads);
    }
    Ok(LossOutput { loss, grads, assignment: None, member_losses, diagnostics: LossDiagnostics::default() })
}

fn member_means(scores: &[Tensor], labels: &[usize]) -> Result<Vec<f64>> {
    scores.iter().map(|s| per_example_ce(s, labels).map(|l| mean(&l))).collect()
}

/// Cross-entropy of `softmax(mean_m s^m)`. All members receive the same
/// gradient tensor.
pub fn score_averaged_loss(scores: &[Tensor], labels: &[usize]) -> Result<LossOutput> {
    check_scores(scores, labels)?;
    let m = scores.len() as f64;
    let mut mu = scores[0].clone();
    for s in &scores[1..] {
        mu.add_assign(s)?;
    }
    mu.data_mut().iter_mut().for_each(|v| *v /= m);
    let losses = per_example_ce(&mu, labels)?;
    let b = labels.len() as f64;
    let shared = softmax_grad(&softmax(&mu), labels, 1.0 / (b * m));
    Ok(LossOutput {
        loss: mean(&losses),
        grads: vec![shared; scores.len()],
        assignment: None,
        member_losses: member_means(scores, labels)?,
        diagnostics: LossDiagnostics::default(),
    })
}

/// Per-example member weights `p_y^m / sum_i p_y^i` of the
/// probability-averaged gradient, as an `[examples][members]` table.
pub fn prob_average_weights(scores: &[Tensor], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_scores(scores, labels)?;
    let log_probs: Vec<Tensor> = scores.iter().map(log_softmax).collect();
    Ok((0..labels.len())
        .map(|i| {
            let lp: Vec<f64> = log_probs.iter().map(|t| t.row(i)[labels[i]]).collect();
            let lse = log_sum_exp(&lp);
            lp.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log(mean_m p_y^m)`, evaluated in the log domain. The gradient for member
/// `m` is its cross-entropy gradient weighted by `p_y^m / sum_i p_y^i`.
pub fn prob_averaged_loss(scores: &[Tensor], labels: &[usize]) -> Result<LossOutput> {
    check_scores(scores, labels)?;
    let m = scores.len();
    let b = labels.len() as f64;
    let log_probs: Vec<Tensor> = scores.iter().map(log_softmax).collect();
    let mut grads: Vec<Tensor> = log_probs.iter().map(|lp| lp.map(f64::exp)).collect();
    let mut total = 0.0;
    let mut clamped = 0;
    let floor = PROB_FLOOR.ln();
    for (i, &y) in labels.iter().enumerate() {
        let lp: Vec<f64> = log_probs.iter().map(|t| t.row(i)[y]).collect();
        let lse = log_sum_exp(&lp);
        let mut log_mean = lse - (m as f64).ln();
        if log_mean < floor {
            log_mean = floor;
            clamped += 1;
        }
        total -= log_mean;
        for (g, l) in grads.iter_mut().zip(&lp) {
            let w = (l - lse).exp() / b;
            let row = g.row_mut(i);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= w);
        }
    }
    if clamped > 0 {
        log::debug!("probability-averaged loss clamped {clamped} examples");
    }
    Ok(LossOutput {
        loss: total / b,
        grads,
        assignment: None,
        member_losses: member_means(scores, labels)?,
        diagnostics: LossDiagnostics { clamped },
    })
}

/// Assigns each example (column of `losses`, which is member-major) to its
/// `k` lowest-loss members. Ties at the selection boundary are broken
/// uniformly at random; `rng` is only consumed when such a tie occurs.
pub fn mcl_assign<R: Rng + ?Sized>(losses: &[Vec<f64>], k: usize, rng: &mut R) -> Result<AssignmentMatrix> {
    let members = losses.len();
    if k == 0 || k > members {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, {members}]")));
    }
    let batch = losses[0].len();
    if losses.iter().any(|l| l.len() != batch) {
        return Err(Error::InvalidArgument("member loss rows differ in length".into()));
    }
    let mut alpha = vec![false; members * batch];
    let mut order: Vec<usize> = (0..members).collect();
    for i in 0..batch {
        let col = |m: usize| losses[m][i];
        if (0..members).any(|m| !col(m).is_finite()) {
            return Err(Error::NonFinite(format!("member loss for example {i}")));
        }
        order.sort_by(|&a, &b| col(a).total_cmp(&col(b)).then(a.cmp(&b)));
        let boundary = col(order[k - 1]);
        let sure: Vec<usize> = order.iter().copied().filter(|&m| col(m) < boundary - TIE_TOLERANCE).collect();
        let tied: Vec<usize> =
            order.iter().copied().filter(|&m| (col(m) - boundary).abs() <= TIE_TOLERANCE).collect();
        let needed = k - sure.len();
        for m in sure {
            alpha[m * batch + i] = true;
        }
        if needed == tied.len() {
            tied.iter().for_each(|&m| alpha[m * batch + i] = true);
        } else {
            for j in sample(rng, tied.len(), needed) {
                alpha[tied[j] * batch + i] = true;
            }
        }
    }
    Ok(AssignmentMatrix { members, batch, k, alpha })
}

/// Oracle set-loss for a fixed assignment.
pub fn mcl_loss_with_assignment(
    scores: &[Tensor],
    labels: &[usize],
    assignment: &AssignmentMatrix,
    normalize_by_k: bool,
) -> Result<LossOutput> {
    check_scores(scores, labels)?;
    if assignment.members() != scores.len() || assignment.batch() != labels.len() {
        return Err(Error::InvalidArgument("assignment does not match scores".into()));
    }
    let b = labels.len() as f64;
    let norm = if normalize_by_k { b * assignment.k() as f64 } else { b };
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    let mut member_losses = Vec::with_capacity(scores.len());
    for (m, s) in scores.iter().enumerate() {
        let per = per_example_ce(s, labels)?;
        member_losses.push(mean(&per));
        let mut g = softmax_grad(&softmax(s), labels, 1.0 / norm);
        for (i, l) in per.iter().enumerate() {
            if assignment.get(m, i) {
                loss += l;
            } else {
                g.row_mut(i).fill(0.0);
            }
        }
        grads.push(g);
    }
    Ok(LossOutput {
        loss: loss / norm,
        grads,
        assignment: Some(assignment.clone()),
        member_losses,
        diagnostics: LossDiagnostics::default(),
    })
}

/// Per-example member losses, member-major.
pub fn member_example_losses(scores: &[Tensor], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    scores.iter().map(|s| per_example_ce(s, labels)).collect()
}

pub fn mcl_loss<R: Rng + ?Sized>(
    scores: &[Tensor],
    labels: &[usize],
    k: usize,
    normalize_by_k: bool,
    rng: &mut R,
) -> Result<LossOutput> {
    check_scores(scores, labels)?;
    let assignment = mcl_assign(&member_example_losses(scores, labels)?, k, rng)?;
    mcl_loss_with_assignment(scores, labels, &assignment, normalize_by_k)
}

/// `mix * L_mcl + (1 - mix) * sum_m CE_m / M`.
pub fn mcl_plus_ce_loss<R: Rng + ?Sized>(
    scores: &[Tensor],
    labels: &[usize],
    k: usize,
    mix: f64,
    normalize_by_k: bool,
    rng: &mut R,
) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::InvalidArgument(format!("mix {mix} outside [0, 1]")));
    }
    let mcl = mcl_loss(scores, labels, k, normalize_by_k, rng)?;
    let ce = independent_ce_loss(scores, labels)?;
    let m = scores.len() as f64;
    let ce_weight = (1.0 - mix) / m;
    let grads = mcl
        .grads
        .iter()
        .zip(&ce.grads)
        .map(|(a, c)| {
            let data = a.data().iter().zip(c.data()).map(|(x, y)| mix * x + ce_weight * y).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    Ok(LossOutput {
        loss: mix * mcl.loss + ce_weight * ce.loss,
        grads,
        assignment: mcl.assignment,
        member_losses: ce.member_losses,
        diagnostics: LossDiagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, members: usize, batch: usize, classes: usize) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..members).map(|_| Tensor::randn(&[batch, classes], 1.5, &mut rng)).collect();
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        (scores, labels)
    }

    fn fd(f: impl Fn(&[Tensor]) -> Result<LossOutput>, scores: &[Tensor]) -> f64 {
        let out = f(scores).unwrap();
        let cfg = GradCheckConfig { tolerance: 1e-6, ..Default::default() };
        let report = finite_difference_check(|p| f(p).map(|o| o.loss), scores, &out.grads, &cfg).unwrap();
        report.max_rel_error()
    }

    #[test]
    fn symmetric_two_class_ce() {
        let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out = ce_loss(&s, &[0]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grads[0].data(), &[-0.5, 0.5]);
    }

    #[test]
    fn confident_ce_vanishes() {
        let s = Tensor::new(vec![1, 2], vec![60.0, 0.0]).unwrap();
        let out = ce_loss(&s, &[0]).unwrap();
        assert!(out.loss < 1e-20);
        assert!(out.grads[0].max_abs() < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let s = Tensor::zeros(&[1, 3]);
        assert!(matches!(ce_loss(&s, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn losses_match_finite_differences() {
        let (scores, labels) = random_case(11, 3, 5, 10);
        assert!(fd(|s| ce_loss(&s[0], &labels), &scores[..1]) < 1e-6);
        assert!(fd(|s| score_averaged_loss(s, &labels), &scores) < 1e-6);
        assert!(fd(|s| prob_averaged_loss(s, &labels), &scores) < 1e-6);
        let alpha = mcl_assign(&member_example_losses(&scores, &labels).unwrap(), 2, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(fd(|s| mcl_loss_with_assignment(s, &labels, &alpha, false), &scores) < 1e-6);
    }

    #[test]
    fn identical_members_reduce_to_single_model() {
        let (scores, labels) = random_case(5, 1, 6, 4);
        let same = vec![scores[0].clone(); 3];
        let single = ce_loss(&scores[0], &labels).unwrap();
        let avg = score_averaged_loss(&same, &labels).unwrap();
        assert!((avg.loss - single.loss).abs() < 1e-12);
        let prob = prob_averaged_loss(&same, &labels).unwrap();
        assert!((prob.loss - single.loss).abs() < 1e-12);
        let mut scaled = single.grads[0].clone();
        scaled.scale(1.0 / 3.0);
        for g in &prob.grads {
            assert!(g.max_abs_diff(&scaled) < 1e-15);
        }
    }

    #[test]
    fn hopeless_member_gets_no_gradient() {
        let good = Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap();
        let bad = Tensor::new(vec![1, 2], vec![-30.0, 30.0]).unwrap();
        let out = prob_averaged_loss(&[good, bad], &[0]).unwrap();
        assert!(out.grads[1].max_abs() < 1e-20);
        assert!(out.grads[0].max_abs() > 1e-6);
    }

    #[test]
    fn prob_average_clamps_underflow() {
        let a = Tensor::new(vec![1, 2], vec![-400.0, 400.0]).unwrap();
        let out = prob_averaged_loss(&[a.clone(), a], &[0]).unwrap();
        assert_eq!(out.diagnostics.clamped, 1);
        assert!((out.loss + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(out.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn argmin_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = mcl_assign(&[vec![0.3], vec![0.1], vec![0.7]], 1, &mut rng).unwrap();
        assert_eq!((0..3).map(|m| a.get(m, 0)).collect::<Vec<_>>(), vec![false, true, false]);
        let all = mcl_assign(&[vec![0.3, 0.2], vec![0.1, 0.5]], 2, &mut rng).unwrap();
        assert!((0..2).all(|m| (0..2).all(|i| all.get(m, i))));
        assert!(mcl_assign(&[vec![0.3]], 2, &mut rng).is_err());
    }

    #[test]
    fn ties_are_broken_uniformly() {
        let losses = [vec![0.3], vec![0.1], vec![0.7], vec![0.1]];
        let mut counts = [0usize; 4];
        for seed in 0..1000 {
            let a = mcl_assign(&losses, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            counts[a.first_winner()[0]] += 1;
        }
        assert_eq!(counts[0] + counts[2], 0);
        let expected = 500.0;
        let chi2 = [counts[1], counts[3]].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>();
        // 99.9th percentile of chi-square with one degree of freedom.
        assert!(chi2 < 10.83, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn mcl_with_k_equal_m_is_a_standard_ensemble() {
        let (scores, labels) = random_case(2, 4, 7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mcl = mcl_loss(&scores, &labels, 4, false, &mut rng).unwrap();
        let ind = independent_ce_loss(&scores, &labels).unwrap();
        assert!((mcl.loss - ind.loss).abs() < 1e-12);
        for (a, b) in mcl.grads.iter().zip(&ind.grads) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn unassigned_examples_get_zero_gradient() {
        let s0 = Tensor::new(vec![1, 2], vec![5.0, 0.0]).unwrap();
        let s1 = Tensor::new(vec![1, 2], vec![0.0, 5.0]).unwrap();
        let out = mcl_loss(&[s0, s1], &[0], 1, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.assignment.as_ref().unwrap().get(0, 0));
        assert!(out.grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let (scores, labels) = random_case(9, 3, 6, 4);
        let rng = || ChaCha8Rng::seed_from_u64(4);
        let mcl = mcl_loss(&scores, &labels, 1, false, &mut rng()).unwrap();
        let one = mcl_plus_ce_loss(&scores, &labels, 1, 1.0, false, &mut rng()).unwrap();
        assert!((one.loss - mcl.loss).abs() < 1e-15);
        let ind = independent_ce_loss(&scores, &labels).unwrap();
        let zero = mcl_plus_ce_loss(&scores, &labels, 1, 0.0, false, &mut rng()).unwrap();
        assert!((zero.loss - ind.loss / 3.0).abs() < 1e-15);
        let half = mcl_plus_ce_loss(&scores, &labels, 1, 0.5, false, &mut rng()).unwrap();
        for m in 0..3 {
            for j in 0..half.grads[m].len() {
                let want = 0.5 * mcl.grads[m].data()[j] + 0.5 * ind.grads[m].data()[j] / 3.0;
                assert!((half.grads[m].data()[j] - want).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn score_averaged_gradients_are_bitwise_identical(seed in any::<u64>(), m in 1usize..6, b in 1usize..5) {
            let (scores, labels) = random_case(seed, m, b, 4);
            let out = score_averaged_loss(&scores, &labels).unwrap();
            for g in &out.grads {
                prop_assert!(g.bitwise_eq(&out.grads[0]));
            }
        }

        #[test]
        fn prob_weights_sum_to_one(seed in any::<u64>(), m in 1usize..6, b in 1usize..5) {
            let (scores, labels) = random_case(seed, m, b, 4);
            for row in prob_average_weights(&scores, &labels).unwrap() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|w| (0.0..=1.0).contains(w)));
            }
        }

        #[test]
        fn assignment_columns_sum_to_k(seed in any::<u64>(), m in 1usize..6, b in 1usize..8, kk in 0usize..6) {
            let k = kk % m + 1;
            let (scores, labels) = random_case(seed, m, b, 3);
            let out = mcl_loss(&scores, &labels, k, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let a = out.assignment.unwrap();
            for i in 0..b {
                prop_assert_eq!(a.column_sum(i), k);
                for mm in 0..m {
                    if !a.get(mm, i) {
                        prop_assert!(out.grads[mm].row(i).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }

        #[test]
        fn set_loss_grows_with_k(seed in any::<u64>(), m in 2usize..6, b in 1usize..8) {
            let (scores, labels) = random_case(seed, m, b, 3);
            let mut prev = 0.0;
            for k in 1..=m {
                let l = mcl_loss(&scores, &labels, k, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss;
                prop_assert!(l >= prev);
                prev = l;
            }
        }
    }
}
