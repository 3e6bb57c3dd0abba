//! Finite-difference check of a TreeNet's backward pass under each loss.
//!
//! `cargo run --example gradient_check`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use treenet::losses::{mcl_assign, mcl_loss_with_assignment, member_example_losses};
use treenet::netspec::builders::mlp_chain;
use treenet::netspec::{expand_treenet, SplitPoint};
use treenet::tensor::{finite_difference_check, GradCheckConfig};
use treenet::{CompiledGraph, InitPolicy, LossConfig, LossMode, Tensor};

fn main() -> treenet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = expand_treenet(&mlp_chain(4, &[6, 6], 3), 3, &SplitPoint::At("fc1".into()))?;
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let y = [0, 2, 1, 1, 0];

    for mode in [LossMode::IndependentCe, LossMode::ScoreAveraged, LossMode::ProbAveraged, LossMode::Mcl] {
        let mut g = CompiledGraph::compile(&spec, &InitPolicy::he(), 7)?;
        // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
        let jittered: Vec<Tensor> = g.params().iter().map(|p| Tensor::randn(p.shape(), 0.5, &mut rng)).collect();
        g.set_params(&jittered)?;
        let out = g.forward(&x)?;
        let cfg = LossConfig::new(mode);
        // MCL is checked with its assignment held fixed.
        let alpha = mcl_assign(&member_example_losses(&out.scores, &y)?, 1, &mut rng)?;
        let loss = |scores: &[Tensor]| -> treenet::Result<_> {
            match mode {
                LossMode::Mcl => mcl_loss_with_assignment(scores, &y, &alpha, false),
                _ => cfg.evaluate(scores, &y, &mut ChaCha8Rng::seed_from_u64(0)),
            }
        };
        g.backward(&loss(&out.scores)?.grads)?;
        let mut probe = g.clone();
        let report = finite_difference_check(
            |p| {
                probe.set_params(p)?;
                Ok(loss(&probe.forward(&x)?.scores)?.loss)
            },
            &g.params(),
            &g.grads(),
            &GradCheckConfig::default(),
        )?;
        println!("{mode:>15}: max relative error {:.2e} ({})", report.max_rel_error(), if report.passed() { "ok" } else { "FAILED" });
    }
    Ok(())
}
