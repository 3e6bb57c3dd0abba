//! Compares independent cross-entropy with the two ensemble-averaged losses
//! at the same iteration budget.
//!
//! `cargo run --release --example ensemble_losses`

use treenet::data::synth_split;
use treenet::metrics::evaluate;
use treenet::netspec::builders::mlp_chain;
use treenet::netspec::{expand_treenet, SplitPoint};
use treenet::trainer::{Feed, SgdConfig, TrainOptions, Trainer};
use treenet::{CompiledGraph, InitPolicy, LossConfig, LossMode};

fn main() -> treenet::Result<()> {
    let (train, test) = synth_split(8, 200, 100, 2, 0.25, 1)?;
    let spec = expand_treenet(&mlp_chain(2, &[32, 32], 8), 4, &SplitPoint::None)?;
    for mode in [LossMode::IndependentCe, LossMode::ScoreAveraged, LossMode::ProbAveraged] {
        let opts = TrainOptions {
            sgd: SgdConfig { lr: 0.05, batch_size: 64, iterations: 2000, ..SgdConfig::default() },
            loss: Some(LossConfig::new(mode)),
            log_every: 1000,
            ..TrainOptions::default()
        };
        let graph = CompiledGraph::compile(&spec, &InitPolicy::he(), 1)?;
        let mut t = Trainer::new(vec![graph], Feed::all(train.len()), opts)?;
        let report = t.run(&train)?;
        let m = evaluate(&mut t.graphs, &test, None)?;
        let accs: Vec<String> = m.member_accs.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "{mode:>15}: rate {:.2}, ensemble mean {:.4}, members [{}], clamped {}",
            t.current_lr(),
            m.ensemble_mean_acc,
            accs.join(" "),
            report.clamped
        );
    }
    Ok(())
}
