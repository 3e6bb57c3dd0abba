//! Bootstrap resampling: the unique fraction of a bag, and bagged members
//! against members that differ only by initialization.
//!
//! `cargo run --release --example bagging`

use treenet::data::{bag_sample, expected_unique_fraction, synth_split, unique_fraction, SamplingMode, SamplingPlan};
use treenet::graph::member_seed;
use treenet::metrics::evaluate;
use treenet::netspec::builders::mlp_chain;
use treenet::trainer::{Feed, SgdConfig, TrainOptions, Trainer};
use treenet::{CompiledGraph, InitPolicy};

fn main() -> treenet::Result<()> {
    for n in [10, 1_000, 100_000] {
        let f = unique_fraction(&bag_sample(n, 0), n);
        println!("|D| = {n:>6}: unique fraction {f:.4} (expected {:.4})", expected_unique_fraction(n));
    }

    let (train, test) = synth_split(8, 15, 100, 2, 0.25, 0)?;
    let spec = mlp_chain(2, &[32], 8);
    let opts = TrainOptions {
        sgd: SgdConfig { lr: 0.05, batch_size: 64, iterations: 2000, ..SgdConfig::default() },
        log_every: 1000,
        ..TrainOptions::default()
    };
    for mode in [SamplingMode::Shared, SamplingMode::Bagged] {
        let plan = SamplingPlan::new(mode, train.len(), 4, 0)?;
        let graphs = (0..4)
            .map(|m| CompiledGraph::compile(&spec, &InitPolicy::he(), member_seed(0, m)))
            .collect::<treenet::Result<Vec<_>>>()?;
        let mut t = Trainer::new(graphs, Feed::PerGraph(plan.members), opts.clone())?;
        t.run(&train)?;
        let m = evaluate(&mut t.graphs, &test, None)?;
        println!("{mode:?}: ensemble mean {:.4}, oracle {:.4}", m.ensemble_mean_acc, m.oracle_acc);
    }
    Ok(())
}
