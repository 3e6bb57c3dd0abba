//! Trains a four-member ensemble on synthetic clusters with and without a
//! shared first layer and compares accuracy against parameter count.
//!
//! `cargo run --release --example treenet_sharing`

use treenet::data::synth_split;
use treenet::metrics::evaluate;
use treenet::netspec::builders::mlp_chain;
use treenet::netspec::{expand_treenet, SplitPoint};
use treenet::trainer::{train_independent, Feed, SgdConfig, TrainOptions};
use treenet::{CompiledGraph, InitPolicy};

fn main() -> treenet::Result<()> {
    let (train, test) = synth_split(8, 200, 100, 2, 0.25, 0)?;
    let base = mlp_chain(2, &[32, 32], 8);
    let opts = TrainOptions {
        sgd: SgdConfig { lr: 0.05, batch_size: 64, iterations: 3000, ..SgdConfig::default() },
        log_every: 1000,
        ..TrainOptions::default()
    };
    for split in ["none", "fc1", "fc2", "all"] {
        let spec = expand_treenet(&base, 4, &SplitPoint::parse(split))?;
        let graph = CompiledGraph::compile(&spec, &InitPolicy::he(), 0)?;
        let params = graph.param_count();
        let (mut t, report) = train_independent(vec![graph], &train, Feed::all(train.len()), opts.clone())?;
        let m = evaluate(&mut t.graphs, &test, None)?;
        println!(
            "split {split:>4}: {params:>5} params, final loss {:.4}, ensemble mean {:.4}, oracle {:.4}",
            report.losses.last().unwrap_or(&f64::NAN),
            m.ensemble_mean_acc,
            m.oracle_acc
        );
    }
    Ok(())
}
